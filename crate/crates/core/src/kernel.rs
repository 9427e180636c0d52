//! Local-to-global multiscale matching (LGMM) similarity kernel.
//!
//! A global similarity between two local-feature matrices is built in three
//! stages: raw dot products between every (query unit, context unit) pair,
//! attention-weighted context summaries per query unit, and LogSumExp
//! pooling of the per-unit cosine agreement scores. The first argument is
//! always the query; swapping arguments changes the result.
//!
//! The four classic aggregation baselines (max/mean over the plain pairwise
//! cosine matrix) live here too, for head-to-head comparisons.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Mat};
use crate::numeric;

/// Hyperparameters of the scoring pipeline.
///
/// `epsilon` guards two denominators: it is added inside the square root of
/// the per-column norms in the attention pre-normalization, and to each
/// norm of the per-unit cosine. It may be set to 0 to recover the exact
/// unguarded formulas (used by the scale-invariance checks).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Softmax temperature of the attention weights.
    pub tau_w: f64,
    /// LogSumExp sharpness; large values approach max pooling.
    pub lambda: f64,
    /// Denominator guard.
    pub epsilon: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            tau_w: 0.25,
            lambda: 10.0,
            epsilon: 1e-12,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_w > 0.0 && self.tau_w.is_finite()) {
            return Err(Error::Config(format!("tau_w must be > 0, got {}", self.tau_w)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Raw dot products for all (query unit, context unit) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSimMatrix(Mat);

impl LocalSimMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("local similarity matrix".into()));
        }
        Ok(LocalSimMatrix(values))
    }

    #[inline]
    pub fn values(&self) -> &Mat {
        &self.0
    }
}

/// Attention weights: one probability distribution over context units per
/// query unit.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix(Mat);

impl WeightMatrix {
    #[inline]
    pub fn values(&self) -> &Mat {
        &self.0
    }
}

/// Modality tag carried by score matrices so loss terms can check they were
/// handed the direction they expect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Audio => write!(f, "audio"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// Square batch score matrix for one (query modality, context modality)
/// direction: entry (m, n) scores query item m against context item n.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    values: Mat,
    query_modality: Modality,
    context_modality: Modality,
}

impl ScoreMatrix {
    pub fn new(values: Mat, query_modality: Modality, context_modality: Modality) -> Result<Self> {
        if values.rows() != values.cols() || values.rows() == 0 {
            return Err(Error::shape(
                "ScoreMatrix::new",
                "non-empty square matrix",
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(ScoreMatrix {
            values,
            query_modality,
            context_modality,
        })
    }

    /// Batch size B.
    #[inline]
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn values(&self) -> &Mat {
        &self.values
    }

    #[inline]
    pub fn query_modality(&self) -> Modality {
        self.query_modality
    }

    #[inline]
    pub fn context_modality(&self) -> Modality {
        self.context_modality
    }
}

/// How the pairwise similarity structure is reduced to one scalar.
///
/// For the two-stage baselines the name reads `<stage1>-<stage2>`: the first
/// word is the per-query-unit reduction over context units, the second the
/// reduction across query units. `MaxMean` therefore takes each query
/// unit's best context match and averages those maxima.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    Lgmm,
    MaxMean,
    MaxMax,
    MeanMean,
    MeanMax,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 5] = [
        AggregationMode::Lgmm,
        AggregationMode::MaxMean,
        AggregationMode::MaxMax,
        AggregationMode::MeanMean,
        AggregationMode::MeanMax,
    ];
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AggregationMode::Lgmm => "lgmm",
            AggregationMode::MaxMean => "max-mean",
            AggregationMode::MaxMax => "max-max",
            AggregationMode::MeanMean => "mean-mean",
            AggregationMode::MeanMax => "mean-max",
        };
        write!(f, "{s}")
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lgmm" => Ok(AggregationMode::Lgmm),
            "max-mean" => Ok(AggregationMode::MaxMean),
            "max-max" => Ok(AggregationMode::MaxMax),
            "mean-mean" => Ok(AggregationMode::MeanMean),
            "mean-max" => Ok(AggregationMode::MeanMax),
            other => Err(Error::Config(format!(
                "unknown aggregation mode {other:?} (expected one of lgmm, max-mean, max-max, mean-mean, mean-max)"
            ))),
        }
    }
}

fn check_dims(query: &FeatureMatrix, context: &FeatureMatrix) -> Result<()> {
    if query.dim() != context.dim() {
        return Err(Error::DimMismatch {
            query: query.dim(),
            context: context.dim(),
        });
    }
    Ok(())
}

/// Stage 1: dot product of every query row with every context row.
pub fn local_similarity(query: &FeatureMatrix, context: &FeatureMatrix) -> Result<LocalSimMatrix> {
    check_dims(query, context)?;
    Ok(LocalSimMatrix(numeric::matmul_nt(query.as_mat(), context.as_mat())))
}

/// Stage 2: normalize each context column by its L2 norm over query units,
/// then softmax each query row over context units with temperature `tau_w`.
pub fn attention_weights(sims: &LocalSimMatrix, cfg: &ScoringConfig) -> Result<WeightMatrix> {
    cfg.validate()?;
    let normalized = numeric::col_l2_normalize(sims.values(), cfg.epsilon);
    Ok(WeightMatrix(numeric::row_softmax(&normalized, cfg.tau_w)))
}

/// Stage 3: context summary per query unit, the attention-weighted sum of
/// context rows.
pub fn context_aware_vectors(weights: &WeightMatrix, context: &FeatureMatrix) -> Result<FeatureMatrix> {
    if weights.values().cols() != context.rows() {
        return Err(Error::shape(
            "context_aware_vectors",
            format!("weights with {} columns", context.rows()),
            format!("{} columns", weights.values().cols()),
        ));
    }
    let aware = numeric::matmul(weights.values(), context.as_mat());
    Ok(FeatureMatrix::from_mat_unchecked(aware))
}

/// Stage 4: cosine between each query row and its context summary, with
/// `cfg.epsilon` added to each norm in the denominator.
pub fn local_global_scores(
    query: &FeatureMatrix,
    aware: &FeatureMatrix,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if query.rows() != aware.rows() || query.dim() != aware.dim() {
        return Err(Error::shape(
            "local_global_scores",
            format!("{}x{}", query.rows(), query.dim()),
            format!("{}x{}", aware.rows(), aware.dim()),
        ));
    }
    Ok(numeric::rows_cosine(query.as_mat(), aware.as_mat(), cfg.epsilon)
        .data()
        .to_vec())
}

/// Stage 5: soft-maximum pooling, `(1/lambda) log sum_i exp(lambda s_i)`.
///
/// The result lies in `[max(scores), max(scores) + ln(n)/lambda]`.
pub fn lse_pool(scores: &[f64], cfg: &ScoringConfig) -> Result<f64> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(Error::Contract("lse_pool: empty score vector".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lse_pool input".into()));
    }
    Ok(numeric::lse(scores, cfg.lambda))
}

/// Full pipeline: global similarity of `query` against `context`.
pub fn lgmm_score(query: &FeatureMatrix, context: &FeatureMatrix, cfg: &ScoringConfig) -> Result<f64> {
    let sims = local_similarity(query, context)?;
    let weights = attention_weights(&sims, cfg)?;
    let aware = context_aware_vectors(&weights, context)?;
    let scores = local_global_scores(query, &aware, cfg)?;
    lse_pool(&scores, cfg)
}

/// Two-stage reduction of the plain pairwise cosine matrix (no attention).
///
/// `mode` must be one of the four baselines; the attention pipeline is
/// [`lgmm_score`].
pub fn baseline_score(
    query: &FeatureMatrix,
    context: &FeatureMatrix,
    mode: AggregationMode,
) -> Result<f64> {
    if mode == AggregationMode::Lgmm {
        return Err(Error::Contract(
            "baseline_score: mode lgmm is not a baseline; call lgmm_score".into(),
        ));
    }
    check_dims(query, context)?;

    // Per query row: cosine against every context row, reduced by stage 1.
    let mut per_unit = Vec::with_capacity(query.rows());
    for i in 0..query.rows() {
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for j in 0..context.rows() {
            let c = numeric::cosine(query.row(i), context.row(j));
            best = best.max(c);
            sum += c;
        }
        let stage1 = match mode {
            AggregationMode::MaxMean | AggregationMode::MaxMax => best,
            AggregationMode::MeanMean | AggregationMode::MeanMax => sum / context.rows() as f64,
            AggregationMode::Lgmm => unreachable!(),
        };
        per_unit.push(stage1);
    }

    let stage2 = match mode {
        AggregationMode::MaxMax | AggregationMode::MeanMax => {
            per_unit.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        }
        AggregationMode::MaxMean | AggregationMode::MeanMean => {
            per_unit.iter().sum::<f64>() / per_unit.len() as f64
        }
        AggregationMode::Lgmm => unreachable!(),
    };
    Ok(stage2)
}

/// Scores one pair under the requested mode.
pub fn pair_score(
    query: &FeatureMatrix,
    context: &FeatureMatrix,
    cfg: &ScoringConfig,
    mode: AggregationMode,
) -> Result<f64> {
    match mode {
        AggregationMode::Lgmm => lgmm_score(query, context, cfg),
        baseline => baseline_score(query, context, baseline),
    }
}

/// Scores every query against every context; entry (m, n) is
/// `pair_score(queries[m], contexts[n])`. Cells are independent, so the
/// result does not depend on evaluation order.
pub fn batch_score_matrix(
    queries: &[FeatureMatrix],
    contexts: &[FeatureMatrix],
    cfg: &ScoringConfig,
    mode: AggregationMode,
    query_modality: Modality,
    context_modality: Modality,
) -> Result<ScoreMatrix> {
    if queries.is_empty() || contexts.is_empty() {
        return Err(Error::Contract("batch_score_matrix: empty batch".into()));
    }
    if queries.len() != contexts.len() {
        return Err(Error::shape(
            "batch_score_matrix",
            format!("{} contexts", queries.len()),
            format!("{} contexts", contexts.len()),
        ));
    }
    let mut values = Mat::zeros(queries.len(), contexts.len());
    for (m, q) in queries.iter().enumerate() {
        for (n, c) in contexts.iter().enumerate() {
            values.set(m, n, pair_score(q, c, cfg, mode)?);
        }
    }
    ScoreMatrix::new(values, query_modality, context_modality)
}
