//! Retrieval metrics under the multi-caption protocol, plus per-unit
//! alignment dumps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::RetrievalDataset;
use crate::error::{Error, Result};
use crate::kernel::{self, AggregationMode, ScoringConfig};
use crate::matrix::FeatureMatrix;
use crate::model::{project, ProjectionHead};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    T2A,
    A2T,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::T2A => write!(f, "T2A"),
            Direction::A2T => write!(f, "A2T"),
        }
    }
}

/// Whether a retrieval query scores candidates with the query side as the
/// scoring query (directional) or with the mean of both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionMode {
    #[default]
    Directional,
    Symmetric,
}

impl fmt::Display for DirectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DirectionMode::Directional => write!(f, "directional"),
            DirectionMode::Symmetric => write!(f, "symmetric"),
        }
    }
}

impl FromStr for DirectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directional" => Ok(DirectionMode::Directional),
            "symmetric" => Ok(DirectionMode::Symmetric),
            other => Err(Error::Config(format!(
                "unknown direction mode {other:?} (expected directional or symmetric)"
            ))),
        }
    }
}

/// Recall metrics for one retrieval direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    /// Rank of the best relevant candidate for each query, 1-based.
    pub ranks: Vec<usize>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RetrievalResult {
    pub fn from_ranks(direction: Direction, ranks: Vec<usize>) -> Self {
        let recall = |k: usize| {
            if ranks.is_empty() {
                0.0
            } else {
                ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
            }
        };
        let (r1, r5, r10) = (recall(1), recall(5), recall(10));
        RetrievalResult { direction, ranks, r1, r5, r10 }
    }

    pub fn recall_at(&self, k: usize) -> f64 {
        if self.ranks.is_empty() {
            0.0
        } else {
            self.ranks.iter().filter(|&&r| r <= k).count() as f64 / self.ranks.len() as f64
        }
    }
}

/// Rank of the best-scoring relevant candidate with pessimistic ties:
/// 1 plus the number of other candidates scoring greater than or equal to
/// it. Depends only on the score multiset, never on candidate order.
pub fn rank_of(scores: &[f64], relevant: &[usize]) -> Result<usize> {
    if relevant.is_empty() {
        return Err(Error::Contract("rank_of: empty relevant set".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for &idx in relevant {
        if idx >= scores.len() {
            return Err(Error::Contract(format!(
                "rank_of: relevant index {idx} out of range for {} candidates",
                scores.len()
            )));
        }
        best = best.max(scores[idx]);
    }
    Ok(scores.iter().filter(|&&s| s >= best).count())
}

fn scored(
    query: &FeatureMatrix,
    context: &FeatureMatrix,
    cfg: &ScoringConfig,
    mode: AggregationMode,
    dmode: DirectionMode,
) -> Result<f64> {
    match dmode {
        DirectionMode::Directional => kernel::pair_score(query, context, cfg, mode),
        DirectionMode::Symmetric => {
            let forward = kernel::pair_score(query, context, cfg, mode)?;
            let backward = kernel::pair_score(context, query, cfg, mode)?;
            Ok((forward + backward) * 0.5)
        }
    }
}

fn project_all(
    dataset: &RetrievalDataset,
    heads: Option<(&ProjectionHead, &ProjectionHead)>,
) -> Result<(Vec<FeatureMatrix>, Vec<(usize, FeatureMatrix)>)> {
    let mut audio = Vec::with_capacity(dataset.n_pairs());
    for i in 0..dataset.n_pairs() {
        let feats = dataset.audio_feature(i);
        audio.push(match heads {
            Some((audio_head, _)) => project(feats, audio_head)?,
            None => feats.clone(),
        });
    }
    let mut captions = Vec::with_capacity(dataset.caption_count());
    for (pair_idx, slot) in dataset.flat_captions() {
        let feats = dataset.caption_feature(pair_idx, slot);
        let projected = match heads {
            Some((_, text_head)) => project(feats, text_head)?,
            None => feats.clone(),
        };
        captions.push((pair_idx, projected));
    }
    Ok((audio, captions))
}

/// Runs both retrieval directions over a dataset.
///
/// Text-to-audio: every caption queries all audio items, its paired audio
/// is the single relevant candidate. Audio-to-text: every audio item
/// queries all captions, any of its captions counts (rank of the best).
/// `heads = None` evaluates raw features (identity heads).
pub fn evaluate(
    dataset: &RetrievalDataset,
    heads: Option<(&ProjectionHead, &ProjectionHead)>,
    cfg: &ScoringConfig,
    mode: AggregationMode,
    dmode: DirectionMode,
) -> Result<(RetrievalResult, RetrievalResult)> {
    if dataset.n_pairs() == 0 {
        return Err(Error::Contract("evaluate: empty dataset".into()));
    }
    let (audio, captions) = project_all(dataset, heads)?;

    let mut t2a_ranks = Vec::with_capacity(captions.len());
    for (owner, caption) in &captions {
        let mut scores = Vec::with_capacity(audio.len());
        for item in &audio {
            scores.push(scored(caption, item, cfg, mode, dmode)?);
        }
        t2a_ranks.push(rank_of(&scores, &[*owner])?);
    }

    let mut a2t_ranks = Vec::with_capacity(audio.len());
    for (i, item) in audio.iter().enumerate() {
        let mut scores = Vec::with_capacity(captions.len());
        let mut relevant = Vec::new();
        for (ci, (owner, caption)) in captions.iter().enumerate() {
            if *owner == i {
                relevant.push(ci);
            }
            scores.push(scored(item, caption, cfg, mode, dmode)?);
        }
        a2t_ranks.push(rank_of(&scores, &relevant)?);
    }

    Ok((
        RetrievalResult::from_ranks(Direction::T2A, t2a_ranks),
        RetrievalResult::from_ranks(Direction::A2T, a2t_ranks),
    ))
}

/// Per-unit scores of one query against one candidate context.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEntry {
    pub context_id: String,
    /// Cosine agreement of each query unit with its context summary.
    pub local_scores: Vec<f64>,
    /// Pooled global score; always the LSE pool of `local_scores`.
    pub pooled: f64,
}

/// Alignment data for one query against a set of candidates; the rows
/// needed to plot per-word (or per-frame) similarity against each context.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentDump {
    pub query_id: String,
    pub entries: Vec<AlignmentEntry>,
}

const POOL_CONSISTENCY_TOL: f64 = 1e-9;

/// Computes per-unit scores of `query` against every candidate.
pub fn dump_alignment(
    query_id: &str,
    query: &FeatureMatrix,
    contexts: &[(String, FeatureMatrix)],
    cfg: &ScoringConfig,
) -> Result<AlignmentDump> {
    let mut entries = Vec::with_capacity(contexts.len());
    for (context_id, context) in contexts {
        let sims = kernel::local_similarity(query, context)?;
        let weights = kernel::attention_weights(&sims, cfg)?;
        let aware = kernel::context_aware_vectors(&weights, context)?;
        let local_scores = kernel::local_global_scores(query, &aware, cfg)?;
        let pooled = kernel::lse_pool(&local_scores, cfg)?;
        entries.push(AlignmentEntry {
            context_id: context_id.clone(),
            local_scores,
            pooled,
        });
    }
    Ok(AlignmentDump { query_id: query_id.to_string(), entries })
}

/// Writes the dump as plot-ready tab-separated text, re-verifying on emit
/// that each pooled value equals the LSE pool of its local scores.
pub fn write_alignment_tsv<W: Write>(dump: &AlignmentDump, cfg: &ScoringConfig, w: &mut W) -> Result<()> {
    writeln!(w, "# query_id={}", dump.query_id)?;
    writeln!(w, "query_unit_index\tcontext_id\tlocal_score")?;
    for entry in &dump.entries {
        let recomputed = kernel::lse_pool(&entry.local_scores, cfg)?;
        if (recomputed - entry.pooled).abs() > POOL_CONSISTENCY_TOL {
            return Err(Error::Contract(format!(
                "alignment dump for context {:?} has pooled score {} but its local scores pool to {}",
                entry.context_id, entry.pooled, recomputed
            )));
        }
        for (i, s) in entry.local_scores.iter().enumerate() {
            writeln!(w, "{i}\t{}\t{s}", entry.context_id)?;
        }
        writeln!(w, "pooled\t{}\t{}", entry.context_id, entry.pooled)?;
    }
    Ok(())
}
