//! Projection heads, the optimizer, and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, HeadVars, Tape, Var};
use crate::data::RetrievalDataset;
use crate::error::{Error, Result};
use crate::eval::{self, DirectionMode};
use crate::kernel::{AggregationMode, ScoringConfig};
use crate::losses::{LossBreakdown, LossConfig, LossFlags, MatchLabels};
use crate::matrix::{FeatureMatrix, Mat};
use crate::numeric;

/// Two rectified linear layers mapping raw per-modality features into the
/// shared space. `final_relu` keeps the rectifier after the second layer,
/// which constrains shared-space features to the non-negative orthant; it
/// can be switched off for experimentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub final_relu: bool,
}

impl ProjectionHead {
    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_shared(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.b1.shape() != (1, self.w1.cols())
            || self.w2.rows() != self.w1.cols()
            || self.b2.shape() != (1, self.w2.cols())
        {
            return Err(Error::shape(
                "ProjectionHead::validate",
                "consistent layer shapes",
                format!(
                    "w1 {}x{}, b1 {}x{}, w2 {}x{}, b2 {}x{}",
                    self.w1.rows(),
                    self.w1.cols(),
                    self.b1.rows(),
                    self.b1.cols(),
                    self.w2.rows(),
                    self.w2.cols(),
                    self.b2.rows(),
                    self.b2.cols()
                ),
            ));
        }
        for (name, m) in self.named_params() {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("projection head parameter {name}")));
            }
        }
        Ok(())
    }

    pub fn named_params(&self) -> [(&'static str, &Mat); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }
}

/// Applies a head to raw local features; row count is preserved.
pub fn project(raw: &FeatureMatrix, head: &ProjectionHead) -> Result<FeatureMatrix> {
    if raw.dim() != head.d_in() {
        return Err(Error::DimMismatch {
            query: raw.dim(),
            context: head.d_in(),
        });
    }
    let h = numeric::relu(&numeric::add_row(&numeric::matmul(raw.as_mat(), &head.w1), &head.b1));
    let out = numeric::add_row(&numeric::matmul(&h, &head.w2), &head.b2);
    let out = if head.final_relu { numeric::relu(&out) } else { out };
    Ok(FeatureMatrix::from_mat_unchecked(out))
}

fn uniform_layer<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Mat::new(fan_in, fan_out, data)
}

/// Initializes both modality heads from one seed: weights uniform in
/// ±sqrt(6 / (fan_in + fan_out)), biases zero. The audio head's layers are
/// drawn first, so the two heads differ even with equal input dims.
pub fn init_heads(
    d_in_audio: usize,
    d_in_text: usize,
    d_hidden: usize,
    d_shared: usize,
    seed: u64,
) -> Result<(ProjectionHead, ProjectionHead)> {
    for (name, d) in [
        ("d_in_audio", d_in_audio),
        ("d_in_text", d_in_text),
        ("d_hidden", d_hidden),
        ("d_shared", d_shared),
    ] {
        if d == 0 {
            return Err(Error::Config(format!("init_heads: {name} must be >= 1")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = |d_in: usize, rng: &mut ChaCha8Rng| ProjectionHead {
        w1: uniform_layer(rng, d_in, d_hidden),
        b1: Mat::zeros(1, d_hidden),
        w2: uniform_layer(rng, d_hidden, d_shared),
        b2: Mat::zeros(1, d_shared),
        final_relu: true,
    };
    let audio = head(d_in_audio, &mut rng);
    let text = head(d_in_text, &mut rng);
    Ok((audio, text))
}

/// Adam with bias correction. Moments are kept per parameter tensor in the
/// order the tensors are registered.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. A non-finite gradient aborts the step
    /// before any state is touched and names the offending parameter.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[&Mat], names: &[&str]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "Adam: parameter count mismatch");
        assert_eq!(grads.len(), params.len());
        assert_eq!(names.len(), params.len());
        for ((g, p), name) in grads.iter().zip(params.iter()).zip(names) {
            assert_eq!(g.shape(), p.shape(), "Adam: gradient shape mismatch for {name}");
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient((*name).to_string()));
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, param) in params.iter_mut().enumerate() {
            let g = grads[pi];
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..g.data().len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                param.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Training knobs. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub d_hidden: usize,
    pub d_shared: usize,
    pub final_relu: bool,
    pub scoring: ScoringConfig,
    pub loss: LossConfig,
    pub flags: LossFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            lr: 5e-5,
            d_hidden: 32,
            d_shared: 16,
            final_relu: true,
            scoring: ScoringConfig::default(),
            loss: LossConfig::default(),
            flags: LossFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scoring.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.flags.intra_c && self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 when the intra-modal term is enabled".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.d_hidden == 0 || self.d_shared == 0 {
            return Err(Error::Config("d_hidden and d_shared must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch log entry: batch-averaged loss terms and the validation
/// retrieval metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub inter_c: f64,
    pub jnt: Option<f64>,
    pub intra_c: Option<f64>,
    pub total: f64,
    /// Text-query R@1 on the validation split (the training split when no
    /// held-out split was supplied).
    pub val_t2a_r1: f64,
    /// Set when a head received an all-zero gradient on some batch with a
    /// nonzero loss, i.e. its rectifiers saturated.
    pub dead_audio_grad: bool,
    pub dead_text_grad: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub audio_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub metrics: Vec<EpochMetrics>,
}

const PARAM_NAMES: [&str; 8] = [
    "audio.w1", "audio.b1", "audio.w2", "audio.b2", "text.w1", "text.b1", "text.w2", "text.b2",
];

struct BatchStep {
    breakdown: LossBreakdown,
    dead_audio: bool,
    dead_text: bool,
}

fn record_square_matrix(
    tape: &mut Tape,
    queries: &[Var],
    contexts: &[Var],
    scoring: &ScoringConfig,
) -> Result<Var> {
    let b = queries.len();
    let mut cells = Vec::with_capacity(b * b);
    for &q in queries {
        for &c in contexts {
            cells.push(autograd::record_lgmm_score(tape, q, c, scoring)?);
        }
    }
    tape.stack_scalars(&cells, b, b)
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    audio_head: &mut ProjectionHead,
    text_head: &mut ProjectionHead,
    optimizer: &mut Adam,
    audio_feats: &[&FeatureMatrix],
    text_feats: &[&FeatureMatrix],
    cfg: &TrainConfig,
    labels: &MatchLabels,
) -> Result<BatchStep> {
    let b = audio_feats.len();
    let mut tape = Tape::new();

    let audio_vars = HeadVars {
        w1: tape.leaf(audio_head.w1.clone()),
        b1: tape.leaf(audio_head.b1.clone()),
        w2: tape.leaf(audio_head.w2.clone()),
        b2: tape.leaf(audio_head.b2.clone()),
        final_relu: audio_head.final_relu,
    };
    let text_vars = HeadVars {
        w1: tape.leaf(text_head.w1.clone()),
        b1: tape.leaf(text_head.b1.clone()),
        w2: tape.leaf(text_head.w2.clone()),
        b2: tape.leaf(text_head.b2.clone()),
        final_relu: text_head.final_relu,
    };

    let mut audio_proj = Vec::with_capacity(b);
    let mut text_proj = Vec::with_capacity(b);
    for feats in audio_feats {
        let leaf = tape.leaf(feats.as_mat().clone());
        audio_proj.push(autograd::record_project(&mut tape, leaf, &audio_vars)?);
    }
    for feats in text_feats {
        let leaf = tape.leaf(feats.as_mat().clone());
        text_proj.push(autograd::record_project(&mut tape, leaf, &text_vars)?);
    }

    let s_at = record_square_matrix(&mut tape, &audio_proj, &text_proj, &cfg.scoring)?;
    let need_ta = cfg.flags.jnt || cfg.loss.text_query_second_term;
    let need_intra = cfg.flags.jnt || cfg.flags.intra_c;
    let s_ta = if need_ta {
        Some(record_square_matrix(&mut tape, &text_proj, &audio_proj, &cfg.scoring)?)
    } else {
        None
    };
    let (s_aa, s_tt) = if need_intra {
        (
            Some(record_square_matrix(&mut tape, &audio_proj, &audio_proj, &cfg.scoring)?),
            Some(record_square_matrix(&mut tape, &text_proj, &text_proj, &cfg.scoring)?),
        )
    } else {
        (None, None)
    };

    let recorded =
        autograd::record_total_loss(&mut tape, s_at, s_ta, s_aa, s_tt, labels, &cfg.loss, cfg.flags)?;
    let breakdown = recorded.breakdown(&tape)?;
    let grads = tape.backward(recorded.total)?;

    let grad_mats = [
        grads.wrt(audio_vars.w1),
        grads.wrt(audio_vars.b1),
        grads.wrt(audio_vars.w2),
        grads.wrt(audio_vars.b2),
        grads.wrt(text_vars.w1),
        grads.wrt(text_vars.b1),
        grads.wrt(text_vars.w2),
        grads.wrt(text_vars.b2),
    ];
    let loss_nonzero = breakdown.total != 0.0;
    let dead_audio = loss_nonzero && grad_mats[..4].iter().all(|g| g.data().iter().all(|&v| v == 0.0));
    let dead_text = loss_nonzero && grad_mats[4..].iter().all(|g| g.data().iter().all(|&v| v == 0.0));

    let mut params: Vec<&mut Mat> = vec![
        &mut audio_head.w1,
        &mut audio_head.b1,
        &mut audio_head.w2,
        &mut audio_head.b2,
        &mut text_head.w1,
        &mut text_head.b1,
        &mut text_head.w2,
        &mut text_head.b2,
    ];
    optimizer.step(&mut params, &grad_mats, &PARAM_NAMES)?;

    Ok(BatchStep { breakdown, dead_audio, dead_text })
}

/// Trains both heads on the dataset, minimizing the enabled loss terms.
///
/// Deterministic given the config: head init, epoch shuffles, and caption
/// sampling all derive from `cfg.seed`. Batches are full-size only; the
/// ragged tail of each epoch is dropped. The per-epoch validation metric
/// is text-query R@1 on `valid`, falling back to the training split when
/// no held-out split is given.
pub fn train(
    dataset: &RetrievalDataset,
    valid: Option<&RetrievalDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = dataset.n_pairs();
    if n < cfg.batch_size {
        return Err(Error::Config(format!(
            "cannot assemble a batch of {} from {} items",
            cfg.batch_size, n
        )));
    }
    let d_in_audio = dataset
        .audio
        .dim()
        .ok_or_else(|| Error::Config("train: empty audio pack".into()))?;
    let d_in_text = dataset
        .text
        .dim()
        .ok_or_else(|| Error::Config("train: empty text pack".into()))?;

    let (mut audio_head, mut text_head) =
        init_heads(d_in_audio, d_in_text, cfg.d_hidden, cfg.d_shared, cfg.seed)?;
    audio_head.final_relu = cfg.final_relu;
    text_head.final_relu = cfg.final_relu;

    let shapes: Vec<(usize, usize)> = audio_head
        .named_params()
        .iter()
        .chain(text_head.named_params().iter())
        .map(|(_, m)| m.shape())
        .collect();
    let mut optimizer = Adam::new(cfg.lr, &shapes);

    // Distinct stream from head init so adding epochs never perturbs init.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let labels = MatchLabels::diagonal(cfg.batch_size);
    let val_set = valid.unwrap_or(dataset);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // One caption per item per epoch, sampled in item order.
        let caption_slot: Vec<usize> = (0..n)
            .map(|i| {
                let count = dataset.pair(i).caption_ids.len();
                if count > 1 {
                    rng.gen_range(0..count)
                } else {
                    0
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = LossBreakdown {
            inter_c: 0.0,
            jnt: cfg.flags.jnt.then_some(0.0),
            intra_c: cfg.flags.intra_c.then_some(0.0),
            total: 0.0,
        };
        let mut batches = 0usize;
        let mut dead_audio = false;
        let mut dead_text = false;

        for chunk in order.chunks_exact(cfg.batch_size) {
            let audio_feats: Vec<&FeatureMatrix> =
                chunk.iter().map(|&i| dataset.audio_feature(i)).collect();
            let text_feats: Vec<&FeatureMatrix> = chunk
                .iter()
                .map(|&i| dataset.caption_feature(i, caption_slot[i]))
                .collect();
            let step = train_batch(
                &mut audio_head,
                &mut text_head,
                &mut optimizer,
                &audio_feats,
                &text_feats,
                cfg,
                &labels,
            )?;
            sums.inter_c += step.breakdown.inter_c;
            sums.total += step.breakdown.total;
            if let (Some(acc), Some(v)) = (sums.jnt.as_mut(), step.breakdown.jnt) {
                *acc += v;
            }
            if let (Some(acc), Some(v)) = (sums.intra_c.as_mut(), step.breakdown.intra_c) {
                *acc += v;
            }
            dead_audio |= step.dead_audio;
            dead_text |= step.dead_text;
            batches += 1;
        }

        let scale = 1.0 / batches.max(1) as f64;
        let (t2a, _) = eval::evaluate(
            val_set,
            Some((&audio_head, &text_head)),
            &cfg.scoring,
            AggregationMode::Lgmm,
            DirectionMode::Directional,
        )?;
        metrics.push(EpochMetrics {
            epoch,
            inter_c: sums.inter_c * scale,
            jnt: sums.jnt.map(|v| v * scale),
            intra_c: sums.intra_c.map(|v| v * scale),
            total: sums.total * scale,
            val_t2a_r1: t2a.r1,
            dead_audio_grad: dead_audio,
            dead_text_grad: dead_text,
        });
    }

    Ok(TrainOutput { audio_head, text_head, metrics })
}
