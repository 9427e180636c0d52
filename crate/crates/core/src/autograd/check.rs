//! Finite-difference validation of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::record::{
    record_inter_modal, record_intra_modal, record_joint_soft, record_lgmm_score, record_project,
    HeadVars,
};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{lgmm_score, ScoringConfig};
use crate::losses::{LossConfig, MatchLabels};
use crate::matrix::{FeatureMatrix, Mat};
use crate::model::{init_heads, project};

/// Worst-coordinate comparison for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
    /// denominator.
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Outcome of a finite-difference sweep over one scalar function.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub step: f64,
    pub threshold: f64,
    /// False when the function returned different values on two identical
    /// evaluations; such a check is invalid and never passes.
    pub deterministic: bool,
    pub checks: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradientReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

const REL_ERR_FLOOR: f64 = 1e-8;

/// Compares the tape's reverse-mode gradient of `build` against central
/// finite differences `(f(p+h) - f(p-h)) / 2h`, coordinate by coordinate,
/// for every named parameter tensor.
///
/// `build` must assemble a scalar-valued expression from the given leaf
/// variables (one per parameter, in order) and must be deterministic; the
/// function is re-evaluated from scratch for every probe.
pub fn finite_diff_check<F>(
    build: F,
    params: &[(&str, Mat)],
    step: f64,
    threshold: f64,
) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite_diff_check: step must be > 0, got {step}")));
    }
    if params.is_empty() {
        return Err(Error::Contract("finite_diff_check: no parameters".into()));
    }

    let eval = |mats: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.scalar(out)
    };

    let base: Vec<Mat> = params.iter().map(|(_, m)| m.clone()).collect();
    let v0 = eval(&base)?;
    let v1 = eval(&base)?;
    let deterministic = v0.to_bits() == v1.to_bits();

    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, mat)) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi]);
        let mut worst = ParamCheck {
            name: (*name).to_string(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic_at_worst: analytic.data().first().copied().unwrap_or(0.0),
            numeric_at_worst: 0.0,
        };
        for coord in 0..mat.data().len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[coord] += step;
            let mut minus = base.clone();
            minus[pi].data_mut()[coord] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel >= worst.max_rel_err {
                worst = ParamCheck {
                    name: (*name).to_string(),
                    max_rel_err: rel,
                    worst_coord: coord,
                    analytic_at_worst: a,
                    numeric_at_worst: numeric,
                };
            }
        }
        checks.push(worst);
    }

    let passed = deterministic && checks.iter().all(|c| c.max_rel_err <= threshold);
    Ok(GradientReport { step, threshold, deterministic, checks, passed })
}

const SUITE_STEP: f64 = 1e-5;
const SUITE_THRESHOLD: f64 = 1e-4;

fn rand_features(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureMatrix {
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMatrix::new(Mat::new(rows, dim, data)).expect("finite random features")
}

// The guarded row cosine has slope ~1/epsilon at a zero row, which central
// differences cannot probe; resample until every projected row keeps a
// healthy norm so checks run away from that cliff.
fn projected_features(
    rng: &mut ChaCha8Rng,
    head: &crate::model::ProjectionHead,
    rows: usize,
    dim: usize,
) -> Result<FeatureMatrix> {
    const MIN_ROW_NORM: f64 = 0.05;
    for _ in 0..1000 {
        let feats = project(&rand_features(rng, rows, dim), head)?;
        let ok = (0..feats.rows()).all(|i| {
            feats.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() >= MIN_ROW_NORM
        });
        if ok {
            return Ok(feats);
        }
    }
    Err(Error::Contract(
        "gradient_check_suite: could not sample features with non-degenerate rows".into(),
    ))
}

/// The standard finite-difference sweep: the scoring pipeline, each loss
/// term, their sum, and a projection weight through the full pipeline.
///
/// Batches are built the way training builds them — random raw features
/// projected through seeded rectified heads, scored by the kernel — and
/// the KL targets are frozen at the base point per their stop-gradient
/// semantics. Deterministic per seed.
pub fn gradient_check_suite(
    seed: u64,
    scoring: &ScoringConfig,
    loss: &LossConfig,
) -> Result<Vec<(String, GradientReport)>> {
    scoring.validate()?;
    loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 4;
    let labels = MatchLabels::diagonal(b);
    let (audio_head, text_head) = init_heads(4, 4, 8, 6, seed ^ 0xA5A5_5A5A)?;

    let audio: Vec<FeatureMatrix> = (0..b)
        .map(|_| projected_features(&mut rng, &audio_head, 3, 4))
        .collect::<Result<_>>()?;
    let text: Vec<FeatureMatrix> = (0..b)
        .map(|_| projected_features(&mut rng, &text_head, 2, 4))
        .collect::<Result<_>>()?;
    let batch = |qs: &[FeatureMatrix], cs: &[FeatureMatrix]| -> Result<Mat> {
        let mut m = Mat::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                m.set(i, j, lgmm_score(&qs[i], &cs[j], scoring)?);
            }
        }
        Ok(m)
    };
    let params = vec![
        ("s_at", batch(&audio, &text)?),
        ("s_ta", batch(&text, &audio)?),
        ("s_aa", batch(&audio, &audio)?),
        ("s_tt", batch(&text, &text)?),
    ];
    let aa_const = params[2].1.clone();
    let tt_const = params[3].1.clone();

    let mut suite = Vec::new();

    suite.push((
        "lgmm_score".to_string(),
        finite_diff_check(
            |tape, vars| record_lgmm_score(tape, vars[0], vars[1], scoring),
            &[
                ("query", audio[0].as_mat().clone()),
                ("context", text[0].as_mat().clone()),
            ],
            SUITE_STEP,
            SUITE_THRESHOLD,
        )?,
    ));

    suite.push((
        "inter_modal_contrastive".to_string(),
        finite_diff_check(
            |tape, vars| record_inter_modal(tape, vars[0], loss.tau),
            &params,
            SUITE_STEP,
            SUITE_THRESHOLD,
        )?,
    ));

    suite.push((
        "joint_soft_supervision".to_string(),
        finite_diff_check(
            |tape, vars| {
                let aa = tape.leaf(aa_const.clone());
                let tt = tape.leaf(tt_const.clone());
                record_joint_soft(tape, aa, tt, vars[0], vars[1], &labels, loss)
            },
            &params[..2],
            SUITE_STEP,
            SUITE_THRESHOLD,
        )?,
    ));

    suite.push((
        "intra_modal_contrastive".to_string(),
        finite_diff_check(
            |tape, vars| record_intra_modal(tape, vars[0], vars[2], vars[3], loss.tau),
            &params,
            SUITE_STEP,
            SUITE_THRESHOLD,
        )?,
    ));

    suite.push((
        "total_loss".to_string(),
        finite_diff_check(
            |tape, vars| {
                let inter = record_inter_modal(tape, vars[0], loss.tau)?;
                let aa = tape.leaf(aa_const.clone());
                let tt = tape.leaf(tt_const.clone());
                let jnt = record_joint_soft(tape, aa, tt, vars[0], vars[1], &labels, loss)?;
                let intra = record_intra_modal(tape, vars[0], vars[2], vars[3], loss.tau)?;
                let s = tape.add(inter, jnt)?;
                tape.add(s, intra)
            },
            &params,
            SUITE_STEP,
            SUITE_THRESHOLD,
        )?,
    ));

    // Full pipeline: loss as a function of the first-layer audio weights.
    let raw_audio: Vec<Mat> = (0..b).map(|_| rand_features(&mut rng, 3, 4).into_mat()).collect();
    let raw_text: Vec<Mat> = (0..b).map(|_| rand_features(&mut rng, 2, 4).into_mat()).collect();
    let pipeline = |tape: &mut Tape, w1: Var| -> Result<(Var, Var, Var, Var)> {
        let head_a = HeadVars {
            w1,
            b1: tape.leaf(audio_head.b1.clone()),
            w2: tape.leaf(audio_head.w2.clone()),
            b2: tape.leaf(audio_head.b2.clone()),
            final_relu: true,
        };
        let head_t = HeadVars {
            w1: tape.leaf(text_head.w1.clone()),
            b1: tape.leaf(text_head.b1.clone()),
            w2: tape.leaf(text_head.w2.clone()),
            b2: tape.leaf(text_head.b2.clone()),
            final_relu: true,
        };
        let mut a_proj = Vec::with_capacity(b);
        let mut t_proj = Vec::with_capacity(b);
        for f in &raw_audio {
            let leaf = tape.leaf(f.clone());
            a_proj.push(record_project(tape, leaf, &head_a)?);
        }
        for f in &raw_text {
            let leaf = tape.leaf(f.clone());
            t_proj.push(record_project(tape, leaf, &head_t)?);
        }
        let stack = |tape: &mut Tape, qs: &[Var], cs: &[Var]| -> Result<Var> {
            let mut cells = Vec::with_capacity(b * b);
            for &q in qs {
                for &c in cs {
                    cells.push(record_lgmm_score(tape, q, c, scoring)?);
                }
            }
            tape.stack_scalars(&cells, b, b)
        };
        Ok((
            stack(tape, &a_proj, &t_proj)?,
            stack(tape, &t_proj, &a_proj)?,
            stack(tape, &a_proj, &a_proj)?,
            stack(tape, &t_proj, &t_proj)?,
        ))
    };
    let weight_targets = {
        let mut tape = Tape::new();
        let w1 = tape.leaf(audio_head.w1.clone());
        let (_, _, aa, tt) = pipeline(&mut tape, w1)?;
        (tape.value(aa).clone(), tape.value(tt).clone())
    };
    suite.push((
        "projection_weight".to_string(),
        finite_diff_check(
            |tape, vars| {
                let (at, ta, aa, tt) = pipeline(tape, vars[0])?;
                let inter = record_inter_modal(tape, at, loss.tau)?;
                let aa_frozen = tape.leaf(weight_targets.0.clone());
                let tt_frozen = tape.leaf(weight_targets.1.clone());
                let jnt = record_joint_soft(tape, aa_frozen, tt_frozen, at, ta, &labels, loss)?;
                let intra = record_intra_modal(tape, at, aa, tt, loss.tau)?;
                let s = tape.add(inter, jnt)?;
                tape.add(s, intra)
            },
            &[("audio.w1", audio_head.w1.clone())],
            SUITE_STEP,
            SUITE_THRESHOLD,
        )?,
    ));

    Ok(suite)
}
