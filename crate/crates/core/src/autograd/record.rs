//! Recorded counterparts of the scoring kernel, projection heads, and loss
//! terms. Each function applies the same numeric routines as the plain
//! implementation, in the same order, so the recorded value equals the
//! unrecorded one bit-for-bit.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::ScoringConfig;
use crate::losses::{LossConfig, LossFlags, MatchLabels};
use crate::numeric;

/// Tape handles for one projection head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub final_relu: bool,
}

/// Two rectified linear layers mapping raw features into the shared space.
pub fn record_project(tape: &mut Tape, raw: Var, head: &HeadVars) -> Result<Var> {
    let z1 = tape.matmul(raw, head.w1)?;
    let z1b = tape.add_row(z1, head.b1)?;
    let h = tape.relu(z1b);
    let z2 = tape.matmul(h, head.w2)?;
    let out = tape.add_row(z2, head.b2)?;
    Ok(if head.final_relu { tape.relu(out) } else { out })
}

/// Full scoring pipeline from a (query, context) pair of feature-matrix
/// nodes to the pooled global similarity scalar.
pub fn record_lgmm_score(tape: &mut Tape, query: Var, context: Var, cfg: &ScoringConfig) -> Result<Var> {
    cfg.validate()?;
    let sims = tape.matmul_nt(query, context)?;
    let normalized = tape.col_l2_norm(sims, cfg.epsilon);
    let weights = tape.row_softmax(normalized, cfg.tau_w)?;
    let aware = tape.matmul(weights, context)?;
    let scores = tape.rows_cosine(query, aware, cfg.epsilon)?;
    tape.lse(scores, cfg.lambda)
}

/// Bidirectional contrastive term from the cross-modal score matrix node.
pub fn record_inter_modal(tape: &mut Tape, s_at: Var, tau: f64) -> Result<Var> {
    let b = tape.value(s_at).rows();
    let ls = tape.row_log_softmax(s_at, tau)?;
    let d1 = tape.diag(ls)?;
    let s1 = tape.sum_all(d1);
    let st = tape.transpose(s_at);
    let ls2 = tape.row_log_softmax(st, tau)?;
    let d2 = tape.diag(ls2)?;
    let s2 = tape.sum_all(d2);
    let tot = tape.add(s1, s2)?;
    tape.affine(tot, -1.0 / b as f64, None)
}

/// Contrastive term with the text-anchored half taken from the text-query
/// score matrix.
pub fn record_inter_modal_dual(tape: &mut Tape, s_at: Var, s_ta: Var, tau: f64) -> Result<Var> {
    let b = tape.value(s_at).rows();
    let ls = tape.row_log_softmax(s_at, tau)?;
    let d1 = tape.diag(ls)?;
    let s1 = tape.sum_all(d1);
    let ls2 = tape.row_log_softmax(s_ta, tau)?;
    let d2 = tape.diag(ls2)?;
    let s2 = tape.sum_all(d2);
    let tot = tape.add(s1, s2)?;
    tape.affine(tot, -1.0 / b as f64, None)
}

/// One KL term: the soft-labelled `target_source` rows (gradient-stopped)
/// against the `prediction` rows. Returns the mean row KL.
pub fn record_soft_kl_term(
    tape: &mut Tape,
    target_source: Var,
    prediction: Var,
    labels: &MatchLabels,
    beta: f64,
    tau_kl: f64,
) -> Result<Var> {
    let b = tape.value(prediction).rows();
    let sg = tape.stop_grad(target_source);
    let shift = numeric::affine(labels.values(), 1.0 - beta, None);
    let soft = tape.affine(sg, beta, Some(shift))?;
    let lt = tape.row_log_softmax(soft, tau_kl)?;
    let t = tape.exp(lt);
    let lp = tape.row_log_softmax(prediction, tau_kl)?;
    let diff = tape.sub(lt, lp)?;
    let prod = tape.mul(t, diff)?;
    let s = tape.sum_all(prod);
    tape.affine(s, 1.0 / b as f64, None)
}

/// Soft-supervision KL loss; targets are constants for the backward pass.
pub fn record_joint_soft(
    tape: &mut Tape,
    s_aa: Var,
    s_tt: Var,
    s_at: Var,
    s_ta: Var,
    labels: &MatchLabels,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let term_a = record_soft_kl_term(tape, s_aa, s_at, labels, cfg.beta, cfg.tau_kl)?;
    let term_t = record_soft_kl_term(tape, s_tt, s_ta, labels, cfg.beta, cfg.tau_kl)?;
    let sum = tape.add(term_a, term_t)?;
    tape.affine(sum, 0.5, None)
}

/// Intra-modal contrastive term (diagonal excluded from the denominators).
pub fn record_intra_modal(tape: &mut Tape, s_at: Var, s_aa: Var, s_tt: Var, tau: f64) -> Result<Var> {
    let b = tape.value(s_at).rows();
    if b < 2 {
        return Err(Error::Contract(
            "record_intra_modal: batch must have at least 2 items".into(),
        ));
    }
    let d = tape.diag(s_at)?;
    let dt = tape.affine(d, 1.0 / tau, None)?;

    let ra = tape.row_lse_offdiag(s_aa, tau)?;
    let t1 = tape.sub(dt, ra)?;
    let s1 = tape.sum_all(t1);

    let ttr = tape.transpose(s_tt);
    let ct = tape.row_lse_offdiag(ttr, tau)?;
    let t2 = tape.sub(dt, ct)?;
    let s2 = tape.sum_all(t2);

    let tot = tape.add(s1, s2)?;
    tape.affine(tot, -1.0 / b as f64, None)
}

/// Handles to the recorded loss terms.
#[derive(Clone, Copy, Debug)]
pub struct RecordedLoss {
    pub total: Var,
    pub inter_c: Var,
    pub jnt: Option<Var>,
    pub intra_c: Option<Var>,
}

impl RecordedLoss {
    pub fn breakdown(&self, tape: &Tape) -> Result<crate::losses::LossBreakdown> {
        Ok(crate::losses::LossBreakdown {
            inter_c: tape.scalar(self.inter_c)?,
            jnt: self.jnt.map(|v| tape.scalar(v)).transpose()?,
            intra_c: self.intra_c.map(|v| tape.scalar(v)).transpose()?,
            total: tape.scalar(self.total)?,
        })
    }
}

/// Records the enabled loss terms and their sum. Matrices not needed by
/// the enabled terms may be `None`.
pub fn record_total_loss(
    tape: &mut Tape,
    s_at: Var,
    s_ta: Option<Var>,
    s_aa: Option<Var>,
    s_tt: Option<Var>,
    labels: &MatchLabels,
    cfg: &LossConfig,
    flags: LossFlags,
) -> Result<RecordedLoss> {
    cfg.validate()?;
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::Contract(format!("record_total_loss: {what} matrix required")))
    };

    let inter_c = if cfg.text_query_second_term {
        let ta = need(s_ta, "text-query")?;
        record_inter_modal_dual(tape, s_at, ta, cfg.tau)?
    } else {
        record_inter_modal(tape, s_at, cfg.tau)?
    };

    let jnt = if flags.jnt {
        let aa = need(s_aa, "audio-audio")?;
        let tt = need(s_tt, "text-text")?;
        let ta = need(s_ta, "text-query")?;
        Some(record_joint_soft(tape, aa, tt, s_at, ta, labels, cfg)?)
    } else {
        None
    };

    let intra_c = if flags.intra_c {
        let aa = need(s_aa, "audio-audio")?;
        let tt = need(s_tt, "text-text")?;
        Some(record_intra_modal(tape, s_at, aa, tt, cfg.tau)?)
    } else {
        None
    };

    let mut total = inter_c;
    if let Some(v) = jnt {
        total = tape.add(total, v)?;
    }
    if let Some(v) = intra_c {
        total = tape.add(total, v)?;
    }
    Ok(RecordedLoss { total, inter_c, jnt, intra_c })
}
