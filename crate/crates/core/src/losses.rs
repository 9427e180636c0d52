//! Training objectives over batch score matrices.
//!
//! Three terms: a bidirectional temperature-scaled contrastive loss on the
//! cross-modal scores, a soft-label KL term that pulls cross-modal score
//! distributions toward intra-modal ones, and an intra-modal contrastive
//! term that pushes same-modality negatives apart. The KL targets are
//! treated as constants during optimization (no gradient flows into them);
//! see the autograd module for the recorded counterparts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Modality, ScoreMatrix};
use crate::matrix::Mat;
use crate::numeric;

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Soft-label mixing weight: 0 keeps the binary labels, 1 keeps the
    /// intra-modal scores.
    pub beta: f64,
    /// Temperature used when converting score rows to distributions for
    /// the KL term.
    pub tau_kl: f64,
    /// When true, the text-anchored half of the contrastive term reads the
    /// text-query score matrix instead of columns of the audio-query one.
    pub text_query_second_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            beta: 0.3,
            tau_kl: 0.07,
            text_query_second_term: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.tau_kl > 0.0 && self.tau_kl.is_finite()) {
            return Err(Error::Config(format!("tau_kl must be > 0, got {}", self.tau_kl)));
        }
        if !(self.beta >= 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Which optional loss terms participate in the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub jnt: bool,
    pub intra_c: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { jnt: true, intra_c: true }
    }
}

impl LossFlags {
    pub const FULL: LossFlags = LossFlags { jnt: true, intra_c: true };
    pub const NO_JNT: LossFlags = LossFlags { jnt: false, intra_c: true };
    pub const NO_INTRA: LossFlags = LossFlags { jnt: true, intra_c: false };
    pub const INTER_ONLY: LossFlags = LossFlags { jnt: false, intra_c: false };

    /// The four ablation rows, strongest configuration first.
    pub const ABLATION_GRID: [(&'static str, LossFlags); 4] = [
        ("full", LossFlags::FULL),
        ("no-jnt", LossFlags::NO_JNT),
        ("no-intrac", LossFlags::NO_INTRA),
        ("inter-only", LossFlags::INTER_ONLY),
    ];
}

/// Binary match labels: entry (m, n) is 1 when query item m and context
/// item n are a positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchLabels(Mat);

impl MatchLabels {
    /// Standard batch construction: item m matches context m only.
    pub fn diagonal(size: usize) -> Self {
        MatchLabels(Mat::identity(size))
    }

    /// Custom labels; every entry must be 0 or 1 with exactly one positive
    /// per row and per column.
    pub fn new(values: Mat) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::shape(
                "MatchLabels::new",
                "square matrix",
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        let n = values.rows();
        let mut col_counts = vec![0usize; n];
        for i in 0..n {
            let mut row_count = 0;
            for j in 0..n {
                let v = values.get(i, j);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Contract(format!(
                        "labels must be binary, got {v} at ({i}, {j})"
                    )));
                }
                if v == 1.0 {
                    row_count += 1;
                    col_counts[j] += 1;
                }
            }
            if row_count != 1 {
                return Err(Error::Contract(format!("row {i} has {row_count} positives")));
            }
        }
        if let Some(j) = col_counts.iter().position(|&c| c != 1) {
            return Err(Error::Contract(format!("column {j} has {} positives", col_counts[j])));
        }
        Ok(MatchLabels(values))
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn values(&self) -> &Mat {
        &self.0
    }
}

fn check_same_size(op: &'static str, mats: &[&ScoreMatrix]) -> Result<usize> {
    let b = mats[0].size();
    for m in mats {
        if m.size() != b {
            return Err(Error::shape(op, format!("{b}x{b}"), format!("{}x{}", m.size(), m.size())));
        }
    }
    Ok(b)
}

fn expect_direction(op: &'static str, s: &ScoreMatrix, query: Modality, context: Modality) -> Result<()> {
    if s.query_modality() != query || s.context_modality() != context {
        return Err(Error::Contract(format!(
            "{op}: expected a {query}-query/{context}-context score matrix, got {}-query/{}-context",
            s.query_modality(),
            s.context_modality()
        )));
    }
    Ok(())
}

/// Bidirectional temperature-scaled contrastive loss on the cross-modal
/// score matrix: mean negative log-probability of the matched column per
/// row plus the matched row per column.
pub fn inter_modal_contrastive(s_at: &ScoreMatrix, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let b = s_at.size();
    let values = s_at.values();

    let ls = numeric::row_log_softmax(values, cfg.tau);
    let d1 = numeric::diag(&ls);
    let s1 = numeric::sum_all(&d1);

    let st = values.transpose();
    let ls2 = numeric::row_log_softmax(&st, cfg.tau);
    let d2 = numeric::diag(&ls2);
    let s2 = numeric::sum_all(&d2);

    Ok((s1 + s2) * (-1.0 / b as f64))
}

/// Variant with the text-anchored half computed from the text-query score
/// matrix (rows of `s_ta`) instead of columns of `s_at`.
pub fn inter_modal_contrastive_dual(
    s_at: &ScoreMatrix,
    s_ta: &ScoreMatrix,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let b = check_same_size("inter_modal_contrastive_dual", &[s_at, s_ta])?;

    let ls = numeric::row_log_softmax(s_at.values(), cfg.tau);
    let d1 = numeric::diag(&ls);
    let s1 = numeric::sum_all(&d1);

    let ls2 = numeric::row_log_softmax(s_ta.values(), cfg.tau);
    let d2 = numeric::diag(&ls2);
    let s2 = numeric::sum_all(&d2);

    Ok((s1 + s2) * (-1.0 / b as f64))
}

/// Blends intra-modal scores with binary labels:
/// `beta * s_intra + (1 - beta) * labels`, elementwise.
pub fn soft_labels(s_intra: &ScoreMatrix, labels: &MatchLabels, cfg: &LossConfig) -> Result<Mat> {
    cfg.validate()?;
    if s_intra.size() != labels.size() {
        return Err(Error::shape(
            "soft_labels",
            format!("{0}x{0}", s_intra.size()),
            format!("{0}x{0}", labels.size()),
        ));
    }
    let shift = numeric::affine(labels.values(), 1.0 - cfg.beta, None);
    Ok(numeric::affine(s_intra.values(), cfg.beta, Some(&shift)))
}

// One KL term: rows of the soft-label target distribution against rows of
// the cross-modal prediction distribution, averaged over rows.
fn kl_term(target_soft: &Mat, prediction: &Mat, tau_kl: f64, b: usize) -> f64 {
    let lt = numeric::row_log_softmax(target_soft, tau_kl);
    let t = numeric::exp_elem(&lt);
    let lp = numeric::row_log_softmax(prediction, tau_kl);
    let diff = numeric::sub_elem(&lt, &lp);
    let prod = numeric::mul_elem(&t, &diff);
    numeric::sum_all(&prod) * (1.0 / b as f64)
}

/// Soft-supervision KL loss: soft-labelled intra-modal rows are converted
/// to distributions and the cross-modal rows are pulled toward them.
/// Returns the mean of the audio-side and text-side terms.
pub fn joint_soft_supervision(
    s_aa: &ScoreMatrix,
    s_tt: &ScoreMatrix,
    s_at: &ScoreMatrix,
    s_ta: &ScoreMatrix,
    labels: &MatchLabels,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let b = check_same_size("joint_soft_supervision", &[s_aa, s_tt, s_at, s_ta])?;
    if labels.size() != b {
        return Err(Error::shape(
            "joint_soft_supervision",
            format!("{b}x{b} labels"),
            format!("{0}x{0} labels", labels.size()),
        ));
    }
    expect_direction("joint_soft_supervision", s_aa, Modality::Audio, Modality::Audio)?;
    expect_direction("joint_soft_supervision", s_tt, Modality::Text, Modality::Text)?;
    expect_direction("joint_soft_supervision", s_at, Modality::Audio, Modality::Text)?;
    expect_direction("joint_soft_supervision", s_ta, Modality::Text, Modality::Audio)?;

    let soft_aa = soft_labels(s_aa, labels, cfg)?;
    let term_a = kl_term(&soft_aa, s_at.values(), cfg.tau_kl, b);
    let soft_tt = soft_labels(s_tt, labels, cfg)?;
    let term_t = kl_term(&soft_tt, s_ta.values(), cfg.tau_kl, b);
    Ok((term_a + term_t) * 0.5)
}

/// Intra-modal contrastive loss: the cross-modal positive is scored
/// against same-modality negatives (diagonal excluded from the
/// denominator). Written exactly this way, the positive does not appear in
/// the denominator, so the value can be negative.
pub fn intra_modal_contrastive(
    s_at: &ScoreMatrix,
    s_aa: &ScoreMatrix,
    s_tt: &ScoreMatrix,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let b = check_same_size("intra_modal_contrastive", &[s_at, s_aa, s_tt])?;
    if b < 2 {
        return Err(Error::Contract(
            "intra_modal_contrastive: batch must have at least 2 items".into(),
        ));
    }
    expect_direction("intra_modal_contrastive", s_at, Modality::Audio, Modality::Text)?;
    expect_direction("intra_modal_contrastive", s_aa, Modality::Audio, Modality::Audio)?;
    expect_direction("intra_modal_contrastive", s_tt, Modality::Text, Modality::Text)?;

    let d = numeric::diag(s_at.values());
    let dt = numeric::affine(&d, 1.0 / cfg.tau, None);

    let ra = numeric::row_lse_offdiag(s_aa.values(), cfg.tau);
    let t1 = numeric::sub_elem(&dt, &ra);
    let s1 = numeric::sum_all(&t1);

    let ttr = s_tt.values().transpose();
    let ct = numeric::row_lse_offdiag(&ttr, cfg.tau);
    let t2 = numeric::sub_elem(&dt, &ct);
    let s2 = numeric::sum_all(&t2);

    Ok((s1 + s2) * (-1.0 / b as f64))
}

/// Per-term breakdown of the total loss. Disabled terms are `None`;
/// `total` is the sum of the enabled terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inter_c: f64,
    pub jnt: Option<f64>,
    pub intra_c: Option<f64>,
    pub total: f64,
}

/// Computes the enabled loss terms and their sum.
pub fn total_loss(
    s_at: &ScoreMatrix,
    s_ta: &ScoreMatrix,
    s_aa: &ScoreMatrix,
    s_tt: &ScoreMatrix,
    labels: &MatchLabels,
    cfg: &LossConfig,
    flags: LossFlags,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let b = check_same_size("total_loss", &[s_at, s_ta, s_aa, s_tt])?;
    if flags.intra_c && b < 2 {
        return Err(Error::Config(
            "total_loss: intra-modal contrastive term requires batch size >= 2".into(),
        ));
    }

    let inter_c = if cfg.text_query_second_term {
        inter_modal_contrastive_dual(s_at, s_ta, cfg)?
    } else {
        inter_modal_contrastive(s_at, cfg)?
    };
    let jnt = if flags.jnt {
        Some(joint_soft_supervision(s_aa, s_tt, s_at, s_ta, labels, cfg)?)
    } else {
        None
    };
    let intra_c = if flags.intra_c {
        Some(intra_modal_contrastive(s_at, s_aa, s_tt, cfg)?)
    } else {
        None
    };

    // Sum only enabled terms so a disabled configuration reproduces the
    // bare term bit-for-bit.
    let mut total = inter_c;
    if let Some(v) = jnt {
        total += v;
    }
    if let Some(v) = intra_c {
        total += v;
    }
    Ok(LossBreakdown { inter_c, jnt, intra_c, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(values: Mat, q: Modality, c: Modality) -> ScoreMatrix {
        ScoreMatrix::new(values, q, c).unwrap()
    }

    fn at(values: Mat) -> ScoreMatrix {
        sm(values, Modality::Audio, Modality::Text)
    }

    fn cfg_tau(tau: f64) -> LossConfig {
        LossConfig { tau, tau_kl: tau, ..LossConfig::default() }
    }

    #[test]
    fn inter_modal_constant_matrix_is_two_log_b() {
        for b in [2usize, 3, 8] {
            let s = at(Mat::from_rows(&vec![vec![0.37; b]; b]));
            let l = inter_modal_contrastive(&s, &cfg_tau(0.07)).unwrap();
            assert!((l - 2.0 * (b as f64).ln()).abs() < 1e-9, "b = {b}");
        }
    }

    #[test]
    fn inter_modal_identity_hand_value() {
        let s = at(Mat::identity(2));
        let l = inter_modal_contrastive(&s, &cfg_tau(1.0)).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-9);
        assert!((l - 0.62652).abs() < 1e-5);
    }

    #[test]
    fn inter_modal_single_item_is_zero() {
        let s = at(Mat::from_rows(&[vec![3.2]]));
        let l = inter_modal_contrastive(&s, &cfg_tau(0.07)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn inter_modal_shift_invariance() {
        let vals = Mat::from_rows(&[vec![0.3, -0.1, 0.9], vec![0.2, 0.8, -0.5], vec![0.0, 0.4, 0.6]]);
        let cfg = cfg_tau(0.07);
        let l0 = inter_modal_contrastive(&at(vals.clone()), &cfg).unwrap();
        let l1 = inter_modal_contrastive(&at(vals.map(|v| v + 17.5)), &cfg).unwrap();
        assert!((l0 - l1).abs() < 1e-8);
    }

    #[test]
    fn soft_labels_endpoints_and_affinity() {
        let s = sm(
            Mat::from_rows(&[vec![0.5, 0.25], vec![0.1, 0.5]]),
            Modality::Audio,
            Modality::Audio,
        );
        let y = MatchLabels::diagonal(2);

        let zero = soft_labels(&s, &y, &LossConfig { beta: 0.0, ..Default::default() }).unwrap();
        assert_eq!(&zero, y.values());

        let one = soft_labels(&s, &y, &LossConfig { beta: 1.0, ..Default::default() }).unwrap();
        assert_eq!(&one, s.values());

        // 0.3 * 0.5 + 0.7 * 1 on the diagonal.
        let mixed = soft_labels(&s, &y, &LossConfig { beta: 0.3, ..Default::default() }).unwrap();
        assert!((mixed.get(0, 0) - 0.85).abs() < 1e-12);

        // Affine in beta.
        let b = 0.62;
        let blend = soft_labels(&s, &y, &LossConfig { beta: b, ..Default::default() }).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = b * one.get(i, j) + (1.0 - b) * zero.get(i, j);
                assert!((blend.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn joint_is_zero_on_matched_distributions() {
        let vals = Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.7]]);
        let cfg = LossConfig { beta: 1.0, ..Default::default() };
        let labels = MatchLabels::diagonal(2);
        // With beta = 1 the targets equal the intra matrices; make those
        // equal to the predictions so every row distribution coincides.
        let l = joint_soft_supervision(
            &sm(vals.clone(), Modality::Audio, Modality::Audio),
            &sm(vals.clone(), Modality::Text, Modality::Text),
            &sm(vals.clone(), Modality::Audio, Modality::Text),
            &sm(vals.clone(), Modality::Text, Modality::Audio),
            &labels,
            &cfg,
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn joint_single_item_is_zero() {
        let one = |q, c| sm(Mat::from_rows(&[vec![0.4]]), q, c);
        let l = joint_soft_supervision(
            &one(Modality::Audio, Modality::Audio),
            &one(Modality::Text, Modality::Text),
            &one(Modality::Audio, Modality::Text),
            &one(Modality::Text, Modality::Audio),
            &MatchLabels::diagonal(1),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn joint_is_nonnegative_and_positive_when_mismatched() {
        let aa = Mat::from_rows(&[vec![1.0, 0.3], vec![0.3, 1.0]]);
        let cross = Mat::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.0]]);
        let l = joint_soft_supervision(
            &sm(aa.clone(), Modality::Audio, Modality::Audio),
            &sm(aa, Modality::Text, Modality::Text),
            &sm(cross.clone(), Modality::Audio, Modality::Text),
            &sm(cross, Modality::Text, Modality::Audio),
            &MatchLabels::diagonal(2),
            &LossConfig { beta: 0.3, tau_kl: 0.07, ..Default::default() },
        )
        .unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn intra_modal_zero_matrices() {
        let z2 = || Mat::zeros(2, 2);
        let l = intra_modal_contrastive(
            &at(z2()),
            &sm(z2(), Modality::Audio, Modality::Audio),
            &sm(z2(), Modality::Text, Modality::Text),
            &cfg_tau(1.0),
        )
        .unwrap();
        assert_eq!(l, 0.0);

        let z3 = || Mat::zeros(3, 3);
        let l = intra_modal_contrastive(
            &at(z3()),
            &sm(z3(), Modality::Audio, Modality::Audio),
            &sm(z3(), Modality::Text, Modality::Text),
            &cfg_tau(1.0),
        )
        .unwrap();
        assert!((l - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn intra_modal_can_be_negative() {
        let l = intra_modal_contrastive(
            &at(Mat::identity(2)),
            &sm(Mat::zeros(2, 2), Modality::Audio, Modality::Audio),
            &sm(Mat::zeros(2, 2), Modality::Text, Modality::Text),
            &cfg_tau(1.0),
        )
        .unwrap();
        assert!((l - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn intra_modal_rejects_singleton_batch() {
        let one = |q, c| sm(Mat::from_rows(&[vec![0.0]]), q, c);
        assert!(matches!(
            intra_modal_contrastive(
                &one(Modality::Audio, Modality::Text),
                &one(Modality::Audio, Modality::Audio),
                &one(Modality::Text, Modality::Text),
                &cfg_tau(1.0),
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_ablation_identity() {
        let vals = Mat::from_rows(&[vec![0.9, -0.2], vec![0.1, 0.6]]);
        let aa = Mat::from_rows(&[vec![1.0, 0.4], vec![0.4, 1.0]]);
        let s_at = at(vals.clone());
        let s_ta = sm(vals.transpose(), Modality::Text, Modality::Audio);
        let s_aa = sm(aa.clone(), Modality::Audio, Modality::Audio);
        let s_tt = sm(aa, Modality::Text, Modality::Text);
        let labels = MatchLabels::diagonal(2);
        let cfg = LossConfig::default();

        let bare = inter_modal_contrastive(&s_at, &cfg).unwrap();
        let bd = total_loss(&s_at, &s_ta, &s_aa, &s_tt, &labels, &cfg, LossFlags::INTER_ONLY).unwrap();
        assert_eq!(bd.total.to_bits(), bare.to_bits());
        assert!(bd.jnt.is_none() && bd.intra_c.is_none());

        let full = total_loss(&s_at, &s_ta, &s_aa, &s_tt, &labels, &cfg, LossFlags::FULL).unwrap();
        let expected = full.inter_c + full.jnt.unwrap() + full.intra_c.unwrap();
        assert_eq!(full.total, expected);
    }

    #[test]
    fn total_loss_singleton_batch_needs_intra_disabled() {
        let one = |q, c| sm(Mat::from_rows(&[vec![0.4]]), q, c);
        let s_at = one(Modality::Audio, Modality::Text);
        let s_ta = one(Modality::Text, Modality::Audio);
        let s_aa = one(Modality::Audio, Modality::Audio);
        let s_tt = one(Modality::Text, Modality::Text);
        let labels = MatchLabels::diagonal(1);
        let cfg = LossConfig::default();

        assert!(matches!(
            total_loss(&s_at, &s_ta, &s_aa, &s_tt, &labels, &cfg, LossFlags::FULL),
            Err(Error::Config(_))
        ));
        let bd = total_loss(&s_at, &s_ta, &s_aa, &s_tt, &labels, &cfg, LossFlags::INTER_ONLY).unwrap();
        assert_eq!(bd.inter_c, 0.0);
        assert_eq!(bd.total, 0.0);
    }

    #[test]
    fn losses_are_deterministic() {
        let vals = Mat::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.2]]);
        let aa = Mat::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let s_at = at(vals.clone());
        let s_ta = sm(vals.transpose(), Modality::Text, Modality::Audio);
        let s_aa = sm(aa.clone(), Modality::Audio, Modality::Audio);
        let s_tt = sm(aa, Modality::Text, Modality::Text);
        let labels = MatchLabels::diagonal(2);
        let cfg = LossConfig::default();
        let a = total_loss(&s_at, &s_ta, &s_aa, &s_tt, &labels, &cfg, LossFlags::FULL).unwrap();
        let b = total_loss(&s_at, &s_ta, &s_aa, &s_tt, &labels, &cfg, LossFlags::FULL).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.inter_c.to_bits(), b.inter_c.to_bits());
    }

    #[test]
    fn match_labels_validation() {
        assert!(MatchLabels::new(Mat::identity(3)).is_ok());
        assert!(MatchLabels::new(Mat::zeros(2, 2)).is_err());
        let mut two = Mat::identity(2);
        two.set(0, 1, 1.0);
        assert!(MatchLabels::new(two).is_err());
        assert!(MatchLabels::new(Mat::from_rows(&[vec![0.5]])).is_err());
    }
}
