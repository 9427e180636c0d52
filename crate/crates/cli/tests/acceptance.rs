//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (visible with `--nocapture`). Every tolerance is pinned in code.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgmm_core::autograd::gradient_check_suite;
use lgmm_core::data::{
    draw_event_vectors, read_pack, render_item, write_pack, FeaturePack,
};
use lgmm_core::eval::dump_alignment;
use lgmm_core::kernel::{self, Modality, ScoreMatrix};
use lgmm_core::losses;
use lgmm_core::{
    evaluate, generate_synthetic, load_checkpoint, AggregationMode, DirectionMode, FeatureMatrix,
    LossConfig, LossFlags, Mat, MatchLabels, ProjectionHead, ScoringConfig, SyntheticConfig,
    TrainConfig,
};

const SUITE_SEEDS: [u64; 3] = [7, 11, 13];

fn finish(criterion: usize, name: &str, budget: Duration, started: Instant, violations: Vec<String>) {
    let elapsed = started.elapsed();
    let ok = violations.is_empty() && elapsed <= budget;
    println!(
        "criterion {criterion} ({name}): {} [{elapsed:.2?} of {budget:.0?} budget]",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(
        violations.is_empty(),
        "criterion {criterion} violations: {violations:#?}"
    );
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded its {budget:?} budget: {elapsed:?}"
    );
}

fn rand_features(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureMatrix {
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMatrix::new(Mat::new(rows, dim, data)).unwrap()
}

// Independent straight-line evaluation of the five kernel stages with
// naive loops and unstabilized exponentials. Shares no code with the
// engine's scoring path.
fn oracle_score(q: &[Vec<f64>], c: &[Vec<f64>], tau_w: f64, lambda: f64, eps: f64) -> f64 {
    let (lq, lc, d) = (q.len(), c.len(), q[0].len());
    let mut s = vec![vec![0.0f64; lc]; lq];
    for i in 0..lq {
        for j in 0..lc {
            for k in 0..d {
                s[i][j] += q[i][k] * c[j][k];
            }
        }
    }
    let mut sbar = vec![vec![0.0f64; lc]; lq];
    for j in 0..lc {
        let mut ss = 0.0;
        for row in s.iter() {
            ss += row[j] * row[j];
        }
        let norm = (ss + eps).sqrt();
        for i in 0..lq {
            sbar[i][j] = if norm > 0.0 { s[i][j] / norm } else { 0.0 };
        }
    }
    let mut w = vec![vec![0.0f64; lc]; lq];
    for i in 0..lq {
        let mut denom = 0.0;
        for j in 0..lc {
            denom += (sbar[i][j] / tau_w).exp();
        }
        for j in 0..lc {
            w[i][j] = (sbar[i][j] / tau_w).exp() / denom;
        }
    }
    let mut pooled = 0.0;
    for i in 0..lq {
        let mut aware = vec![0.0f64; d];
        for j in 0..lc {
            for k in 0..d {
                aware[k] += w[i][j] * c[j][k];
            }
        }
        let mut dot = 0.0;
        let mut nq = 0.0;
        let mut na = 0.0;
        for k in 0..d {
            dot += q[i][k] * aware[k];
            nq += q[i][k] * q[i][k];
            na += aware[k] * aware[k];
        }
        let denom = (nq.sqrt() + eps) * (na.sqrt() + eps);
        let cos = if denom > 0.0 { dot / denom } else { 0.0 };
        pooled += (lambda * cos).exp();
    }
    pooled.ln() / lambda
}

fn rows_of(f: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..f.rows()).map(|i| f.row(i).to_vec()).collect()
}

#[test]
fn criterion_01_kernel_oracle_equivalence() {
    let started = Instant::now();
    let cfg = ScoringConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = Vec::new();
    for case in 0..100 {
        let dim = rng.gen_range(1..=8);
        let rows_q = rng.gen_range(1..=5);
        let rows_c = rng.gen_range(1..=5);
        let q = rand_features(&mut rng, rows_q, dim);
        let c = rand_features(&mut rng, rows_c, dim);
        let engine = kernel::lgmm_score(&q, &c, &cfg).unwrap();
        let oracle = oracle_score(&rows_of(&q), &rows_of(&c), cfg.tau_w, cfg.lambda, cfg.epsilon);
        if (engine - oracle).abs() > 1e-10 {
            violations.push(format!("case {case}: engine {engine} vs oracle {oracle}"));
        }
    }
    finish(1, "kernel oracle equivalence", Duration::from_secs(5), started, violations);
}

#[test]
fn criterion_02_lse_limits() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut violations = Vec::new();
    for case in 0..50 {
        let n = rng.gen_range(1..=16);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = scores.iter().sum::<f64>() / n as f64;
        let nf = n as f64;

        // 1e-12 covers floating-point rounding: at n = 1 the bound is
        // exactly zero but (1000 * x) / 1000 may round by one ulp.
        let sharp = kernel::lse_pool(&scores, &ScoringConfig { lambda: 1e3, ..Default::default() }).unwrap();
        if (sharp - max).abs() > nf.ln() / 1e3 + 1e-12 {
            violations.push(format!("case {case}: sharp limit |{sharp} - {max}| > ln(n)/1e3"));
        }

        // The lambda -> 0 pool is ln(n)/lambda + mean + O(lambda*var);
        // the mean emerges once the ln(n)/lambda offset is removed.
        let lambda = 1e-3;
        let soft = kernel::lse_pool(&scores, &ScoringConfig { lambda, ..Default::default() }).unwrap();
        if (soft - nf.ln() / lambda - mean).abs() > 1e-2 {
            violations.push(format!("case {case}: soft limit {} vs mean {mean}", soft - nf.ln() / lambda));
        }
    }
    finish(2, "LSE limits", Duration::from_secs(1), started, violations);
}

#[test]
fn criterion_03_scale_and_permutation_invariance() {
    let started = Instant::now();
    let cfg = ScoringConfig { epsilon: 0.0, ..ScoringConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut violations = Vec::new();
    for case in 0..100 {
        let dim = rng.gen_range(1..=8);
        let rows_q = rng.gen_range(1..=5);
        let rows_c = rng.gen_range(1..=5);
        let q = rand_features(&mut rng, rows_q, dim);
        let c = rand_features(&mut rng, rows_c, dim);
        let base = kernel::lgmm_score(&q, &c, &cfg).unwrap();

        for scale in [0.1, 3.0, 100.0] {
            let sq = FeatureMatrix::new(q.as_mat().map(|v| v * scale)).unwrap();
            let got = kernel::lgmm_score(&sq, &c, &cfg).unwrap();
            if (got - base).abs() > 1e-6 {
                violations.push(format!("case {case}: query scale {scale} moved score by {}", got - base));
            }
            let sc = FeatureMatrix::new(c.as_mat().map(|v| v * scale)).unwrap();
            let got = kernel::lgmm_score(&q, &sc, &cfg).unwrap();
            if (got - base).abs() > 1e-6 {
                violations.push(format!("case {case}: context scale {scale} moved score by {}", got - base));
            }
        }

        let permute = |m: &Mat, rng: &mut ChaCha8Rng| {
            let mut order: Vec<usize> = (0..m.rows()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| m.row(i).to_vec()).collect();
            FeatureMatrix::new(Mat::from_rows(&rows)).unwrap()
        };
        let qp = permute(q.as_mat(), &mut rng);
        let got = kernel::lgmm_score(&qp, &c, &cfg).unwrap();
        if (got - base).abs() > 1e-6 {
            violations.push(format!("case {case}: query permutation moved score by {}", got - base));
        }
        let cp = permute(c.as_mat(), &mut rng);
        let got = kernel::lgmm_score(&q, &cp, &cfg).unwrap();
        if (got - base).abs() > 1e-6 {
            violations.push(format!("case {case}: context permutation moved score by {}", got - base));
        }
    }
    finish(3, "scale/permutation invariance", Duration::from_secs(5), started, violations);
}

#[test]
fn criterion_04_loss_closed_forms() {
    let started = Instant::now();
    let mut violations = Vec::new();
    let at = |m: Mat| ScoreMatrix::new(m, Modality::Audio, Modality::Text).unwrap();
    let tagged = |m: Mat, q, c| ScoreMatrix::new(m, q, c).unwrap();

    // Constant matrices pool to 2*ln(B) under any temperature.
    let cfg = LossConfig::default();
    for b in [2usize, 4, 8] {
        let s = at(Mat::from_rows(&vec![vec![0.42; b]; b]));
        let l = losses::inter_modal_contrastive(&s, &cfg).unwrap();
        if (l - 2.0 * (b as f64).ln()).abs() > 1e-9 {
            violations.push(format!("constant B={b}: {l} vs {}", 2.0 * (b as f64).ln()));
        }
    }

    // Hand value for the identity score matrix at unit temperature.
    let unit = LossConfig { tau: 1.0, tau_kl: 1.0, ..LossConfig::default() };
    let l = losses::inter_modal_contrastive(&at(Mat::identity(2)), &unit).unwrap();
    let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    if (l - expected).abs() > 1e-9 {
        violations.push(format!("identity B=2: {l} vs {expected}"));
    }

    // Matched target and prediction distributions give zero divergence.
    let vals = Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.7]]);
    let matched = losses::joint_soft_supervision(
        &tagged(vals.clone(), Modality::Audio, Modality::Audio),
        &tagged(vals.clone(), Modality::Text, Modality::Text),
        &tagged(vals.clone(), Modality::Audio, Modality::Text),
        &tagged(vals.clone(), Modality::Text, Modality::Audio),
        &MatchLabels::diagonal(2),
        &LossConfig { beta: 1.0, ..LossConfig::default() },
    )
    .unwrap();
    if matched != 0.0 {
        violations.push(format!("matched-distribution divergence {matched} != 0"));
    }

    // Intra-modal hand cases.
    let zeros = |n: usize, q, c| tagged(Mat::zeros(n, n), q, c);
    let l = losses::intra_modal_contrastive(
        &zeros(2, Modality::Audio, Modality::Text),
        &zeros(2, Modality::Audio, Modality::Audio),
        &zeros(2, Modality::Text, Modality::Text),
        &unit,
    )
    .unwrap();
    if l != 0.0 {
        violations.push(format!("zero B=2 intra-modal {l} != 0"));
    }
    let l = losses::intra_modal_contrastive(
        &zeros(3, Modality::Audio, Modality::Text),
        &zeros(3, Modality::Audio, Modality::Audio),
        &zeros(3, Modality::Text, Modality::Text),
        &unit,
    )
    .unwrap();
    if (l - 2.0 * 2.0f64.ln()).abs() > 1e-12 {
        violations.push(format!("zero B=3 intra-modal {l} vs 2 ln 2"));
    }
    let l = losses::intra_modal_contrastive(
        &at(Mat::identity(2)),
        &zeros(2, Modality::Audio, Modality::Audio),
        &zeros(2, Modality::Text, Modality::Text),
        &unit,
    )
    .unwrap();
    if l != -2.0 {
        violations.push(format!("diag-1 B=2 intra-modal {l} != -2"));
    }

    finish(4, "loss closed forms", Duration::from_secs(1), started, violations);
}

#[test]
fn criterion_05_gradient_checks() {
    let started = Instant::now();
    let scoring = ScoringConfig::default();
    let loss = LossConfig::default();
    let mut violations = Vec::new();
    for seed in [0u64, 1, 2] {
        for (name, report) in gradient_check_suite(seed, &scoring, &loss).unwrap() {
            if !report.passed {
                violations.push(format!(
                    "seed {seed} {name}: max rel err {:.3e} ({:?})",
                    report.max_rel_err(),
                    report.worst()
                ));
            }
        }
    }
    finish(5, "gradient checks", Duration::from_secs(30), started, violations);
}

#[test]
fn criterion_06_kernel_ordering_on_hard_negatives() {
    let started = Instant::now();
    let scoring = ScoringConfig::default();
    let mut violations = Vec::new();
    for seed in SUITE_SEEDS {
        let synth = SyntheticConfig { seed, ..SyntheticConfig::default() };
        let (ds, _) = generate_synthetic(&synth).unwrap();
        let (lgmm, _) = evaluate(&ds, None, &scoring, AggregationMode::Lgmm, DirectionMode::Directional).unwrap();
        let (maxmax, _) = evaluate(&ds, None, &scoring, AggregationMode::MaxMax, DirectionMode::Directional).unwrap();
        if lgmm.r1 < maxmax.r1 {
            violations.push(format!("seed {seed}: LGMM T2A R@1 {} < MaxMax {}", lgmm.r1, maxmax.r1));
        }
    }
    finish(6, "kernel ordering vs max-max", Duration::from_secs(60), started, violations);
}

#[test]
fn criterion_07_loss_ablation_ordering() {
    let started = Instant::now();
    let mut violations = Vec::new();
    let mut full_wins = 0;
    for seed in SUITE_SEEDS {
        let synth = SyntheticConfig { seed, ..SyntheticConfig::default() };
        let (ds, _) = generate_synthetic(&synth).unwrap();
        let mut r1 = std::collections::BTreeMap::new();
        for (name, flags) in LossFlags::ABLATION_GRID {
            let cfg = TrainConfig {
                epochs: 30,
                batch_size: 16,
                seed,
                lr: 1e-3,
                d_hidden: 32,
                d_shared: 16,
                flags,
                ..TrainConfig::default()
            };
            let out = lgmm_core::train(&ds, None, &cfg).unwrap();
            let first = out.metrics.first().unwrap().inter_c;
            let last = out.metrics.last().unwrap().inter_c;
            if last >= first {
                violations.push(format!(
                    "seed {seed} {name}: contrastive loss did not decrease ({first} -> {last})"
                ));
            }
            let (t2a, _) = evaluate(
                &ds,
                Some((&out.audio_head, &out.text_head)),
                &cfg.scoring,
                AggregationMode::Lgmm,
                DirectionMode::Directional,
            )
            .unwrap();
            r1.insert(name, t2a.r1);
        }
        if r1["full"] >= r1["inter-only"] {
            full_wins += 1;
        }
    }
    if full_wins < 2 {
        violations.push(format!("full loss beat inter-only on only {full_wins} of 3 seeds"));
    }
    finish(7, "loss ablation ordering", Duration::from_secs(600), started, violations);
}

#[test]
fn criterion_08_alignment_discriminates_hard_negatives() {
    let started = Instant::now();
    let scoring = ScoringConfig::default();
    let mut violations = Vec::new();
    for seed in SUITE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 16;
        let words = 2;
        let frames = 3;
        let sigma = 0.05;
        let events = draw_event_vectors(5, dim, &mut rng).unwrap();
        // The positive item holds events [0, 1, 2]; each negative swaps
        // the last slot for a different event.
        let audio_pos = render_item(&events, &[0, 1, 2], frames, sigma, &mut rng);
        let audio_neg1 = render_item(&events, &[0, 1, 3], frames, sigma, &mut rng);
        let audio_neg2 = render_item(&events, &[0, 1, 4], frames, sigma, &mut rng);
        let caption = render_item(&events, &[0, 1, 2], words, sigma, &mut rng);

        let contexts = vec![
            ("pos".to_string(), audio_pos),
            ("neg1".to_string(), audio_neg1),
            ("neg2".to_string(), audio_neg2),
        ];
        let dump = dump_alignment("query", &caption, &contexts, &scoring).unwrap();
        let pos = &dump.entries[0];
        for neg in &dump.entries[1..] {
            for unit in 2 * words..3 * words {
                if pos.local_scores[unit] <= neg.local_scores[unit] {
                    violations.push(format!(
                        "seed {seed}: swapped-event unit {unit} scored {} vs {} against {}",
                        pos.local_scores[unit], neg.local_scores[unit], neg.context_id
                    ));
                }
            }
            if pos.pooled <= neg.pooled {
                violations.push(format!(
                    "seed {seed}: pooled {} did not beat {} ({})",
                    pos.pooled, neg.pooled, neg.context_id
                ));
            }
        }
    }
    finish(8, "alignment hard-negative discrimination", Duration::from_secs(10), started, violations);
}

#[test]
fn criterion_09_format_round_trips() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut violations = Vec::new();

    for case in 0..100 {
        // Random pack, values f32-quantized like the on-disk format.
        let n = rng.gen_range(0..6);
        let dim = rng.gen_range(1..=6);
        let records: Vec<(String, FeatureMatrix)> = (0..n)
            .map(|i| {
                let rows = rng.gen_range(1..=4);
                let data: Vec<f64> = (0..rows * dim)
                    .map(|_| (rng.gen_range(-10.0f64..10.0) as f32) as f64)
                    .collect();
                (format!("item{i}"), FeatureMatrix::new(Mat::new(rows, dim, data)).unwrap())
            })
            .collect();
        let pack = FeaturePack::new(records).unwrap();
        let mut buf = Vec::new();
        write_pack(&mut buf, &pack).unwrap();
        match read_pack(buf.as_slice()) {
            Ok(back) if back == pack => {}
            Ok(_) => violations.push(format!("pack case {case}: round trip not bit-exact")),
            Err(e) => violations.push(format!("pack case {case}: read failed: {e}")),
        }
        // Any single corrupted header byte must be rejected or change the
        // decoded content detectably; the 16 header bytes must never decode
        // to the same pack silently.
        if case < 5 {
            for pos in 0..16 {
                let mut bad = buf.clone();
                bad[pos] ^= 0xFF;
                if read_pack(bad.as_slice()).is_ok() {
                    violations.push(format!("pack case {case}: header byte {pos} corruption accepted"));
                }
            }
        }

        // Random checkpoint fixture.
        let quantize = |m: &Mat| m.map(|v| (v as f32) as f64);
        let (audio, text) = lgmm_core::init_heads(
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
            rng.gen(),
        )
        .unwrap();
        let audio = ProjectionHead {
            w1: quantize(&audio.w1),
            b1: quantize(&audio.b1),
            w2: quantize(&audio.w2),
            b2: quantize(&audio.b2),
            final_relu: audio.final_relu,
        };
        let text = ProjectionHead {
            w1: quantize(&text.w1),
            b1: quantize(&text.b1),
            w2: quantize(&text.w2),
            b2: quantize(&text.b2),
            final_relu: text.final_relu,
        };
        let cfg = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.ckpt");
        lgmm_core::save_checkpoint(&path, &audio, &text, &cfg).unwrap();
        match load_checkpoint(&path) {
            Ok((a, t, c)) if a == audio && t == text && c == cfg => {}
            Ok(_) => violations.push(format!("checkpoint case {case}: round trip not bit-exact")),
            Err(e) => violations.push(format!("checkpoint case {case}: load failed: {e}")),
        }
        if case == 0 {
            let mut bytes = std::fs::read(&path).unwrap();
            for pos in 0..8 {
                let mut bad = bytes.clone();
                bad[pos] ^= 0xFF;
                let bad_path = dir.path().join("bad.ckpt");
                std::fs::write(&bad_path, &bad).unwrap();
                if load_checkpoint(&bad_path).is_ok() {
                    violations.push(format!("checkpoint header byte {pos} corruption accepted"));
                }
            }
            bytes.push(0);
            let trailing = dir.path().join("trailing.ckpt");
            std::fs::write(&trailing, &bytes).unwrap();
            if load_checkpoint(&trailing).is_ok() {
                violations.push("checkpoint trailing byte accepted".into());
            }
        }
    }
    finish(9, "format round trips", Duration::from_secs(5), started, violations);
}

#[test]
fn criterion_10_training_determinism() {
    let started = Instant::now();
    let mut violations = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_lgmm");

    let data_dir = dir.path().join("data");
    let status = Command::new(bin)
        .args(["gen-synthetic", "--items", "16", "--seed", "7"])
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let manifest = data_dir.join("manifest.json");
    for run in ["run1", "run2"] {
        let status = Command::new(bin)
            .args(["train", "--epochs", "5", "--batch-size", "8", "--lr", "1e-3", "--seed", "3"])
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(dir.path().join(run))
            .status()
            .unwrap();
        assert!(status.success(), "train {run} failed");
    }

    let ckpt1 = std::fs::read(dir.path().join("run1.ckpt")).unwrap();
    let ckpt2 = std::fs::read(dir.path().join("run2.ckpt")).unwrap();
    if ckpt1 != ckpt2 {
        violations.push("checkpoints differ between identical runs".into());
    }
    let log1 = std::fs::read(dir.path().join("run1.metrics.jsonl")).unwrap();
    let log2 = std::fs::read(dir.path().join("run2.metrics.jsonl")).unwrap();
    if log1 != log2 {
        violations.push("metric logs differ between identical runs".into());
    }
    if log1.is_empty() {
        violations.push("metrics log is empty".into());
    }
    finish(10, "training determinism", Duration::from_secs(120), started, violations);
}
