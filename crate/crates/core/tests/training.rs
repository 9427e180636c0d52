//! End-to-end training behavior: determinism, gradient flow, and loss
//! decrease on a memorization task.

use lgmm_core::{
    generate_synthetic, train, LossFlags, SyntheticConfig, TrainConfig,
};

fn small_suite(items: usize, seed: u64) -> lgmm_core::RetrievalDataset {
    let cfg = SyntheticConfig {
        vocab_size: 12,
        dim: 8,
        items,
        events_per_item: 2,
        frames_per_event: 2,
        words_per_event: 2,
        noise_sigma: 0.05,
        hard_negative_fraction: 0.0,
        seed,
    };
    generate_synthetic(&cfg).unwrap().0
}

fn desk_cfg(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        seed: 1,
        lr: 1e-3,
        d_hidden: 16,
        d_shared: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let ds = small_suite(8, 3);
    let cfg = desk_cfg(0, 4);
    let out = train(&ds, None, &cfg).unwrap();
    let (audio0, text0) = lgmm_core::init_heads(
        ds.audio.dim().unwrap(),
        ds.text.dim().unwrap(),
        cfg.d_hidden,
        cfg.d_shared,
        cfg.seed,
    )
    .unwrap();
    assert_eq!(out.audio_head, audio0);
    assert_eq!(out.text_head, text0);
    assert!(out.metrics.is_empty());
}

#[test]
fn training_is_bit_deterministic() {
    let ds = small_suite(8, 5);
    let cfg = desk_cfg(2, 4);
    let a = train(&ds, None, &cfg).unwrap();
    let b = train(&ds, None, &cfg).unwrap();
    assert_eq!(a.audio_head, b.audio_head);
    assert_eq!(a.text_head, b.text_head);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn one_step_moves_parameters_in_both_heads() {
    let ds = small_suite(4, 9);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..desk_cfg(1, 4) };
    let (audio0, text0) = lgmm_core::init_heads(
        ds.audio.dim().unwrap(),
        ds.text.dim().unwrap(),
        cfg.d_hidden,
        cfg.d_shared,
        cfg.seed,
    )
    .unwrap();
    let out = train(&ds, None, &cfg).unwrap();
    let epoch = &out.metrics[0];
    if epoch.dead_audio_grad || epoch.dead_text_grad {
        // Saturated rectifiers are detected and reported rather than
        // silently producing a frozen head.
        return;
    }
    assert_ne!(out.audio_head, audio0, "audio head never moved");
    assert_ne!(out.text_head, text0, "text head never moved");
}

#[test]
fn memorization_halves_contrastive_loss() {
    // Eight fixed pairs, 200 steps (one batch per epoch).
    let ds = small_suite(8, 7);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        seed: 2,
        lr: 1e-3,
        d_hidden: 16,
        d_shared: 8,
        flags: LossFlags::INTER_ONLY,
        ..TrainConfig::default()
    };
    let out = train(&ds, None, &cfg).unwrap();
    let first = out.metrics.first().unwrap().inter_c;
    let last = out.metrics.last().unwrap().inter_c;
    assert!(
        last <= 0.5 * first,
        "contrastive loss {first} only reached {last} after 200 steps"
    );
}

#[test]
fn too_few_items_is_a_config_error() {
    let ds = small_suite(4, 11);
    let cfg = desk_cfg(1, 16);
    assert!(matches!(train(&ds, None, &cfg), Err(lgmm_core::Error::Config(_))));
}

#[test]
fn full_loss_and_ablations_train_and_log_enabled_terms() {
    let ds = small_suite(8, 13);
    for (name, flags) in LossFlags::ABLATION_GRID {
        let cfg = TrainConfig { flags, epochs: 2, ..desk_cfg(2, 4) };
        let out = train(&ds, None, &cfg).unwrap();
        assert_eq!(out.metrics.len(), 2, "{name}");
        for epoch in &out.metrics {
            assert!(epoch.inter_c.is_finite());
            assert_eq!(epoch.jnt.is_some(), flags.jnt, "{name}");
            assert_eq!(epoch.intra_c.is_some(), flags.intra_c, "{name}");
            assert!((0.0..=1.0).contains(&epoch.val_t2a_r1));
        }
    }
}
