use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use lgmm_bench::{feature_batch, features};
use lgmm_core::kernel::{batch_score_matrix, lgmm_score, pair_score};
use lgmm_core::{AggregationMode, Modality, ScoringConfig};

fn bench_pair_scores(c: &mut Criterion) {
    let cfg = ScoringConfig::default();
    let mut group = c.benchmark_group("pair_score");
    for (name, rows_q, rows_c, dim) in [
        ("desk_9x6_d16", 9, 6, 16),
        ("clip_96x24_d512", 96, 24, 512),
    ] {
        let q = features(1, rows_q, dim);
        let ctx = features(2, rows_c, dim);
        group.bench_with_input(BenchmarkId::new("lgmm", name), &(), |b, ()| {
            b.iter(|| lgmm_score(black_box(&q), black_box(&ctx), &cfg).unwrap())
        });
        for mode in [AggregationMode::MaxMean, AggregationMode::MaxMax] {
            group.bench_with_input(BenchmarkId::new(mode.to_string(), name), &(), |b, ()| {
                b.iter(|| pair_score(black_box(&q), black_box(&ctx), &cfg, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_batch_matrix(c: &mut Criterion) {
    let cfg = ScoringConfig::default();
    let queries = feature_batch(10, 16, 9, 16);
    let contexts = feature_batch(50, 16, 6, 16);
    c.bench_function("batch_score_matrix/16x16_desk", |b| {
        b.iter(|| {
            batch_score_matrix(
                black_box(&queries),
                black_box(&contexts),
                &cfg,
                AggregationMode::Lgmm,
                Modality::Audio,
                Modality::Text,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_pair_scores, bench_batch_matrix);
criterion_main!(benches);
