use criterion::{criterion_group, criterion_main, Criterion};

use lgmm_core::{generate_synthetic, train, SyntheticConfig, TrainConfig};

fn bench_train_epoch(c: &mut Criterion) {
    let synth = SyntheticConfig { items: 32, ..SyntheticConfig::default() };
    let (dataset, _) = generate_synthetic(&synth).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one_epoch_32_items_full_loss", |b| {
        b.iter(|| train(&dataset, None, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_train_epoch);
criterion_main!(benches);
