use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tfgcast::exec::Parallelism;
use tfgcast::synth::{self, SynthConfig};
use tfgcast::train::{self, Dataset, TrainConfig};

fn small_setup() -> (TrainConfig, Dataset) {
    let cfg = TrainConfig {
        input_len: 12,
        horizon: 12,
        embed_dim: 16,
        ffn_dim: 128,
        subgraph_size: 5,
        ..TrainConfig::default()
    };
    let series = synth::generate(&SynthConfig {
        nodes: 20,
        days: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = Dataset::prepare(series, cfg.input_len, cfg.horizon, cfg.split).unwrap();
    (cfg, data)
}

fn training_epoch(c: &mut Criterion) {
    let (cfg, data) = small_setup();
    let mut group = c.benchmark_group("training_epoch");
    group.sample_size(10);
    for (name, mode) in [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)] {
        let cfg = TrainConfig {
            parallelism: mode,
            ..cfg.clone()
        };
        let mut trainer = train::Trainer::new(cfg, &data).unwrap();
        let mut epoch = 0;
        group.bench_function(name, |b| {
            b.iter(|| {
                epoch += 1;
                black_box(trainer.train_epoch(epoch).unwrap())
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (cfg, data) = small_setup();
    let trainer = train::Trainer::new(cfg, &data).unwrap();
    let mut group = c.benchmark_group("evaluation");
    for (name, mode) in [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| black_box(train::evaluate(&trainer.model, &data, &data.splits.test, mode).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, training_epoch, evaluation);
criterion_main!(benches);
