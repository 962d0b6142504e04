use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use ce_core::data::{SyntheticTask, TaskSpec};
use ce_core::diagnostics::cumulative_ablation;
use ce_core::model::{BlockSpec, Model, ModelSpec};
use ce_core::norm::Activation;
use ce_core::par::Exec;
use ce_core::theory::mc_moments_grid;
use ce_core::train::{train, TrainConfig};

const EXECS: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn monte_carlo(c: &mut Criterion) {
    let points: Vec<(f64, f64)> = [-2.0, -1.0, -0.1, 0.1, 1.0, 2.0]
        .iter()
        .flat_map(|&g| [-2.0, -1.0, 0.0, 1.0].map(|b| (g, b)))
        .collect();
    let mut group = c.benchmark_group("mc_moments_grid_1e6");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| mc_moments_grid(black_box(&points), 1_000_000, 1, exec))
        });
    }
    group.finish();
}

fn ablation(c: &mut Criterion) {
    let task = SyntheticTask::generate(&TaskSpec::default()).unwrap();
    let block = BlockSpec::parse_variant("bn+ce", Activation::Relu).unwrap();
    let mut model = Model::new(ModelSpec::uniform(8, 16, 4, 6, block, 3)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &task, &cfg).unwrap();
    let ratios: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let mut group = c.benchmark_group("cumulative_ablation_bn_ce");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| cumulative_ablation(&model, &task.test, 2, &ratios, 3, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, ablation);
criterion_main!(benches);
