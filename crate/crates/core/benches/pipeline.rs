use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spectree::classifier::{train, TrainConfig};
use spectree::data::{make_synthetic, SynthConfig};
use spectree::exec;
use spectree::metrics::evaluate;
use spectree::tree::{build_tree, TreeConfig};

fn pipeline(c: &mut Criterion) {
    let (train_ds, test_ds) = make_synthetic(&SynthConfig {
        n_classes: 64,
        dim: 32,
        examples_per_class: 100,
        cluster_separation: 1.0,
        noise_sigma: 0.05,
        seed: 2,
    })
    .unwrap();
    let tree_cfg = TreeConfig {
        max_depth: 5,
        k: 8,
        ..Default::default()
    };
    let (tree, _) = build_tree(&train_ds, &tree_cfg).unwrap();
    let train_cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let (model, _) = train(&train_ds, &tree, &train_cfg).unwrap();

    let mut g = c.benchmark_group("build_tree");
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| exec::sequential(|| black_box(build_tree(&train_ds, &tree_cfg).unwrap())))
    });
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| black_box(build_tree(&train_ds, &tree_cfg).unwrap()))
    });
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(20);
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| exec::sequential(|| black_box(evaluate(&model, &tree, &test_ds).unwrap())))
    });
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| {
        b.iter(|| black_box(evaluate(&model, &tree, &test_ds).unwrap()))
    });
    g.finish();

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(train(&train_ds, &tree, &train_cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
