//! One SGD epoch (all minibatches once) under each inference mode, and the
//! greedy initializers, at a desk-scale dataset size.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use obtree::{
    build_axis_aligned, sgd_step, Dataset, InferenceMode, LossKind, MomentumState,
    OptimizerConfig, TreeModel, TreeTopology,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(depth: usize, n: usize) -> (TreeModel, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let topology = TreeTopology::new(depth).unwrap();
    let m = topology.internal_count();
    let mut data = obtree::make_random_dense(n, 50, 2, 11);
    data.augment().unwrap();
    let w = Array2::from_shape_fn((m, data.width()), |_| rng.random_range(-0.2..0.2));
    let theta = Array2::from_shape_fn((m + 1, 2), |_| rng.random_range(-0.5..0.5));
    (TreeModel::new(topology, LossKind::Log, w, theta).unwrap(), data)
}

fn sgd_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("sgd_epoch");
    group.sample_size(10);
    let (model, data) = fixture(8, 512);
    let indices: Vec<usize> = (0..data.len()).collect();
    for mode in [InferenceMode::Exact, InferenceMode::Fast] {
        let label = match mode {
            InferenceMode::Exact => "exact",
            InferenceMode::Fast => "fast",
        };
        let config = OptimizerConfig {
            nu: 1.0,
            eta: 0.05,
            batch_size: 16,
            inference: mode,
            ..OptimizerConfig::default()
        };
        group.bench_with_input(BenchmarkId::new(label, 8), &mode, |b, _| {
            b.iter(|| {
                let mut candidate = model.clone();
                let mut state = MomentumState::new();
                for batch in indices.chunks(config.batch_size) {
                    sgd_step(&mut candidate, &data, batch, &config, &mut state).unwrap();
                }
                black_box(candidate.max_row_sq_norm())
            });
        });
    }
    group.finish();
}

fn greedy_builders(c: &mut Criterion) {
    let mut group = c.benchmark_group("greedy_init");
    group.sample_size(10);
    let mut data = obtree::make_rotated_xor(1_000, 0.05, 5);
    data.augment().unwrap();
    for depth in [2usize, 4] {
        group.bench_with_input(BenchmarkId::new("axis", depth), &depth, |b, &d| {
            b.iter(|| black_box(build_axis_aligned(&data, d, 4.0).unwrap()));
        });
    }
    group.finish();
}

criterion_group!(benches, sgd_epoch, greedy_builders);
criterion_main!(benches);
