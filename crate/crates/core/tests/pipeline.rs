//! Workflow tests: data -> greedy initialization -> refinement -> training ->
//! persistence, plus determinism and shared-reference concurrency.

use ndarray::Array2;
use obtree::{
    accuracy, build_axis_aligned, build_random_oblique, co2_refine, empirical_loss,
    make_rotated_xor, surrogate_loss, train_sgd, train_ssgd, BoundMode, Dataset, InferenceMode,
    LossKind, OptimizerConfig, Target, TreeModel,
};

fn xor_splits(train: &Dataset, nu: f64) -> TreeModel {
    let axis = build_axis_aligned(train, 2, nu).unwrap();
    TreeModel::new(
        axis.topology(),
        axis.task(),
        axis.w().clone(),
        Array2::zeros((4, 2)),
    )
    .unwrap()
}

#[test]
fn greedy_then_nongreedy_improves_and_round_trips() {
    let mut data = make_rotated_xor(900, 0.05, 42);
    data.augment().unwrap();
    let parts = data.split(&[0.8, 0.2], 0).unwrap();
    let (train, test) = (&parts[0], &parts[1]);

    let axis = build_axis_aligned(train, 2, 43.0).unwrap();
    let axis_acc = accuracy(&axis, test).unwrap().unwrap();

    let config = OptimizerConfig {
        nu: 43.0,
        eta: 0.1,
        tau: 4_000,
        batch_size: 16,
        inference: InferenceMode::Fast,
        seed: 5,
        ..OptimizerConfig::default()
    };
    let (model, records) = train_sgd(train, Some(test), &config, &xor_splits(train, 43.0)).unwrap();
    let final_acc = accuracy(&model, test).unwrap().unwrap();
    assert!(
        final_acc >= axis_acc + 0.05,
        "training should beat the axis-aligned tree: {final_acc} vs {axis_acc}"
    );
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r.val_accuracy.is_some()));

    // The tracked surrogate stays above the true loss at every logged epoch.
    let surr = surrogate_loss(&model, train, BoundMode::Fast).unwrap();
    let truth = empirical_loss(&model, train).unwrap();
    assert!(surr >= truth - 1e-9);

    // Persistence round trip reproduces the model bit for bit.
    let path = std::env::temp_dir().join(format!("obtree-pipeline-{}.model", std::process::id()));
    model.save(&path).unwrap();
    let reloaded = TreeModel::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(model, reloaded);
    for i in 0..test.len() {
        assert_eq!(
            model.predict_class(test.features(i)).unwrap(),
            reloaded.predict_class(test.features(i)).unwrap()
        );
    }
}

#[test]
fn refined_initializations_feed_both_trainers() {
    let mut data = make_rotated_xor(600, 0.05, 13);
    data.augment().unwrap();

    let config = OptimizerConfig {
        nu: 10.0,
        eta: 0.05,
        tau: 1_500,
        batch_size: 16,
        inference: InferenceMode::Fast,
        seed: 2,
        ..OptimizerConfig::default()
    };

    // Axis-aligned splits refined per node, then polished by both trainers.
    let axis = build_axis_aligned(&data, 3, config.nu).unwrap();
    let refined = co2_refine(&axis, &data, &config).unwrap();
    let (from_sgd, _) = train_sgd(&data, None, &config, &refined).unwrap();
    let (from_ssgd, _) = train_ssgd(&data, None, &config, &refined).unwrap();
    let base = empirical_loss(&refined, &data).unwrap();
    for (name, model) in [("sgd", &from_sgd), ("ssgd", &from_ssgd)] {
        let trained = empirical_loss(model, &data).unwrap();
        assert!(
            trained <= base * 1.5,
            "{name} should not blow up the loss: {trained} vs {base}"
        );
        assert!(model.max_row_sq_norm() <= config.nu + 1e-9);
    }

    // A random oblique forest start also trains without leaving the budget.
    let random = build_random_oblique(&data, 3, 20, config.nu, 9).unwrap();
    let (model, _) = train_sgd(&data, None, &config, &random).unwrap();
    assert!(model.max_row_sq_norm() <= config.nu + 1e-9);
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let mut data = make_rotated_xor(400, 0.05, 8);
    data.augment().unwrap();
    let init = xor_splits(&data, 4.0);
    let config = OptimizerConfig {
        nu: 4.0,
        eta: 0.1,
        tau: 800,
        batch_size: 16,
        momentum: 0.5,
        inference: InferenceMode::Fast,
        seed: 77,
        ..OptimizerConfig::default()
    };
    let (a, ra) = train_sgd(&data, None, &config, &init).unwrap();
    let (b, rb) = train_sgd(&data, None, &config, &init).unwrap();
    assert_eq!(a, b, "identical seeds must give identical models");
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.empirical_loss.to_bits(), y.empirical_loss.to_bits());
        assert_eq!(x.surrogate_loss.to_bits(), y.surrogate_loss.to_bits());
    }

    let (c, _) = train_sgd(
        &data,
        None,
        &OptimizerConfig { seed: 78, ..config.clone() },
        &init,
    )
    .unwrap();
    assert_ne!(a, c, "a different seed should visit different minibatches");
}

#[test]
fn shared_model_evaluates_consistently_across_threads() {
    let mut data = make_rotated_xor(800, 0.05, 3);
    data.augment().unwrap();
    let config = OptimizerConfig {
        nu: 43.0,
        eta: 0.1,
        tau: 1_000,
        batch_size: 16,
        inference: InferenceMode::Fast,
        seed: 4,
        ..OptimizerConfig::default()
    };
    let (model, _) = train_sgd(&data, None, &config, &xor_splits(&data, 43.0)).unwrap();

    let whole = empirical_loss(&model, &data).unwrap();
    let shards = data.split(&[0.25, 0.25, 0.25, 0.25], 1).unwrap();
    let partial: f64 = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| scope.spawn(|| empirical_loss(&model, shard).unwrap()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    });
    assert!(
        (whole - partial).abs() <= 1e-9 * whole.abs().max(1.0),
        "sharded evaluation should match: {whole} vs {partial}"
    );
}

#[test]
fn regression_targets_train_end_to_end() {
    // Piecewise-constant target over the four quadrants of the plane.
    let n = 400;
    let mut rng_state = 0x9e3779b97f4a7c15u64;
    let mut next = move || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut dense = Array2::zeros((n, 2));
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (next(), next());
        dense[[i, 0]] = a;
        dense[[i, 1]] = b;
        targets.push(vec![if a * b > 0.0 { 1.0 } else { -1.0 }]);
    }
    let mut data = Dataset::from_dense_regression(dense, targets).unwrap();
    data.augment().unwrap();

    // Splits on the two coordinate axes; leaf values start at zero and must
    // be learned, together with the split margins.
    let w = ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
    let init = TreeModel::new(
        obtree::TreeTopology::new(2).unwrap(),
        LossKind::Squared,
        w,
        Array2::zeros((4, 1)),
    )
    .unwrap();
    let config = OptimizerConfig {
        nu: 10.0,
        eta: 0.05,
        tau: 2_000,
        batch_size: 16,
        inference: InferenceMode::Exact,
        seed: 21,
        ..OptimizerConfig::default()
    };
    let (model, records) = train_sgd(&data, None, &config, &init).unwrap();
    let before = empirical_loss(&init, &data).unwrap();
    let after = empirical_loss(&model, &data).unwrap();
    assert!(
        after < before * 0.75,
        "squared loss should drop well below the all-zero fit: {after} vs {before}"
    );
    // The learned leaf values recover the checkerboard sign pattern even
    // though the bound keeps their magnitudes conservative.
    let mut agree = 0usize;
    for i in 0..data.len() {
        let leaf = model.predict_leaf(data.features(i)).unwrap();
        if let Target::Vector(v) = data.target(i) {
            if model.leaf_params(leaf)[0] * v[0] > 0.0 {
                agree += 1;
            }
        }
    }
    assert!(
        agree as f64 >= 0.9 * data.len() as f64,
        "predicted signs should match the quadrant pattern: {agree}/{}",
        data.len()
    );
    // Accuracy is undefined for vector targets and the trace reports none.
    assert!(records.iter().all(|r| r.train_accuracy.is_none()));
    assert!(accuracy(&model, &data).unwrap().is_none());
    assert!(matches!(data.target(0), Target::Vector(_)));
}
