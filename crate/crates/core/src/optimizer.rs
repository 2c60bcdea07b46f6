//! Stochastic subgradient descent on the surrogate bound, with per-row norm
//! constraints on the split weights.
//!
//! Two training loops share one step implementation:
//!
//! * [`train_sgd`] — plain SGD: each example's subtracted score term is the
//!   unconstrained maximum `Σ|w_iᵀx|`, so the per-example W-subgradient is
//!   `(ĝ − sign(Wx))xᵀ`, nonzero on at most `d` rows.
//! * [`train_ssgd`] — stable SGD: examples keep a fixed leaf assignment for a
//!   stretch of steps and the subtracted term is the score maximum constrained
//!   to that leaf. The subgradient then touches at most `2d` rows (the
//!   maximizer's path and the assigned path). Assignments are refreshed when
//!   the inner step budget runs out or bound improvement stalls.
//!
//! Steps with zero momentum touch only the gradient's rows; momentum keeps
//! dense velocity matrices and therefore updates (and re-projects) every row.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayViewMut1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::inference::{
    empirical_loss, exact_sparse, fast_sparse, surrogate_loss, BoundMode, InferenceError,
    SparseLossAug,
};
use crate::loss::{loss_gradient, LossKind};
use crate::tree::{path_nodes, split_sign, TreeError, TreeModel};

/// Errors from configuration validation and training.
#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch index {index} out of range for {len} examples")]
    BadBatchIndex { index: usize, len: usize },
    #[error("dataset has no examples")]
    EmptyDataset,
    #[error("non-finite gradient in a batch of {batch}; step rejected")]
    NonFiniteGradient { batch: usize },
}

/// Which training loop to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    Ssgd,
}

/// Which loss-augmented inference the steps use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Maximize over all decision vectors (`O(m p̃)` per example).
    Exact,
    /// Maximize over the radius-1 Hamming ball (`O(d² p̃)` per example).
    Fast,
}

/// Hyperparameters for [`train_sgd`] / [`train_ssgd`].
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Per-row norm bound: every split row satisfies `‖w_i‖² ≤ ν`.
    pub nu: f64,
    /// Learning rate η.
    pub eta: f64,
    /// Total number of minibatch steps. Zero returns the initial model.
    pub tau: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum in `[0, 1)`; zero keeps updates sparse.
    pub momentum: f64,
    pub algorithm: Algorithm,
    pub inference: InferenceMode,
    /// Maximum steps between leaf-assignment refreshes (SSGD only).
    pub ssgd_inner_steps: usize,
    /// Relative per-epoch bound improvement below which SSGD refreshes the
    /// assignments early.
    pub ssgd_rel_improvement: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            nu: 1.0,
            eta: 0.1,
            tau: 1000,
            batch_size: 16,
            momentum: 0.0,
            algorithm: Algorithm::Sgd,
            inference: InferenceMode::Fast,
            ssgd_inner_steps: 200,
            ssgd_rel_improvement: 1e-3,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !self.nu.is_finite() || self.nu <= 0.0 {
            return Err(OptimizerError::InvalidConfig(format!(
                "nu must be positive and finite, got {}",
                self.nu
            )));
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(OptimizerError::InvalidConfig(format!(
                "eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if self.batch_size == 0 {
            return Err(OptimizerError::InvalidConfig(
                "batch_size must be at least 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimizerError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.ssgd_inner_steps == 0 {
            return Err(OptimizerError::InvalidConfig(
                "ssgd_inner_steps must be at least 1".to_string(),
            ));
        }
        if !self.ssgd_rel_improvement.is_finite() || self.ssgd_rel_improvement < 0.0 {
            return Err(OptimizerError::InvalidConfig(format!(
                "ssgd_rel_improvement must be nonnegative and finite, got {}",
                self.ssgd_rel_improvement
            )));
        }
        Ok(())
    }
}

/// Heavy-ball velocity, allocated lazily on the first momentum step.
#[derive(Debug, Default, Clone)]
pub struct MomentumState {
    velocity_w: Option<Array2<f64>>,
    velocity_theta: Option<Array2<f64>>,
}

impl MomentumState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Fixed per-example leaf assignments used by the stable training loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentTable {
    leaves: Vec<usize>,
}

impl AssignmentTable {
    /// Assigns every example its currently predicted leaf.
    pub fn compute(model: &TreeModel, data: &Dataset) -> Result<Self, OptimizerError> {
        if data.is_empty() {
            return Err(OptimizerError::EmptyDataset);
        }
        let mut leaves = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            leaves.push(model.predict_leaf(data.features(i))?);
        }
        Ok(AssignmentTable { leaves })
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Projects one split row onto the ball `‖w‖² ≤ ν` (radial scaling).
pub fn project_row(mut w: ArrayViewMut1<'_, f64>, nu: f64) -> Result<(), OptimizerError> {
    if !nu.is_finite() || nu <= 0.0 {
        return Err(OptimizerError::InvalidConfig(format!(
            "nu must be positive and finite, got {nu}"
        )));
    }
    let sq_norm: f64 = w.iter().map(|v| v * v).sum();
    if sq_norm > nu {
        let scale = (nu / sq_norm).sqrt();
        w.mapv_inplace(|v| v * scale);
    }
    Ok(())
}

/// Per-epoch training metrics.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Empirical loss summed over the training set.
    pub empirical_loss: f64,
    /// Surrogate bound summed over the training set, in the mode the
    /// algorithm optimizes (exact/fast for SGD, assignment-constrained for
    /// SSGD).
    pub surrogate_loss: f64,
    /// Classification accuracy on the training set; `None` for regression.
    pub train_accuracy: Option<f64>,
    /// Accuracy on the validation set, when one was supplied.
    pub val_accuracy: Option<f64>,
    /// Distinct leaves the training data routes to.
    pub active_leaves: usize,
    pub wall_ms: f64,
}

/// Fraction of examples whose predicted class matches the label, or `None`
/// for regression data.
pub fn accuracy(model: &TreeModel, data: &Dataset) -> Result<Option<f64>, OptimizerError> {
    if data.is_empty() {
        return Err(OptimizerError::EmptyDataset);
    }
    if !data.is_classification() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let predicted = model.predict_class(data.features(i))?;
        if Some(predicted) == data.class(i) {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / data.len() as f64))
}

/// Number of distinct leaves the dataset routes to under the model.
pub fn active_leaves(model: &TreeModel, data: &Dataset) -> Result<usize, OptimizerError> {
    if data.is_empty() {
        return Err(OptimizerError::EmptyDataset);
    }
    let mut seen = vec![false; model.topology().leaf_count()];
    let mut count = 0usize;
    for i in 0..data.len() {
        let leaf = model.predict_leaf(data.features(i))?;
        if !seen[leaf - 1] {
            seen[leaf - 1] = true;
            count += 1;
        }
    }
    Ok(count)
}

/// One minibatch subgradient step with the plain SGD objective. The model
/// must already satisfy the row constraints; rows touched by the step are
/// re-projected, so feasibility is preserved.
pub fn sgd_step(
    model: &mut TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &OptimizerConfig,
    state: &mut MomentumState,
) -> Result<(), OptimizerError> {
    step_impl(model, data, batch, config, state, None)
}

/// Accumulated minibatch subgradients, sparse over rows. `BTreeMap` keeps the
/// accumulation and update order deterministic.
struct BatchGradients {
    w: BTreeMap<usize, Array1<f64>>,
    theta: BTreeMap<usize, Array1<f64>>,
}

/// Computes the mean subgradients of the configured surrogate over a batch.
fn batch_gradients(
    model: &TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &OptimizerConfig,
    assignments: Option<&AssignmentTable>,
) -> Result<BatchGradients, OptimizerError> {
    let width = model.num_features();
    let mut w_grads: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    let mut theta_grads: BTreeMap<usize, Array1<f64>> = BTreeMap::new();

    for &index in batch {
        if index >= data.len() {
            return Err(OptimizerError::BadBatchIndex { index, len: data.len() });
        }
        let x = data.features(index);
        let y = data.target(index);
        let SparseLossAug { leaf, flips, .. } = match config.inference {
            InferenceMode::Exact => exact_sparse(model, x, y)?,
            InferenceMode::Fast => fast_sparse(model, x, y)?,
        };

        // First max term: ∂/∂w_i of ĝᵀWx is ĝ_i·x; relative to sign(Wx) only
        // the flipped bits contribute, each with coefficient 2·ĝ_i.
        for &(node, sign) in &flips {
            let row = w_grads
                .entry(node)
                .or_insert_with(|| Array1::zeros(width));
            row.scaled_add(2.0 * f64::from(sign), &x);
        }
        // Subtracted term: sign(Wx) for SGD (cancels exactly), or the
        // assignment-constrained maximizer for SSGD, which differs from
        // sign(Wx) where the assigned path disagrees with the signs.
        if let Some(table) = assignments {
            let assigned = table.leaves()[index];
            for (node, dir) in path_nodes(model.topology(), assigned)? {
                let s = model.w().row(node - 1).dot(&x);
                if dir != split_sign(s) {
                    let row = w_grads
                        .entry(node)
                        .or_insert_with(|| Array1::zeros(width));
                    row.scaled_add(-2.0 * f64::from(dir), &x);
                }
            }
        }

        // Θ receives the loss gradient at the maximizer's leaf; the
        // subtracted term does not depend on Θ.
        let grad = loss_gradient(model.task(), model.leaf_params(leaf), y)
            .map_err(InferenceError::from)?;
        match theta_grads.entry(leaf) {
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert(grad);
            }
            std::collections::btree_map::Entry::Occupied(mut slot) => {
                *slot.get_mut() += &grad;
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for row in w_grads.values_mut() {
        row.mapv_inplace(|v| v * scale);
    }
    for row in theta_grads.values_mut() {
        row.mapv_inplace(|v| v * scale);
    }
    Ok(BatchGradients { w: w_grads, theta: theta_grads })
}

fn step_impl(
    model: &mut TreeModel,
    data: &Dataset,
    batch: &[usize],
    config: &OptimizerConfig,
    state: &mut MomentumState,
    assignments: Option<&AssignmentTable>,
) -> Result<(), OptimizerError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(OptimizerError::EmptyBatch);
    }
    let grads = batch_gradients(model, data, batch, config, assignments)?;
    let finite = grads.w.values().all(|row| row.iter().all(|v| v.is_finite()))
        && grads.theta.values().all(|row| row.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(OptimizerError::NonFiniteGradient { batch: batch.len() });
    }

    if config.momentum == 0.0 {
        // Sparse path: only rows with nonzero gradient move.
        for (&node, grad) in &grads.w {
            let mut row = model.w_mut().row_mut(node - 1);
            row.scaled_add(-config.eta, grad);
            project_row(row, config.nu)?;
        }
        for (&leaf, grad) in &grads.theta {
            model.theta_mut().row_mut(leaf - 1).scaled_add(-config.eta, grad);
        }
        return Ok(());
    }

    // Momentum path: dense velocities; every row may move, so every row is
    // re-projected.
    let (m, width) = model.w().dim();
    let theta_dim = model.theta().dim();
    let velocity_w = state
        .velocity_w
        .get_or_insert_with(|| Array2::zeros((m, width)));
    let velocity_theta = state
        .velocity_theta
        .get_or_insert_with(|| Array2::zeros(theta_dim));
    velocity_w.mapv_inplace(|v| v * config.momentum);
    velocity_theta.mapv_inplace(|v| v * config.momentum);
    for (&node, grad) in &grads.w {
        velocity_w.row_mut(node - 1).scaled_add(-config.eta, grad);
    }
    for (&leaf, grad) in &grads.theta {
        velocity_theta.row_mut(leaf - 1).scaled_add(-config.eta, grad);
    }
    *model.w_mut() += &*velocity_w;
    *model.theta_mut() += &*velocity_theta;
    for i in 0..m {
        project_row(model.w_mut().row_mut(i), config.nu)?;
    }
    Ok(())
}

/// Trains with plain SGD. Returns the final model — or, when a validation set
/// is supplied, the epoch snapshot with the highest validation accuracy —
/// together with the per-epoch metric trace.
pub fn train_sgd(
    data: &Dataset,
    val: Option<&Dataset>,
    config: &OptimizerConfig,
    init: &TreeModel,
) -> Result<(TreeModel, Vec<EpochRecord>), OptimizerError> {
    train_impl(data, val, config, init, false)
}

/// Trains with stable SGD: fast inference against leaf assignments that stay
/// fixed until the inner step budget is exhausted or the bound stops
/// improving.
pub fn train_ssgd(
    data: &Dataset,
    val: Option<&Dataset>,
    config: &OptimizerConfig,
    init: &TreeModel,
) -> Result<(TreeModel, Vec<EpochRecord>), OptimizerError> {
    train_impl(data, val, config, init, true)
}

fn check_dimensions(
    data: &Dataset,
    init: &TreeModel,
) -> Result<(), OptimizerError> {
    if init.num_features() != data.width() {
        return Err(OptimizerError::Tree(TreeError::FeatureMismatch {
            expected: init.num_features(),
            actual: data.width(),
        }));
    }
    if init.num_outputs() != data.num_outputs() {
        return Err(OptimizerError::InvalidConfig(format!(
            "model has {} outputs but dataset has {}",
            init.num_outputs(),
            data.num_outputs()
        )));
    }
    let classification = data.is_classification();
    let wants_classes = init.task() == LossKind::Log;
    if classification != wants_classes {
        return Err(OptimizerError::InvalidConfig(format!(
            "{} model cannot train on {} targets",
            init.task(),
            if classification { "class" } else { "vector" }
        )));
    }
    Ok(())
}

fn train_impl(
    data: &Dataset,
    val: Option<&Dataset>,
    config: &OptimizerConfig,
    init: &TreeModel,
    stable: bool,
) -> Result<(TreeModel, Vec<EpochRecord>), OptimizerError> {
    config.validate()?;
    if data.is_empty() {
        return Err(OptimizerError::EmptyDataset);
    }
    check_dimensions(data, init)?;
    if config.tau == 0 {
        return Ok((init.clone(), Vec::new()));
    }

    let mut model = init.clone();
    // Start from a feasible point so that per-step row projection keeps every
    // row inside the ball for the rest of the run.
    for i in 0..model.w().nrows() {
        project_row(model.w_mut().row_mut(i), config.nu)?;
    }

    let mut state = MomentumState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, TreeModel)> = None;

    let mut steps = 0usize;
    let mut epoch = 0usize;
    // Stable-loop state.
    let mut assignments: Option<AssignmentTable> = None;
    let mut steps_since_assign = 0usize;
    let mut refresh = true;
    let mut prev_surrogate: Option<f64> = None;

    while steps < config.tau {
        epoch += 1;
        let start = Instant::now();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if steps >= config.tau {
                break;
            }
            if stable && (refresh || steps_since_assign >= config.ssgd_inner_steps) {
                assignments = Some(AssignmentTable::compute(&model, data)?);
                steps_since_assign = 0;
                refresh = false;
                prev_surrogate = None;
            }
            step_impl(&mut model, data, batch, config, &mut state, assignments.as_ref())?;
            steps += 1;
            steps_since_assign += 1;
        }
        // Optimization time only; the metric evaluation below is logging
        // overhead and would otherwise swamp epoch timings in exact mode.
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;

        let empirical = empirical_loss(&model, data)?;
        let surrogate = if stable {
            let table = assignments.as_ref().expect("assignments set before first step");
            surrogate_loss(&model, data, BoundMode::Ssgd(table.leaves()))?
        } else {
            let mode = match config.inference {
                InferenceMode::Exact => BoundMode::Exact,
                InferenceMode::Fast => BoundMode::Fast,
            };
            surrogate_loss(&model, data, mode)?
        };
        if stable {
            if let Some(prev) = prev_surrogate {
                if prev - surrogate < config.ssgd_rel_improvement * prev.abs() {
                    refresh = true;
                }
            }
            prev_surrogate = Some(surrogate);
        }

        let train_accuracy = accuracy(&model, data)?;
        let val_accuracy = match val {
            Some(v) => accuracy(&model, v)?,
            None => None,
        };
        if let Some(acc) = val_accuracy {
            let improved = match &best {
                None => true,
                Some((best_acc, _)) => acc > *best_acc,
            };
            if improved {
                best = Some((acc, model.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            empirical_loss: empirical,
            surrogate_loss: surrogate,
            train_accuracy,
            val_accuracy,
            active_leaves: active_leaves(&model, data)?,
            wall_ms,
        });
    }

    let final_model = match best {
        Some((_, snapshot)) => snapshot,
        None => model,
    };
    Ok((final_model, records))
}
