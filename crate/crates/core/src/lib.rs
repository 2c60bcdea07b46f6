//! Non-greedy training of oblique decision trees.
//!
//! A tree of depth `d` holds one hyperplane per internal node (heap-indexed,
//! children of `i` at `2i` and `2i+1`) and one parameter vector per leaf. An
//! input descends by the sign of each hyperplane's inner product and the
//! reached leaf's parameters produce the prediction — class log-odds under
//! log loss, a regression vector under squared loss.
//!
//! Instead of growing such a tree split by split, this crate trains all
//! hyperplanes and leaf parameters together by minimizing a convex-concave
//! upper bound on the empirical loss with projected stochastic subgradient
//! descent. Each step solves a loss-augmented search over leaves ([`inference`])
//! — exactly in `O(m·p)` per example, or approximately over the radius-1
//! Hamming ball around the current decision path in `O(d²·p)` — and pushes the
//! split rows away from decision flips that would increase the loss, keeping
//! every row inside the norm ball `‖w‖² ≤ ν` ([`optimizer`]).
//!
//! Classic greedy builders ([`greedy`]) provide baselines and warm starts:
//! axis-aligned information-gain trees, random oblique trees, and a per-node
//! refinement pass that trains each internal node's hyperplane against
//! pseudo-leaves. [`data`] handles LibSVM-format IO, deterministic splits,
//! and synthetic benchmark generators.

pub mod data;
pub mod greedy;
pub mod inference;
pub mod loss;
pub mod optimizer;
pub mod tree;

pub use data::{make_random_dense, make_rotated_xor, DataError, Dataset};
pub use greedy::{
    axis_split_row, build_axis_aligned, build_axis_aligned_with, build_random_oblique,
    co2_refine, info_gain, AxisSplit, GreedyError, GreedyStops,
};
pub use inference::{
    brute_force_loss_aug, constrained_score, empirical_loss, exact_loss_aug, example_loss,
    fast_loss_aug, surrogate_loss, surrogate_per_example, BoundMode, InferenceError,
    LossAugResult, BRUTE_FORCE_MAX_NODES, TIE_EPS,
};
pub use loss::{LossError, LossKind, Target};
pub use optimizer::{
    accuracy, active_leaves, project_row, sgd_step, train_sgd, train_ssgd, Algorithm,
    AssignmentTable, EpochRecord, InferenceMode, MomentumState, OptimizerConfig,
    OptimizerError,
};
pub use tree::{
    format_f64, navigate, path_nodes, split_sign, DecisionVector, ModelFormatError,
    TreeError, TreeModel, TreeTopology, MAX_DEPTH,
};
