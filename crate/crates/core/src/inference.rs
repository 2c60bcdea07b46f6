//! Loss-augmented inference and surrogate-bound evaluation.
//!
//! The trained objective is an upper bound on the empirical loss: for each
//! example the bound is
//!
//! ```text
//!   max_g [ gᵀWx + ℓ(Θᵀf(g), y) ]  −  max_h [ hᵀWx ]
//! ```
//!
//! where `g`, `h` range over ±1 decision vectors and `f(g)` is the leaf the
//! tree navigates to under `g`. The second term has the closed form
//! `Σ_i |w_iᵀx|`, so the interesting work is the first term — loss-augmented
//! inference. Three implementations live here:
//!
//! * [`brute_force_loss_aug`] — exhaustive enumeration over all `2^m` decision
//!   vectors, usable only for small trees; the test oracle.
//! * [`exact_loss_aug`] — a single depth-first pass that accumulates, per
//!   leaf, the penalty `Σ 2|w_iᵀx|` over on-path disagreements with
//!   `sign(Wx)`; equivalent to brute force in `O(m p̃)` time.
//! * [`fast_loss_aug`] — maximization restricted to the radius-1 Hamming ball
//!   around `sign(Wx)`: only the current leaf and the `d` single-flip
//!   redirections of its path need evaluation.
//!
//! The optimizer consumes the sparse siblings ([`exact_sparse`],
//! [`fast_sparse`]) which report the surrogate gap (value minus `Σ|w_iᵀx|`)
//! and the flipped bits instead of materializing all `m` decisions; that is
//! what keeps the fast path at `O(d² p̃)` per example.

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

use crate::data::Dataset;
use crate::loss::{loss_value, LossError, Target};
use crate::tree::{
    navigate, path_nodes, split_sign, DecisionVector, TreeError, TreeModel,
    TreeTopology,
};

/// Floating-point argmax values closer than this are treated as exact ties
/// and resolved by the deterministic tie-breaking rules (smallest leaf index
/// first).
pub const TIE_EPS: f64 = 1e-12;

/// Largest internal-node count accepted by [`brute_force_loss_aug`].
pub const BRUTE_FORCE_MAX_NODES: usize = 20;

/// Errors from inference and bound evaluation.
#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("brute-force enumeration supports at most {BRUTE_FORCE_MAX_NODES} internal nodes, got {0}")]
    TooManyNodes(usize),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("expected {expected} assigned leaves, got {actual}")]
    AssignmentLength { expected: usize, actual: usize },
    #[error("dataset has no examples")]
    EmptyDataset,
}

/// A maximizer of `gᵀWx + ℓ(Θᵀf(g), y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAugResult {
    /// The maximizing decision vector over all `m` internal nodes.
    pub g_hat: DecisionVector,
    /// `navigate(g_hat)`, the leaf the maximizer routes to.
    pub leaf: usize,
    /// `ĝᵀWx + ℓ(θ_leaf, y)`.
    pub value: f64,
}

/// Sparse form of a loss-augmented maximizer, relative to `sign(Wx)`.
///
/// `gap` is `value − Σ|w_iᵀx|`, i.e. the per-example surrogate bound before
/// any subtracted-term adjustment; `flips` lists the bits where the maximizer
/// differs from `sign(Wx)` as `(node, new_sign)` pairs. Exact inference flips
/// at most `d` bits (all on the winning path), fast inference at most one.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SparseLossAug {
    pub leaf: usize,
    pub gap: f64,
    pub flips: Vec<(usize, i8)>,
}

/// Which surrogate bound to evaluate.
///
/// The lifetime carries per-example leaf assignments for the stable variant:
/// pass a one-element slice to [`surrogate_per_example`] and one leaf per
/// example to [`surrogate_loss`].
#[derive(Debug, Clone, Copy)]
pub enum BoundMode<'a> {
    /// First term maximized over all decision vectors; subtracts `Σ|w_iᵀx|`.
    Exact,
    /// First term maximized over the radius-1 Hamming ball around `sign(Wx)`;
    /// subtracts `Σ|w_iᵀx|`.
    Fast,
    /// Fast first term, but the subtracted maximization is constrained to
    /// decision vectors routing to the assigned leaf. Never smaller than the
    /// fast bound.
    Ssgd(&'a [usize]),
}

/// `ℓ(θ_leaf, y)` for one leaf of the model.
fn leaf_loss(model: &TreeModel, leaf: usize, y: &Target) -> Result<f64, InferenceError> {
    Ok(loss_value(model.task(), model.leaf_params(leaf), y)?)
}

/// All `m` inner products `w_iᵀx` as one matrix-vector product.
fn inner_products(
    model: &TreeModel,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>, InferenceError> {
    if model.num_features() != x.len() {
        return Err(InferenceError::Tree(TreeError::FeatureMismatch {
            expected: model.num_features(),
            actual: x.len(),
        }));
    }
    Ok(model.w().dot(&x))
}

/// Exhaustive maximization over all `2^m` decision vectors, in lexicographic
/// order with `-1` before `+1`. Ties (within [`TIE_EPS`]) are broken by the
/// smallest leaf index, then the lexicographically smallest vector. Refuses
/// trees with more than [`BRUTE_FORCE_MAX_NODES`] internal nodes.
pub fn brute_force_loss_aug(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
) -> Result<LossAugResult, InferenceError> {
    let topology = model.topology();
    let m = topology.internal_count();
    if m > BRUTE_FORCE_MAX_NODES {
        return Err(InferenceError::TooManyNodes(m));
    }
    let s = inner_products(model, x)?;
    let mut losses = Vec::with_capacity(m + 1);
    for leaf in 1..=m + 1 {
        losses.push(leaf_loss(model, leaf, y)?);
    }

    let mut best: Option<(f64, usize, u64)> = None;
    for mask in 0u64..(1u64 << m) {
        // Bit for node i sits at position m-i, so ascending masks enumerate
        // decision vectors in lexicographic order with -1 < +1.
        let mut score = 0.0;
        let mut node = 1usize;
        for i in 1..=m {
            let g = if (mask >> (m - i)) & 1 == 1 { 1.0 } else { -1.0 };
            score += g * s[i - 1];
        }
        // Navigate by the path bits of the mask.
        while node <= m {
            let right = (mask >> (m - node)) & 1 == 1;
            node = if right { 2 * node + 1 } else { 2 * node };
        }
        let leaf = node - m;
        let value = score + losses[leaf - 1];
        let replace = match best {
            None => true,
            Some((best_value, best_leaf, _)) => {
                value > best_value + TIE_EPS
                    || ((value - best_value).abs() <= TIE_EPS && leaf < best_leaf)
                // Equal value and leaf: the earlier (lexicographically
                // smaller) vector is kept.
            }
        };
        if replace {
            best = Some((value, leaf, mask));
        }
    }
    let (value, leaf, mask) = best.expect("at least one decision vector exists");
    let bits: Vec<i8> = (1..=m)
        .map(|i| if (mask >> (m - i)) & 1 == 1 { 1 } else { -1 })
        .collect();
    let g_hat = DecisionVector::new(bits).expect("enumerated bits are ±1");
    debug_assert_eq!(navigate(topology, &g_hat).unwrap(), leaf);
    Ok(LossAugResult { g_hat, leaf, value })
}

/// Depth-first maximization core over relative leaf values.
///
/// For each leaf `j` the value relative to `sign(Wx)` is
/// `ℓ(θ_j, y) − Σ 2|s_i|` over on-path nodes whose required direction
/// disagrees with `sign(s_i)`. Returns the maximizing `(leaf, relative
/// value)`; leaves are visited in increasing order so ties keep the smallest
/// leaf index.
fn exact_core(topology: TreeTopology, s: &Array1<f64>, losses: &[f64]) -> (usize, f64) {
    let m = topology.internal_count();
    let mut best_leaf = 0usize;
    let mut best_rel = f64::NEG_INFINITY;
    // Explicit stack of (node, penalty), pushed right-then-left so leaves pop
    // in increasing order.
    let mut stack: Vec<(usize, f64)> = vec![(1, 0.0)];
    while let Some((node, penalty)) = stack.pop() {
        if node > m {
            let leaf = node - m;
            let rel = losses[leaf - 1] - penalty;
            if best_leaf == 0 || rel > best_rel + TIE_EPS {
                best_leaf = leaf;
                best_rel = rel;
            }
            continue;
        }
        let v = s[node - 1];
        let cost = 2.0 * v.abs();
        let (left_cost, right_cost) = if split_sign(v) > 0 { (cost, 0.0) } else { (0.0, cost) };
        stack.push((2 * node + 1, penalty + right_cost));
        stack.push((2 * node, penalty + left_cost));
    }
    (best_leaf, best_rel)
}

/// The on-path bits of `leaf` that disagree with `sign(s_i)`.
fn path_flips(
    topology: TreeTopology,
    s: &Array1<f64>,
    leaf: usize,
) -> Result<Vec<(usize, i8)>, InferenceError> {
    let path = path_nodes(topology, leaf)?;
    Ok(path
        .into_iter()
        .filter(|&(node, dir)| dir != split_sign(s[node - 1]))
        .collect())
}

/// Sparse exact loss-augmented inference: `O(m p̃)` products plus one DFS.
pub(crate) fn exact_sparse(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
) -> Result<SparseLossAug, InferenceError> {
    let topology = model.topology();
    let s = inner_products(model, x)?;
    let m = topology.internal_count();
    let mut losses = Vec::with_capacity(m + 1);
    for leaf in 1..=m + 1 {
        losses.push(leaf_loss(model, leaf, y)?);
    }
    let (leaf, gap) = exact_core(topology, &s, &losses);
    let flips = path_flips(topology, &s, leaf)?;
    Ok(SparseLossAug { leaf, gap, flips })
}

/// Exact loss-augmented inference.
///
/// Matches [`brute_force_loss_aug`] up to the shared tie-breaking: the
/// returned vector has the winning leaf's path directions on the path and
/// `sign(w_iᵀx)` everywhere else.
pub fn exact_loss_aug(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
) -> Result<LossAugResult, InferenceError> {
    let topology = model.topology();
    let s = inner_products(model, x)?;
    let m = topology.internal_count();
    let mut losses = Vec::with_capacity(m + 1);
    for leaf in 1..=m + 1 {
        losses.push(leaf_loss(model, leaf, y)?);
    }
    let (leaf, gap) = exact_core(topology, &s, &losses);
    let mut g_hat = DecisionVector::new(s.iter().map(|&v| split_sign(v)).collect())
        .expect("signs are ±1");
    for (node, dir) in path_nodes(topology, leaf)? {
        g_hat.set_bit(node, dir);
    }
    let total: f64 = s.iter().map(|v| v.abs()).sum();
    debug_assert_eq!(navigate(topology, &g_hat).unwrap(), leaf);
    Ok(LossAugResult { g_hat, leaf, value: total + gap })
}

/// Sparse fast loss-augmented inference over the radius-1 Hamming ball around
/// `sign(Wx)`.
///
/// Candidates are the unflipped predicted leaf and, for each of the `d`
/// on-path nodes, the leaf reached by flipping that node's decision and
/// descending the redirected subtree by sign decisions (relative value
/// `ℓ(θ_j, y) − 2|w_iᵀx|`). Flipping an off-path bit leaves the leaf
/// unchanged and can only lower the score, so those candidates are never
/// evaluated. Only `O(d²)` inner products and `O(d)` loss evaluations are
/// performed.
pub(crate) fn fast_sparse(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
) -> Result<SparseLossAug, InferenceError> {
    let topology = model.topology();
    let m = topology.internal_count();
    if model.num_features() != x.len() {
        return Err(InferenceError::Tree(TreeError::FeatureMismatch {
            expected: model.num_features(),
            actual: x.len(),
        }));
    }
    let w = model.w();

    // Descend by signs, recording the path and its inner products.
    let mut path: Vec<(usize, f64)> = Vec::with_capacity(topology.depth());
    let mut node = 1usize;
    while node <= m {
        let s = w.row(node - 1).dot(&x);
        path.push((node, s));
        node = if split_sign(s) > 0 { 2 * node + 1 } else { 2 * node };
    }
    let mut best_leaf = node - m;
    let mut best_rel = leaf_loss(model, best_leaf, y)?;
    let mut best_flip: Option<(usize, i8)> = None;

    for &(flip_node, flip_s) in &path {
        let flipped = -split_sign(flip_s);
        let mut child = if flipped > 0 { 2 * flip_node + 1 } else { 2 * flip_node };
        while child <= m {
            let s = w.row(child - 1).dot(&x);
            child = if split_sign(s) > 0 { 2 * child + 1 } else { 2 * child };
        }
        let leaf = child - m;
        let rel = leaf_loss(model, leaf, y)? - 2.0 * flip_s.abs();
        // The d+1 candidate leaves are pairwise distinct, so value-then-leaf
        // ordering fully determines the winner.
        if rel > best_rel + TIE_EPS || ((rel - best_rel).abs() <= TIE_EPS && leaf < best_leaf) {
            best_leaf = leaf;
            best_rel = rel;
            best_flip = Some((flip_node, flipped));
        }
    }
    Ok(SparseLossAug {
        leaf: best_leaf,
        gap: best_rel,
        flips: best_flip.into_iter().collect(),
    })
}

/// Fast loss-augmented inference over the radius-1 Hamming ball.
///
/// Same maximization as [`fast_sparse`]; this wrapper additionally
/// materializes the full decision vector and the absolute value, which costs
/// the `O(m p̃)` sign computation the sparse form avoids.
pub fn fast_loss_aug(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
) -> Result<LossAugResult, InferenceError> {
    let sparse = fast_sparse(model, x, y)?;
    let s = inner_products(model, x)?;
    let mut g_hat = DecisionVector::new(s.iter().map(|&v| split_sign(v)).collect())
        .expect("signs are ±1");
    for &(node, sign) in &sparse.flips {
        g_hat.set_bit(node, sign);
    }
    let total: f64 = s.iter().map(|v| v.abs()).sum();
    debug_assert_eq!(navigate(model.topology(), &g_hat).unwrap(), sparse.leaf);
    Ok(LossAugResult {
        g_hat,
        leaf: sparse.leaf,
        value: total + sparse.gap,
    })
}

/// `max hᵀWx` over decision vectors routing to leaf `a`, with the maximizing
/// vector: path bits forced to the directions of `a`, off-path bits free and
/// therefore set to `sign(w_iᵀx)`.
pub fn constrained_score(
    model: &TreeModel,
    x: ArrayView1<f64>,
    assigned_leaf: usize,
) -> Result<(DecisionVector, f64), InferenceError> {
    let topology = model.topology();
    let path = path_nodes(topology, assigned_leaf)?;
    let s = inner_products(model, x)?;
    let m = topology.internal_count();
    let mut bits = Vec::with_capacity(m);
    let mut score = 0.0;
    // Path nodes come root-first with strictly increasing indices, so a
    // single merged pass keeps the summation order identical to Σ|w_iᵀx|.
    let mut next_path = 0usize;
    for i in 1..=m {
        let v = s[i - 1];
        if next_path < path.len() && path[next_path].0 == i {
            let dir = path[next_path].1;
            next_path += 1;
            score += f64::from(dir) * v;
            bits.push(dir);
        } else {
            score += v.abs();
            bits.push(split_sign(v));
        }
    }
    let h = DecisionVector::new(bits).expect("bits are ±1");
    debug_assert_eq!(navigate(topology, &h).unwrap(), assigned_leaf);
    Ok((h, score))
}

/// `constrained_score(a) − Σ|w_iᵀx|`, computed from the `d` path products
/// only: each on-path disagreement with `sign(w_iᵀx)` contributes `−2|w_iᵀx|`.
/// Always ≤ 0.
pub(crate) fn constrained_gap(
    model: &TreeModel,
    x: ArrayView1<f64>,
    assigned_leaf: usize,
) -> Result<f64, InferenceError> {
    let topology = model.topology();
    let path = path_nodes(topology, assigned_leaf)?;
    if model.num_features() != x.len() {
        return Err(InferenceError::Tree(TreeError::FeatureMismatch {
            expected: model.num_features(),
            actual: x.len(),
        }));
    }
    let w = model.w();
    let mut gap = 0.0;
    for (node, dir) in path {
        let s = w.row(node - 1).dot(&x);
        if dir != split_sign(s) {
            gap -= 2.0 * s.abs();
        }
    }
    Ok(gap)
}

/// The surrogate bound for one example: loss-augmented value minus the
/// (possibly constrained) score maximum. Always at least the true loss
/// `ℓ(Θᵀf(sign(Wx)), y)` up to argmax tie resolution.
pub fn surrogate_per_example(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
    mode: BoundMode<'_>,
) -> Result<f64, InferenceError> {
    match mode {
        BoundMode::Exact => Ok(exact_sparse(model, x, y)?.gap),
        BoundMode::Fast => Ok(fast_sparse(model, x, y)?.gap),
        BoundMode::Ssgd(assigned) => {
            if assigned.len() != 1 {
                return Err(InferenceError::AssignmentLength {
                    expected: 1,
                    actual: assigned.len(),
                });
            }
            let gap = fast_sparse(model, x, y)?.gap;
            Ok(gap - constrained_gap(model, x, assigned[0])?)
        }
    }
}

/// `ℓ(Θᵀf(sign(Wx)), y)`: the true loss the tree incurs on one example.
pub fn example_loss(
    model: &TreeModel,
    x: ArrayView1<f64>,
    y: &Target,
) -> Result<f64, InferenceError> {
    let leaf = model.predict_leaf(x)?;
    leaf_loss(model, leaf, y)
}

/// Empirical loss `Σ ℓ(Θᵀf(sign(Wx)), y)` summed (not averaged) over the
/// dataset. Errors on an empty dataset.
pub fn empirical_loss(model: &TreeModel, data: &Dataset) -> Result<f64, InferenceError> {
    if data.is_empty() {
        return Err(InferenceError::EmptyDataset);
    }
    let mut sum = 0.0;
    for i in 0..data.len() {
        sum += example_loss(model, data.features(i), data.target(i))?;
    }
    Ok(sum)
}

/// Surrogate bound summed (not averaged) over the dataset. For
/// [`BoundMode::Ssgd`] the slice must hold one assigned leaf per example.
/// Errors on an empty dataset.
pub fn surrogate_loss(
    model: &TreeModel,
    data: &Dataset,
    mode: BoundMode<'_>,
) -> Result<f64, InferenceError> {
    if data.is_empty() {
        return Err(InferenceError::EmptyDataset);
    }
    let mut sum = 0.0;
    match mode {
        BoundMode::Exact | BoundMode::Fast => {
            for i in 0..data.len() {
                sum += surrogate_per_example(model, data.features(i), data.target(i), mode)?;
            }
        }
        BoundMode::Ssgd(assigned) => {
            if assigned.len() != data.len() {
                return Err(InferenceError::AssignmentLength {
                    expected: data.len(),
                    actual: assigned.len(),
                });
            }
            for i in 0..data.len() {
                sum += surrogate_per_example(
                    model,
                    data.features(i),
                    data.target(i),
                    BoundMode::Ssgd(&assigned[i..=i]),
                )?;
            }
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use crate::tree::{decisions, TreeTopology};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A model with uniformly random parameters in (-2, 2).
    fn random_model(
        rng: &mut ChaCha8Rng,
        depth: usize,
        num_features: usize,
        num_outputs: usize,
        task: LossKind,
    ) -> TreeModel {
        let topology = TreeTopology::new(depth).unwrap();
        let m = topology.internal_count();
        let w = Array2::from_shape_fn((m, num_features), |_| rng.random_range(-2.0..2.0));
        let theta = Array2::from_shape_fn((m + 1, num_outputs), |_| rng.random_range(-2.0..2.0));
        TreeModel::new(topology, task, w, theta).unwrap()
    }

    fn random_x(rng: &mut ChaCha8Rng, num_features: usize) -> Array1<f64> {
        Array1::from_shape_fn(num_features, |_| rng.random_range(-2.0..2.0))
    }

    fn random_target(rng: &mut ChaCha8Rng, task: LossKind, num_outputs: usize) -> Target {
        match task {
            LossKind::Log => Target::Class(rng.random_range(1..=num_outputs)),
            LossKind::Squared => Target::Vector(
                (0..num_outputs).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ),
        }
    }

    /// Independent enumeration over an arbitrary candidate set of decision
    /// vectors, applying value > leaf > lexicographic tie-breaking.
    fn enumerate_best(
        model: &TreeModel,
        x: ArrayView1<f64>,
        y: &Target,
        candidates: &[Vec<i8>],
    ) -> (Vec<i8>, usize, f64) {
        let s = model.w().dot(&x);
        let mut best: Option<(Vec<i8>, usize, f64)> = None;
        for bits in candidates {
            let score: f64 = bits
                .iter()
                .zip(s.iter())
                .map(|(&g, &v)| f64::from(g) * v)
                .sum();
            let g = DecisionVector::new(bits.clone()).unwrap();
            let leaf = navigate(model.topology(), &g).unwrap();
            let value = score + loss_value(model.task(), model.leaf_params(leaf), y).unwrap();
            let replace = match &best {
                None => true,
                Some((best_bits, best_leaf, best_value)) => {
                    value > best_value + TIE_EPS
                        || ((value - best_value).abs() <= TIE_EPS
                            && (leaf < *best_leaf
                                || (leaf == *best_leaf && bits < best_bits)))
                }
            };
            if replace {
                best = Some((bits.clone(), leaf, value));
            }
        }
        best.unwrap()
    }

    fn all_vectors(m: usize) -> Vec<Vec<i8>> {
        (0..1u32 << m)
            .map(|mask| {
                (1..=m)
                    .map(|i| if (mask >> (m - i)) & 1 == 1 { 1 } else { -1 })
                    .collect()
            })
            .collect()
    }

    /// sign(Wx) plus every single-bit flip: the radius-1 Hamming ball.
    fn ball_vectors(model: &TreeModel, x: ArrayView1<f64>) -> Vec<Vec<i8>> {
        let center = decisions(model.w(), x).unwrap();
        let mut out = vec![center.bits().to_vec()];
        for i in 0..center.len() {
            let mut flipped = center.bits().to_vec();
            flipped[i] = -flipped[i];
            out.push(flipped);
        }
        out
    }

    #[test]
    fn single_node_example_enumerates_both_leaves() {
        // w'x = 0.5; leaf losses 2 and 0.5. Candidates: -0.5 + 2 = 1.5 and
        // 0.5 + 0.5 = 1.0, so the maximizer goes left.
        let topology = TreeTopology::new(1).unwrap();
        let w = array![[0.5]];
        let theta = array![[0.0, 0.0], [0.5, 0.5]];
        let model = TreeModel::new(topology, LossKind::Squared, w, theta).unwrap();
        let x = array![1.0];
        let y = Target::Vector(vec![1.0, 1.0]);

        for result in [
            brute_force_loss_aug(&model, x.view(), &y).unwrap(),
            exact_loss_aug(&model, x.view(), &y).unwrap(),
            fast_loss_aug(&model, x.view(), &y).unwrap(),
        ] {
            assert_eq!(result.g_hat.bits(), &[-1]);
            assert_eq!(result.leaf, 1);
            assert_abs_diff_eq!(result.value, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_loss_makes_the_sign_vector_optimal() {
        // Squared loss with every leaf parameter equal to the target: the
        // loss term vanishes, so the maximizer is sign(Wx) with value Σ|s_i|.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let depth = rng.random_range(1..=3);
            let p = rng.random_range(1..=4);
            let topology = TreeTopology::new(depth).unwrap();
            let m = topology.internal_count();
            let w = Array2::from_shape_fn((m, p), |_| rng.random_range(-2.0..2.0));
            let y = vec![0.25, -1.5];
            let theta = Array2::from_shape_fn((m + 1, 2), |(_, j)| y[j]);
            let model = TreeModel::new(topology, LossKind::Squared, w, theta).unwrap();
            let x = random_x(&mut rng, p);
            let target = Target::Vector(y);

            let result = brute_force_loss_aug(&model, x.view(), &target).unwrap();
            let expected = decisions(model.w(), x.view()).unwrap();
            assert_eq!(result.g_hat, expected);
            let total: f64 = model.w().dot(&x).iter().map(|v| v.abs()).sum();
            assert_abs_diff_eq!(result.value, total, epsilon = 1e-12);

            let exact = exact_loss_aug(&model, x.view(), &target).unwrap();
            assert_eq!(exact.leaf, model.predict_leaf(x.view()).unwrap());
        }
    }

    #[test]
    fn equal_leaf_losses_select_the_predicted_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let depth = rng.random_range(1..=4);
            let topology = TreeTopology::new(depth).unwrap();
            let m = topology.internal_count();
            let w = Array2::from_shape_fn((m, 3), |_| rng.random_range(-2.0..2.0));
            let row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta = Array2::from_shape_fn((m + 1, 3), |(_, j)| row[j]);
            let model = TreeModel::new(topology, LossKind::Log, w, theta).unwrap();
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=3));

            let exact = exact_loss_aug(&model, x.view(), &y).unwrap();
            assert_eq!(exact.leaf, model.predict_leaf(x.view()).unwrap());
        }
    }

    #[test]
    fn exact_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for round in 0..1000 {
            let depth = 1 + round % 3;
            let task = if round % 2 == 0 { LossKind::Log } else { LossKind::Squared };
            let p = rng.random_range(1..=5);
            let k = rng.random_range(2..=3);
            let model = random_model(&mut rng, depth, p, k, task);
            let x = random_x(&mut rng, p);
            let y = random_target(&mut rng, task, k);

            let brute = brute_force_loss_aug(&model, x.view(), &y).unwrap();
            let exact = exact_loss_aug(&model, x.view(), &y).unwrap();
            assert_eq!(exact.leaf, brute.leaf, "round {round}");
            assert_abs_diff_eq!(exact.value, brute.value, epsilon = 1e-9);
            assert_eq!(exact.g_hat, brute.g_hat, "round {round}");
        }
    }

    #[test]
    fn brute_force_matches_independent_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..200 {
            let model = random_model(&mut rng, 3, 2, 2, LossKind::Log);
            let x = random_x(&mut rng, 2);
            let y = Target::Class(rng.random_range(1..=2));
            let (bits, leaf, value) =
                enumerate_best(&model, x.view(), &y, &all_vectors(7));
            let brute = brute_force_loss_aug(&model, x.view(), &y).unwrap();
            assert_eq!(brute.g_hat.bits(), &bits[..]);
            assert_eq!(brute.leaf, leaf);
            assert_abs_diff_eq!(brute.value, value, epsilon = 1e-9);
        }
    }

    #[test]
    fn fast_matches_ball_restricted_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for round in 0..1000 {
            let depth = 2 + round % 2;
            let task = if round % 2 == 0 { LossKind::Log } else { LossKind::Squared };
            let p = rng.random_range(1..=5);
            let k = rng.random_range(2..=3);
            let model = random_model(&mut rng, depth, p, k, task);
            let x = random_x(&mut rng, p);
            let y = random_target(&mut rng, task, k);

            let candidates = ball_vectors(&model, x.view());
            let (_, leaf, value) = enumerate_best(&model, x.view(), &y, &candidates);
            let fast = fast_loss_aug(&model, x.view(), &y).unwrap();
            assert_eq!(fast.leaf, leaf, "round {round}");
            assert_abs_diff_eq!(fast.value, value, epsilon = 1e-9);
        }
    }

    #[test]
    fn depth_one_fast_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..200 {
            let model = random_model(&mut rng, 1, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));
            let fast = fast_loss_aug(&model, x.view(), &y).unwrap();
            let exact = exact_loss_aug(&model, x.view(), &y).unwrap();
            assert_eq!(fast.leaf, exact.leaf);
            assert_eq!(fast.g_hat, exact.g_hat);
            assert_abs_diff_eq!(fast.value, exact.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn fast_value_never_exceeds_exact_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for round in 0..500 {
            let depth = 2 + round % 3;
            let model = random_model(&mut rng, depth, 4, 2, LossKind::Log);
            let x = random_x(&mut rng, 4);
            let y = Target::Class(rng.random_range(1..=2));
            let fast = fast_loss_aug(&model, x.view(), &y).unwrap();
            let exact = exact_loss_aug(&model, x.view(), &y).unwrap();
            assert!(
                fast.value <= exact.value + 1e-9,
                "round {round}: fast {} > exact {}",
                fast.value,
                exact.value
            );
        }
    }

    #[test]
    fn sparse_forms_agree_with_materialized_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for round in 0..300 {
            let depth = 1 + round % 4;
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));
            let s = model.w().dot(&x);
            let total: f64 = s.iter().map(|v| v.abs()).sum();

            let exact = exact_loss_aug(&model, x.view(), &y).unwrap();
            let exact_sp = exact_sparse(&model, x.view(), &y).unwrap();
            assert_eq!(exact_sp.leaf, exact.leaf);
            assert_abs_diff_eq!(total + exact_sp.gap, exact.value, epsilon = 1e-9);
            assert!(exact_sp.flips.len() <= depth);
            // Applying the flips to sign(Wx) reproduces the full maximizer.
            let mut rebuilt = decisions(model.w(), x.view()).unwrap();
            for &(node, sign) in &exact_sp.flips {
                rebuilt.set_bit(node, sign);
            }
            assert_eq!(rebuilt, exact.g_hat);

            let fast = fast_loss_aug(&model, x.view(), &y).unwrap();
            let fast_sp = fast_sparse(&model, x.view(), &y).unwrap();
            assert_eq!(fast_sp.leaf, fast.leaf);
            assert_abs_diff_eq!(total + fast_sp.gap, fast.value, epsilon = 1e-9);
            assert!(fast_sp.flips.len() <= 1);
        }
    }

    #[test]
    fn constrained_score_attains_the_maximum_at_the_predicted_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..200 {
            let depth = rng.random_range(1..=4);
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let total: f64 = model.w().dot(&x).iter().map(|v| v.abs()).sum();
            let predicted = model.predict_leaf(x.view()).unwrap();

            let (h, score) = constrained_score(&model, x.view(), predicted).unwrap();
            assert_eq!(navigate(model.topology(), &h).unwrap(), predicted);
            assert_eq!(score, total, "unconstrained maximum must be attained exactly");

            for leaf in 1..=model.topology().leaf_count() {
                let (h, score) = constrained_score(&model, x.view(), leaf).unwrap();
                assert_eq!(navigate(model.topology(), &h).unwrap(), leaf);
                assert!(score <= total, "leaf {leaf}: {score} > {total}");
                let gap = constrained_gap(&model, x.view(), leaf).unwrap();
                assert!(gap <= 0.0);
                assert_abs_diff_eq!(total + gap, score, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constrained_score_matches_enumeration_at_depth_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..100 {
            let model = random_model(&mut rng, 2, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let s = model.w().dot(&x);
            for leaf in 1..=4 {
                let (_, score) = constrained_score(&model, x.view(), leaf).unwrap();
                // Enumerate every decision vector routing to this leaf.
                let best = all_vectors(3)
                    .into_iter()
                    .filter(|bits| {
                        let g = DecisionVector::new(bits.clone()).unwrap();
                        navigate(model.topology(), &g).unwrap() == leaf
                    })
                    .map(|bits| {
                        bits.iter()
                            .zip(s.iter())
                            .map(|(&g, &v)| f64::from(g) * v)
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_abs_diff_eq!(score, best, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn surrogate_dominates_the_true_loss_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for round in 0..500 {
            let depth = 1 + round % 4;
            let task = if round % 2 == 0 { LossKind::Log } else { LossKind::Squared };
            let k = rng.random_range(2..=3);
            let model = random_model(&mut rng, depth, 3, k, task);
            let x = random_x(&mut rng, 3);
            let y = random_target(&mut rng, task, k);
            let truth = example_loss(&model, x.view(), &y).unwrap();

            for mode in [BoundMode::Exact, BoundMode::Fast] {
                let bound = surrogate_per_example(&model, x.view(), &y, mode).unwrap();
                // Argmax ties within TIE_EPS may settle on a nearby leaf.
                assert!(bound >= truth - TIE_EPS, "round {round}: {bound} < {truth}");
            }
            let assigned = rng.random_range(1..=model.topology().leaf_count());
            let bound =
                surrogate_per_example(&model, x.view(), &y, BoundMode::Ssgd(&[assigned]))
                    .unwrap();
            assert!(bound >= truth - TIE_EPS, "round {round} (assigned {assigned})");
        }
    }

    #[test]
    fn stable_bound_dominates_the_fast_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for round in 0..500 {
            let depth = 1 + round % 4;
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));
            let fast = surrogate_per_example(&model, x.view(), &y, BoundMode::Fast).unwrap();
            let assigned = rng.random_range(1..=model.topology().leaf_count());
            let stable =
                surrogate_per_example(&model, x.view(), &y, BoundMode::Ssgd(&[assigned]))
                    .unwrap();
            assert!(
                stable >= fast,
                "round {round}: stable {stable} < fast {fast} (assigned {assigned})"
            );
        }
    }

    #[test]
    fn bound_tightens_as_the_split_weights_grow() {
        // Scaling W by a larger constant can only lower the bound (the loss
        // term's influence shrinks relative to the score margins).
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for round in 0..200 {
            let depth = 1 + round % 3;
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));

            let beta = rng.random_range(0.1..1.0);
            let alpha = beta + rng.random_range(0.1..2.0);
            let scale = |factor: f64| {
                TreeModel::new(
                    model.topology(),
                    model.task(),
                    model.w() * factor,
                    model.theta().clone(),
                )
                .unwrap()
            };
            let larger =
                surrogate_per_example(&scale(alpha), x.view(), &y, BoundMode::Exact).unwrap();
            let smaller =
                surrogate_per_example(&scale(beta), x.view(), &y, BoundMode::Exact).unwrap();
            assert!(
                larger <= smaller + 1e-9,
                "round {round}: alpha {alpha} gives {larger}, beta {beta} gives {smaller}"
            );
        }
    }

    #[test]
    fn dataset_sums_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut data = crate::data::make_random_dense(20, 3, 2, 17);
        data.augment().unwrap();
        let model = random_model(&mut rng, 2, 4, 2, LossKind::Log);

        // Single example: dataset ops equal the per-example ops.
        let one = data.subset(&[0]);
        assert_eq!(
            empirical_loss(&model, &one).unwrap(),
            example_loss(&model, one.features(0), one.target(0)).unwrap()
        );
        assert_eq!(
            surrogate_loss(&model, &one, BoundMode::Fast).unwrap(),
            surrogate_per_example(&model, one.features(0), one.target(0), BoundMode::Fast)
                .unwrap()
        );

        // Duplication doubles the sums (up to summation-order rounding).
        let doubled = data.concat(&data).unwrap();
        assert_abs_diff_eq!(
            empirical_loss(&model, &doubled).unwrap(),
            2.0 * empirical_loss(&model, &data).unwrap(),
            epsilon = 1e-9
        );
        for mode in [BoundMode::Exact, BoundMode::Fast] {
            assert_abs_diff_eq!(
                surrogate_loss(&model, &doubled, mode).unwrap(),
                2.0 * surrogate_loss(&model, &data, mode).unwrap(),
                epsilon = 1e-9
            );
        }

        // The summed surrogate dominates the summed loss.
        let truth = empirical_loss(&model, &data).unwrap();
        for mode in [BoundMode::Exact, BoundMode::Fast] {
            assert!(surrogate_loss(&model, &data, mode).unwrap() >= truth - 1e-9);
        }
        let assigned: Vec<usize> = (0..data.len())
            .map(|i| model.predict_leaf(data.features(i)).unwrap())
            .collect();
        assert!(
            surrogate_loss(&model, &data, BoundMode::Ssgd(&assigned)).unwrap() >= truth - 1e-9
        );
    }

    #[test]
    fn empty_dataset_and_bad_assignments_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let model = random_model(&mut rng, 2, 3, 2, LossKind::Log);
        let data = crate::data::make_random_dense(5, 3, 2, 0);
        let empty = data.subset(&[]);
        assert!(matches!(
            empirical_loss(&model, &empty),
            Err(InferenceError::EmptyDataset)
        ));
        assert!(matches!(
            surrogate_loss(&model, &empty, BoundMode::Exact),
            Err(InferenceError::EmptyDataset)
        ));
        assert!(matches!(
            surrogate_loss(&model, &data, BoundMode::Ssgd(&[1, 2])),
            Err(InferenceError::AssignmentLength { expected: 5, actual: 2 })
        ));
        let x = data.features(0);
        assert!(matches!(
            surrogate_per_example(&model, x, &Target::Class(1), BoundMode::Ssgd(&[1, 2])),
            Err(InferenceError::AssignmentLength { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn brute_force_refuses_large_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = random_model(&mut rng, 5, 2, 2, LossKind::Log);
        let x = random_x(&mut rng, 2);
        assert!(matches!(
            brute_force_loss_aug(&model, x.view(), &Target::Class(1)),
            Err(InferenceError::TooManyNodes(31))
        ));
    }

    #[test]
    fn feature_mismatch_is_rejected_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = random_model(&mut rng, 2, 3, 2, LossKind::Log);
        let x = array![1.0, 2.0];
        let y = Target::Class(1);
        assert!(brute_force_loss_aug(&model, x.view(), &y).is_err());
        assert!(exact_loss_aug(&model, x.view(), &y).is_err());
        assert!(fast_loss_aug(&model, x.view(), &y).is_err());
        assert!(constrained_score(&model, x.view(), 1).is_err());
        assert!(surrogate_per_example(&model, x.view(), &y, BoundMode::Fast).is_err());
        // Out-of-range assigned leaf.
        let x3 = array![1.0, 2.0, 3.0];
        assert!(constrained_score(&model, x3.view(), 9).is_err());
    }

    #[test]
    fn results_navigate_to_their_reported_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        for round in 0..200 {
            let depth = 1 + round % 3;
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));
            for result in [
                brute_force_loss_aug(&model, x.view(), &y).unwrap(),
                exact_loss_aug(&model, x.view(), &y).unwrap(),
                fast_loss_aug(&model, x.view(), &y).unwrap(),
            ] {
                assert_eq!(navigate(model.topology(), &result.g_hat).unwrap(), result.leaf);
                assert!(result.value.is_finite());
            }
        }
    }

    #[test]
    fn exact_runtime_grows_faster_than_fast_runtime() {
        // Exact inference touches all 2^d - 1 nodes; the fast variant touches
        // O(d²) of them. The ratio of their runtimes must grow with depth.
        let p = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = random_x(&mut rng, p);
        let y = Target::Class(1);
        let mut ratios = Vec::new();
        for &depth in &[8usize, 12] {
            let model = random_model(&mut rng, depth, p, 2, LossKind::Log);
            let reps = 60;
            let start = std::time::Instant::now();
            for _ in 0..reps {
                std::hint::black_box(exact_sparse(&model, x.view(), &y).unwrap());
            }
            let exact_time = start.elapsed().as_secs_f64();
            let start = std::time::Instant::now();
            for _ in 0..reps {
                std::hint::black_box(fast_sparse(&model, x.view(), &y).unwrap());
            }
            let fast_time = start.elapsed().as_secs_f64();
            ratios.push(exact_time / fast_time.max(1e-12));
        }
        assert!(
            ratios[1] > ratios[0],
            "exact/fast runtime ratio should grow with depth: {ratios:?}"
        );
    }

    proptest! {
        #[test]
        fn prop_exact_equals_brute_force(
            depth in 1usize..=3,
            seed in 0u64..1_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));
            let brute = brute_force_loss_aug(&model, x.view(), &y).unwrap();
            let exact = exact_loss_aug(&model, x.view(), &y).unwrap();
            prop_assert_eq!(exact.leaf, brute.leaf);
            prop_assert!((exact.value - brute.value).abs() <= 1e-9);
        }

        #[test]
        fn prop_surrogate_bounds_the_loss(
            depth in 1usize..=4,
            seed in 0u64..1_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, depth, 3, 2, LossKind::Log);
            let x = random_x(&mut rng, 3);
            let y = Target::Class(rng.random_range(1..=2));
            let truth = example_loss(&model, x.view(), &y).unwrap();
            for mode in [BoundMode::Exact, BoundMode::Fast] {
                let bound = surrogate_per_example(&model, x.view(), &y, mode).unwrap();
                prop_assert!(bound >= truth - TIE_EPS);
            }
        }
    }
}
