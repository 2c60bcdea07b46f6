//! Greedy tree construction used for baselines and initialization: axis-
//! aligned information-gain trees, random-hyperplane oblique trees, and a
//! greedy per-node refinement that optimizes the depth-1 surrogate bound one
//! internal node at a time.
//!
//! All builders expect an augmented dataset (constant `-1` feature appended)
//! so that axis thresholds embed as oblique rows: the split `x_f > t` becomes
//! the row with `1` in slot `f`, `t` in the constant slot, and zeros
//! elsewhere, giving `w·x̃ = x_f − t`.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::Dataset;
use crate::loss::LossKind;
use crate::optimizer::{train_sgd, Algorithm, OptimizerConfig, OptimizerError};
use crate::tree::{split_sign, TreeError, TreeModel, TreeTopology};

/// Errors from greedy construction.
#[derive(Debug, Error)]
pub enum GreedyError {
    #[error("dataset has no examples")]
    EmptyDataset,
    #[error("greedy construction requires class labels")]
    NotClassification,
    #[error("dataset must be augmented with the constant feature first")]
    NotAugmented,
    #[error("cannot split two empty label sets")]
    BothSidesEmpty,
    #[error("feature index {feature} outside 1..={max}")]
    FeatureOutOfRange { feature: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

/// An axis-aligned split: go right iff `x_feature > threshold` (1-based
/// feature index into the raw, pre-augmentation features).
#[derive(Debug, Clone, PartialEq)]
pub struct AxisSplit {
    pub feature: usize,
    pub threshold: f64,
}

/// Early-stop rules shared by the greedy builders.
#[derive(Debug, Clone)]
pub struct GreedyStops {
    /// Nodes with fewer examples than this become leaves.
    pub min_examples: usize,
}

impl Default for GreedyStops {
    fn default() -> Self {
        GreedyStops { min_examples: 2 }
    }
}

/// Base-2 entropy of a label multiset.
fn entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max];
    for &label in labels {
        counts[label - 1] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Information gain of splitting the combined label set into `left | right`:
/// `H(parent) − (n_L/n)H(left) − (n_R/n)H(right)`, base-2 entropy.
pub fn info_gain(left: &[usize], right: &[usize]) -> Result<f64, GreedyError> {
    let n = left.len() + right.len();
    if n == 0 {
        return Err(GreedyError::BothSidesEmpty);
    }
    let mut parent = Vec::with_capacity(n);
    parent.extend_from_slice(left);
    parent.extend_from_slice(right);
    let n = n as f64;
    Ok(entropy(&parent)
        - (left.len() as f64 / n) * entropy(left)
        - (right.len() as f64 / n) * entropy(right))
}

/// Embeds an axis split into an oblique weight row of the given (augmented)
/// width: slot `feature` gets 1, the constant slot gets the threshold, and
/// the row is rescaled onto the norm ball `‖w‖² ≤ ν` if it exceeds it. The
/// sign of `w·x̃` then matches the sign of `x_f − t` whenever `x_f ≠ t`.
pub fn axis_split_row(
    split: &AxisSplit,
    width: usize,
    nu: f64,
) -> Result<Array1<f64>, GreedyError> {
    if split.feature == 0 || split.feature >= width {
        return Err(GreedyError::FeatureOutOfRange {
            feature: split.feature,
            max: width.saturating_sub(1),
        });
    }
    if !split.threshold.is_finite() {
        return Err(GreedyError::InvalidParameter(format!(
            "threshold {} is not finite",
            split.threshold
        )));
    }
    if !nu.is_finite() || nu <= 0.0 {
        return Err(GreedyError::InvalidParameter(format!(
            "nu must be positive and finite, got {nu}"
        )));
    }
    let mut row = Array1::zeros(width);
    row[split.feature - 1] = 1.0;
    row[width - 1] = split.threshold;
    let sq_norm = 1.0 + split.threshold * split.threshold;
    if sq_norm > nu {
        let scale = (nu / sq_norm).sqrt();
        row.mapv_inplace(|v| v * scale);
    }
    Ok(row)
}

/// `log((c_l + 1)/(n + k))` per class: Laplace-smoothed log frequencies.
/// With no examples every class gets `log(1/k)` — a uniform distribution.
fn laplace_log_frequencies(counts: &[usize], total: usize) -> Vec<f64> {
    let k = counts.len();
    counts
        .iter()
        .map(|&c| ((c + 1) as f64 / (total + k) as f64).ln())
        .collect()
}

fn class_counts(data: &Dataset, indices: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[data.class(i).expect("classification dataset") - 1] += 1;
    }
    counts
}

fn labels_of(data: &Dataset, indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .map(|&i| data.class(i).expect("classification dataset"))
        .collect()
}

fn is_pure(data: &Dataset, indices: &[usize]) -> bool {
    indices
        .windows(2)
        .all(|pair| data.class(pair[0]) == data.class(pair[1]))
}

fn check_greedy_inputs(data: &Dataset, depth: usize) -> Result<TreeTopology, GreedyError> {
    if data.is_empty() {
        return Err(GreedyError::EmptyDataset);
    }
    if !data.is_classification() {
        return Err(GreedyError::NotClassification);
    }
    if !data.is_augmented() {
        return Err(GreedyError::NotAugmented);
    }
    Ok(TreeTopology::new(depth)?)
}

/// Fills the whole subtree under `node` with zero split rows (routing
/// everything right) and one shared leaf parameter row.
fn pad_subtree(model: &mut TreeModel, node: usize, theta_row: &[f64]) {
    let m = model.topology().internal_count();
    if node > m {
        for (j, &v) in theta_row.iter().enumerate() {
            model.theta_mut()[[node - m - 1, j]] = v;
        }
        return;
    }
    // Split rows under a padded subtree stay zero: sign(0) = +1 routes right.
    pad_subtree(model, 2 * node, theta_row);
    pad_subtree(model, 2 * node + 1, theta_row);
}

/// The best axis split for a cohort: maximizes information gain over all
/// features and midpoint thresholds between consecutive distinct values; ties
/// pick the smallest feature, then the smallest threshold.
fn best_axis_split(data: &Dataset, indices: &[usize]) -> Option<(AxisSplit, f64)> {
    let labels = labels_of(data, indices);
    let mut best: Option<(AxisSplit, f64)> = None;
    for feature in 1..=data.num_raw_features() {
        let mut values: Vec<f64> = indices
            .iter()
            .map(|&i| data.features(i)[feature - 1])
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("features are finite"));
        values.dedup();
        for pair in values.windows(2) {
            let threshold = (pair[0] + pair[1]) / 2.0;
            let (mut left, mut right) = (Vec::new(), Vec::new());
            for (pos, &i) in indices.iter().enumerate() {
                if data.features(i)[feature - 1] > threshold {
                    right.push(labels[pos]);
                } else {
                    left.push(labels[pos]);
                }
            }
            let gain = info_gain(&left, &right).expect("cohort is nonempty");
            let replace = match &best {
                None => true,
                Some((_, best_gain)) => gain > *best_gain,
            };
            if replace {
                best = Some((AxisSplit { feature, threshold }, gain));
            }
        }
    }
    best
}

fn grow_axis(
    model: &mut TreeModel,
    data: &Dataset,
    indices: &[usize],
    node: usize,
    nu: f64,
    stops: &GreedyStops,
) -> Result<(), GreedyError> {
    let m = model.topology().internal_count();
    let k = model.num_outputs();
    let theta_row = laplace_log_frequencies(&class_counts(data, indices, k), indices.len());
    if node > m {
        pad_subtree(model, node, &theta_row);
        return Ok(());
    }
    if indices.len() < stops.min_examples || is_pure(data, indices) {
        pad_subtree(model, node, &theta_row);
        return Ok(());
    }
    let Some((split, _)) = best_axis_split(data, indices) else {
        pad_subtree(model, node, &theta_row);
        return Ok(());
    };
    let row = axis_split_row(&split, model.num_features(), nu)?;
    for (j, &v) in row.iter().enumerate() {
        model.w_mut()[[node - 1, j]] = v;
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &i in indices {
        if data.features(i)[split.feature - 1] > split.threshold {
            right.push(i);
        } else {
            left.push(i);
        }
    }
    grow_axis(model, data, &left, 2 * node, nu, stops)?;
    grow_axis(model, data, &right, 2 * node + 1, nu, stops)
}

/// Builds a complete depth-`d` tree of axis-aligned information-gain splits,
/// embedded as oblique rows. Branches that stop early (pure cohorts, too few
/// examples, or no distinct values left) are padded to full depth with
/// zero-weight splits and a replicated leaf distribution. Leaf parameters are
/// Laplace-smoothed log class frequencies.
pub fn build_axis_aligned(
    data: &Dataset,
    depth: usize,
    nu: f64,
) -> Result<TreeModel, GreedyError> {
    build_axis_aligned_with(data, depth, nu, &GreedyStops::default())
}

/// [`build_axis_aligned`] with explicit early-stop rules.
pub fn build_axis_aligned_with(
    data: &Dataset,
    depth: usize,
    nu: f64,
    stops: &GreedyStops,
) -> Result<TreeModel, GreedyError> {
    let topology = check_greedy_inputs(data, depth)?;
    let mut model = TreeModel::zeroed(
        topology,
        LossKind::Log,
        data.width(),
        data.num_outputs(),
    );
    let indices: Vec<usize> = (0..data.len()).collect();
    grow_axis(&mut model, data, &indices, 1, nu, stops)?;
    Ok(model)
}

/// Samples candidate oblique rows: standard-normal entries in every slot
/// (including the constant one), rescaled to norm `√ν`.
pub(crate) fn sample_oblique_candidates(
    rng: &mut ChaCha8Rng,
    trials: usize,
    width: usize,
    nu: f64,
) -> Vec<Array1<f64>> {
    (0..trials)
        .map(|_| {
            let mut row =
                Array1::from_shape_fn(width, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                let scale = nu.sqrt() / norm;
                row.mapv_inplace(|v| v * scale);
            }
            row
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn grow_random(
    model: &mut TreeModel,
    data: &Dataset,
    indices: &[usize],
    node: usize,
    trials: usize,
    nu: f64,
    stops: &GreedyStops,
    rng: &mut ChaCha8Rng,
) -> Result<(), GreedyError> {
    let m = model.topology().internal_count();
    let k = model.num_outputs();
    let theta_row = laplace_log_frequencies(&class_counts(data, indices, k), indices.len());
    if node > m {
        pad_subtree(model, node, &theta_row);
        return Ok(());
    }
    if indices.len() < stops.min_examples || is_pure(data, indices) {
        pad_subtree(model, node, &theta_row);
        return Ok(());
    }
    let labels = labels_of(data, indices);
    let candidates = sample_oblique_candidates(rng, trials, model.num_features(), nu);
    let mut best: Option<(usize, f64)> = None;
    for (c, row) in candidates.iter().enumerate() {
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (pos, &i) in indices.iter().enumerate() {
            if split_sign(row.dot(&data.features(i))) > 0 {
                right.push(labels[pos]);
            } else {
                left.push(labels[pos]);
            }
        }
        let gain = info_gain(&left, &right)?;
        let replace = match best {
            None => true,
            Some((_, best_gain)) => gain > best_gain,
        };
        if replace {
            best = Some((c, gain));
        }
    }
    let (chosen, _) = best.expect("at least one candidate was sampled");
    let row = &candidates[chosen];
    for (j, &v) in row.iter().enumerate() {
        model.w_mut()[[node - 1, j]] = v;
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &i in indices {
        if split_sign(row.dot(&data.features(i))) > 0 {
            right.push(i);
        } else {
            left.push(i);
        }
    }
    // Recurse pre-order (node, left subtree, right subtree); random draws
    // follow the same order, so a fixed seed fixes the whole tree.
    grow_random(model, data, &left, 2 * node, trials, nu, stops, rng)?;
    grow_random(model, data, &right, 2 * node + 1, trials, nu, stops, rng)
}

/// Builds a complete oblique tree by sampling `trials_per_node` random
/// hyperplanes per node and keeping the information-gain maximizer.
pub fn build_random_oblique(
    data: &Dataset,
    depth: usize,
    trials_per_node: usize,
    nu: f64,
    seed: u64,
) -> Result<TreeModel, GreedyError> {
    if trials_per_node == 0 {
        return Err(GreedyError::InvalidParameter(
            "trials_per_node must be at least 1".to_string(),
        ));
    }
    if !nu.is_finite() || nu <= 0.0 {
        return Err(GreedyError::InvalidParameter(format!(
            "nu must be positive and finite, got {nu}"
        )));
    }
    let topology = check_greedy_inputs(data, depth)?;
    let mut model = TreeModel::zeroed(
        topology,
        LossKind::Log,
        data.width(),
        data.num_outputs(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = (0..data.len()).collect();
    let stops = GreedyStops::default();
    grow_random(&mut model, data, &indices, 1, trials_per_node, nu, &stops, &mut rng)?;
    Ok(model)
}

/// Greedy per-node refinement: visits internal nodes breadth-first; at each
/// node, trains a depth-1 submodel on the cohort currently routed there —
/// split row = the node's current row, pseudo-leaf parameters = Laplace log
/// frequencies of the examples each child subtree currently receives — with
/// the standard SGD loop, then writes the refined row back and re-routes the
/// cohort. Nodes with no routed examples are left unchanged. Finally every
/// leaf's parameters are refreshed from the resulting routing.
///
/// The submodel SGD run for node `i` uses `config` with the seed offset by
/// `i`, so per-node runs draw independent but reproducible shuffles.
pub fn co2_refine(
    model: &TreeModel,
    data: &Dataset,
    config: &OptimizerConfig,
) -> Result<TreeModel, GreedyError> {
    config.validate()?;
    if data.is_empty() {
        return Err(GreedyError::EmptyDataset);
    }
    if !data.is_classification() {
        return Err(GreedyError::NotClassification);
    }
    let topology = model.topology();
    let m = topology.internal_count();
    let k = model.num_outputs();
    let width = model.num_features();
    if width != data.width() {
        return Err(GreedyError::Tree(TreeError::FeatureMismatch {
            expected: width,
            actual: data.width(),
        }));
    }

    let mut refined = model.clone();
    // cohorts[h] = examples currently routed through heap index h; children
    // are filled as their parent is processed, so heap order (= breadth-first
    // order) always sees a finished cohort.
    let mut cohorts: Vec<Vec<usize>> = vec![Vec::new(); 2 * m + 2];
    cohorts[1] = (0..data.len()).collect();

    for node in 1..=m {
        let cohort = std::mem::take(&mut cohorts[node]);
        if cohort.is_empty() {
            // No data reaches this node; nothing to refine and both child
            // cohorts stay empty.
            continue;
        }

        // Pseudo-leaf targets: log class frequencies of what each child
        // subtree receives under the current row.
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &cohort {
            let s = refined.w().row(node - 1).dot(&data.features(i));
            if split_sign(s) > 0 {
                right.push(i);
            } else {
                left.push(i);
            }
        }
        let theta_left = laplace_log_frequencies(&class_counts(data, &left, k), left.len());
        let theta_right =
            laplace_log_frequencies(&class_counts(data, &right, k), right.len());

        let sub_topology = TreeTopology::new(1)?;
        let mut sub_w = ndarray::Array2::zeros((1, width));
        sub_w.row_mut(0).assign(&refined.w().row(node - 1));
        let mut sub_theta = ndarray::Array2::zeros((2, k));
        for j in 0..k {
            sub_theta[[0, j]] = theta_left[j];
            sub_theta[[1, j]] = theta_right[j];
        }
        let submodel = TreeModel::new(sub_topology, LossKind::Log, sub_w, sub_theta)?;
        let sub_config = OptimizerConfig {
            algorithm: Algorithm::Sgd,
            seed: config.seed.wrapping_add(node as u64),
            ..config.clone()
        };
        let cohort_data = data.subset(&cohort);
        let (trained, _) = train_sgd(&cohort_data, None, &sub_config, &submodel)?;
        for j in 0..width {
            refined.w_mut()[[node - 1, j]] = trained.w()[[0, j]];
        }

        // Re-route the cohort through the refined row.
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &cohort {
            let s = refined.w().row(node - 1).dot(&data.features(i));
            if split_sign(s) > 0 {
                right.push(i);
            } else {
                left.push(i);
            }
        }
        cohorts[2 * node] = left;
        cohorts[2 * node + 1] = right;
    }

    // Leaf heap index m + j received its cohort when its parent was
    // processed; refresh every leaf from the final routing.
    for leaf in 1..=m + 1 {
        let cohort = &cohorts[m + leaf];
        let theta_row = laplace_log_frequencies(&class_counts(data, cohort, k), cohort.len());
        for (j, &v) in theta_row.iter().enumerate() {
            refined.theta_mut()[[leaf - 1, j]] = v;
        }
    }
    Ok(refined)
}
