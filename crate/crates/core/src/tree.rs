//! Complete binary tree topology, oblique split parameters, navigation and
//! prediction.
//!
//! Internal nodes are numbered `1..=m` in heap order: the children of node
//! `i` are `2i` (left) and `2i + 1` (right). Heap indices above `m` are
//! leaves; leaf `j ∈ 1..=m+1` sits at heap index `m + j`. A tree of depth
//! `d` has `m = 2^d - 1` internal nodes and every root-to-leaf path crosses
//! exactly `d` of them.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::loss::LossKind;

/// Largest supported tree depth (`2^25 - 1` internal nodes is already far
/// beyond anything the trainer can hold in memory).
pub const MAX_DEPTH: usize = 25;

/// Shared sign convention: `sign(0) = +1`.
///
/// Every module (navigation, inference, bound evaluation) must agree on the
/// sign of a zero activation, otherwise a data point sitting exactly on a
/// hyperplane would be routed differently by different code paths.
#[inline]
pub fn split_sign(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree depth must be in 1..={MAX_DEPTH}, got {0}")]
    DepthOutOfRange(usize),
    #[error("decision vector has {actual} bits, topology requires {expected}")]
    BitLengthMismatch { expected: usize, actual: usize },
    #[error("input has {actual} features, split matrix expects {expected}")]
    FeatureMismatch { expected: usize, actual: usize },
    #[error("leaf index {leaf} out of range 1..={leaf_count}")]
    LeafOutOfRange { leaf: usize, leaf_count: usize },
    #[error("decision bit at position {index} is {value}, must be -1 or +1")]
    InvalidBit { index: usize, value: i8 },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
    #[error("{what}: expected {expected} rows, got {actual}")]
    RowCountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// Shape of a complete binary tree of a given depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeTopology {
    depth: usize,
}

impl TreeTopology {
    pub fn new(depth: usize) -> Result<Self, TreeError> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(TreeError::DepthOutOfRange(depth));
        }
        Ok(TreeTopology { depth })
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of internal (split) nodes, `m = 2^d - 1`.
    #[inline]
    pub fn internal_count(&self) -> usize {
        (1usize << self.depth) - 1
    }

    /// Number of leaves, `m + 1`.
    #[inline]
    pub fn leaf_count(&self) -> usize {
        1usize << self.depth
    }

    /// Heap index of leaf `j` (1-based).
    #[inline]
    pub fn leaf_heap_index(&self, leaf: usize) -> usize {
        self.internal_count() + leaf
    }

    /// One-hot indicator over the `m + 1` leaves.
    pub fn leaf_indicator(&self, leaf: usize) -> Result<Array1<f64>, TreeError> {
        self.check_leaf(leaf)?;
        let mut ind = Array1::zeros(self.leaf_count());
        ind[leaf - 1] = 1.0;
        Ok(ind)
    }

    fn check_leaf(&self, leaf: usize) -> Result<(), TreeError> {
        if leaf == 0 || leaf > self.leaf_count() {
            return Err(TreeError::LeafOutOfRange {
                leaf,
                leaf_count: self.leaf_count(),
            });
        }
        Ok(())
    }
}

/// An `m`-entry vector of split decisions over `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionVector {
    bits: Vec<i8>,
}

impl DecisionVector {
    pub fn new(bits: Vec<i8>) -> Result<Self, TreeError> {
        for (i, &b) in bits.iter().enumerate() {
            if b != 1 && b != -1 {
                return Err(TreeError::InvalidBit {
                    index: i + 1,
                    value: b,
                });
            }
        }
        Ok(DecisionVector { bits })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Decision bit of internal node `i` (1-based heap index).
    #[inline]
    pub fn bit(&self, node: usize) -> i8 {
        self.bits[node - 1]
    }

    pub fn set_bit(&mut self, node: usize, sign: i8) {
        debug_assert!(sign == 1 || sign == -1);
        self.bits[node - 1] = sign;
    }

    #[inline]
    pub fn bits(&self) -> &[i8] {
        &self.bits
    }
}

/// Follows the decisions in `h` from the root for `depth` steps and returns
/// the reached leaf (1-based). Bits off the traversed path are ignored.
pub fn navigate(topology: TreeTopology, h: &DecisionVector) -> Result<usize, TreeError> {
    let m = topology.internal_count();
    if h.len() != m {
        return Err(TreeError::BitLengthMismatch {
            expected: m,
            actual: h.len(),
        });
    }
    let mut node = 1usize;
    for _ in 0..topology.depth() {
        node = if h.bit(node) > 0 { 2 * node + 1 } else { 2 * node };
    }
    Ok(node - m)
}

/// All `m` split decisions `sign(Wx)` at once.
pub fn decisions(w: &Array2<f64>, x: ArrayView1<f64>) -> Result<DecisionVector, TreeError> {
    check_features(w, x)?;
    let bits = w.rows().into_iter().map(|row| split_sign(row.dot(&x))).collect();
    // rows of a validated W are finite, so signs are well defined
    Ok(DecisionVector { bits })
}

/// The leaf `f(sign(Wx))`, computing only the `d` inner products on the
/// traversed path.
pub fn predict_leaf(
    w: &Array2<f64>,
    x: ArrayView1<f64>,
    topology: TreeTopology,
) -> Result<usize, TreeError> {
    check_features(w, x)?;
    let m = topology.internal_count();
    if w.nrows() != m {
        return Err(TreeError::RowCountMismatch {
            what: "split matrix",
            expected: m,
            actual: w.nrows(),
        });
    }
    let mut node = 1usize;
    for _ in 0..topology.depth() {
        let s = w.row(node - 1).dot(&x);
        node = if split_sign(s) > 0 { 2 * node + 1 } else { 2 * node };
    }
    Ok(node - m)
}

/// Root-to-leaf path of `leaf`: the `d` internal nodes crossed, root first,
/// each with the decision (`-1` left, `+1` right) required to reach `leaf`.
pub fn path_nodes(
    topology: TreeTopology,
    leaf: usize,
) -> Result<Vec<(usize, i8)>, TreeError> {
    topology.check_leaf(leaf)?;
    let mut path = Vec::with_capacity(topology.depth());
    let mut node = topology.leaf_heap_index(leaf);
    while node > 1 {
        let dir = if node % 2 == 1 { 1 } else { -1 };
        node /= 2;
        path.push((node, dir));
    }
    path.reverse();
    Ok(path)
}

fn check_features(w: &Array2<f64>, x: ArrayView1<f64>) -> Result<(), TreeError> {
    if w.ncols() != x.len() {
        return Err(TreeError::FeatureMismatch {
            expected: w.ncols(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// An oblique decision tree: split weights `W` (`m × p̃`, the last column
/// holds the negated threshold via input augmentation) and leaf parameters
/// `Θ` (`(m+1) × k`).
///
/// The model is immutable during inference; any number of threads may share
/// a reference and call the prediction methods concurrently. Mutation is
/// confined to the optimizer, which takes `&mut` for the duration of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    topology: TreeTopology,
    task: LossKind,
    w: Array2<f64>,
    theta: Array2<f64>,
}

impl TreeModel {
    pub fn new(
        topology: TreeTopology,
        task: LossKind,
        w: Array2<f64>,
        theta: Array2<f64>,
    ) -> Result<Self, TreeError> {
        let m = topology.internal_count();
        if w.nrows() != m {
            return Err(TreeError::RowCountMismatch {
                what: "split matrix W",
                expected: m,
                actual: w.nrows(),
            });
        }
        if theta.nrows() != m + 1 {
            return Err(TreeError::RowCountMismatch {
                what: "leaf matrix Theta",
                expected: m + 1,
                actual: theta.nrows(),
            });
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(TreeError::NonFinite { what: "split matrix W" });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(TreeError::NonFinite { what: "leaf matrix Theta" });
        }
        Ok(TreeModel { topology, task, w, theta })
    }

    /// All-zero parameters: every split routes right (`sign(0) = +1`) and
    /// every leaf distribution is uniform.
    pub fn zeroed(
        topology: TreeTopology,
        task: LossKind,
        num_features: usize,
        num_outputs: usize,
    ) -> Self {
        let m = topology.internal_count();
        TreeModel {
            topology,
            task,
            w: Array2::zeros((m, num_features)),
            theta: Array2::zeros((m + 1, num_outputs)),
        }
    }

    #[inline]
    pub fn topology(&self) -> TreeTopology {
        self.topology
    }

    #[inline]
    pub fn task(&self) -> LossKind {
        self.task
    }

    #[inline]
    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    #[inline]
    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub(crate) fn w_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }

    pub(crate) fn theta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.theta
    }

    /// Number of (augmented) input features `p̃`.
    #[inline]
    pub fn num_features(&self) -> usize {
        self.w.ncols()
    }

    /// Number of classes (log loss) or output dimensions (squared loss).
    #[inline]
    pub fn num_outputs(&self) -> usize {
        self.theta.ncols()
    }

    /// Leaf parameter row `θ_j` (1-based leaf index).
    #[inline]
    pub fn leaf_params(&self, leaf: usize) -> ArrayView1<'_, f64> {
        self.theta.row(leaf - 1)
    }

    pub fn decisions(&self, x: ArrayView1<f64>) -> Result<DecisionVector, TreeError> {
        decisions(&self.w, x)
    }

    pub fn predict_leaf(&self, x: ArrayView1<f64>) -> Result<usize, TreeError> {
        predict_leaf(&self.w, x, self.topology)
    }

    /// Softmax of the selected leaf's parameter row.
    pub fn predict_distribution(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, TreeError> {
        let leaf = self.predict_leaf(x)?;
        let theta = self.leaf_params(leaf);
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(TreeError::NonFinite { what: "leaf parameters" });
        }
        Ok(crate::loss::softmax(theta))
    }

    /// Most probable class at the reached leaf; ties resolve to the smallest
    /// class index.
    pub fn predict_class(&self, x: ArrayView1<f64>) -> Result<usize, TreeError> {
        let leaf = self.predict_leaf(x)?;
        let theta = self.leaf_params(leaf);
        let mut best = 1;
        for (idx, &v) in theta.iter().enumerate() {
            if v > theta[best - 1] {
                best = idx + 1;
            }
        }
        Ok(best)
    }

    /// Largest squared row norm of `W`; the optimizer keeps this at or below
    /// its norm budget `ν`.
    pub fn max_row_sq_norm(&self) -> f64 {
        self.w
            .rows()
            .into_iter()
            .map(|r| r.dot(&r))
            .fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "OBTREE 1")?;
        writeln!(
            out,
            "depth {} features {} classes {} task {}",
            self.topology.depth(),
            self.num_features(),
            self.num_outputs(),
            self.task,
        )?;
        for row in self.w.rows() {
            writeln!(out, "{}", format_row(row))?;
        }
        for row in self.theta.rows() {
            writeln!(out, "{}", format_row(row))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, ModelFormatError> {
        let mut lines = input.lines().enumerate();
        let magic = next_line(&mut lines)?;
        if magic.1.trim() != "OBTREE 1" {
            return Err(ModelFormatError::parse(magic.0, "expected header \"OBTREE 1\""));
        }
        let (hline, header) = next_line(&mut lines)?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        let [depth, features, classes, task] = match tokens.as_slice() {
            ["depth", d, "features", p, "classes", k, "task", t] => [*d, *p, *k, *t],
            _ => return Err(ModelFormatError::parse(hline, "malformed model header")),
        };
        let depth: usize = depth
            .parse()
            .map_err(|_| ModelFormatError::parse(hline, "bad depth"))?;
        let features: usize = features
            .parse()
            .map_err(|_| ModelFormatError::parse(hline, "bad feature count"))?;
        let classes: usize = classes
            .parse()
            .map_err(|_| ModelFormatError::parse(hline, "bad class count"))?;
        let task = match task {
            "log" => LossKind::Log,
            "sqr" => LossKind::Squared,
            _ => return Err(ModelFormatError::parse(hline, "task must be log or sqr")),
        };
        let topology =
            TreeTopology::new(depth).map_err(|e| ModelFormatError::parse(hline, e.to_string()))?;
        let m = topology.internal_count();
        let mut w = Array2::zeros((m, features));
        for i in 0..m {
            read_row(&mut lines, w.row_mut(i), features)?;
        }
        let mut theta = Array2::zeros((m + 1, classes));
        for j in 0..=m {
            read_row(&mut lines, theta.row_mut(j), classes)?;
        }
        TreeModel::new(topology, task, w, theta)
            .map_err(|e| ModelFormatError::Parse { line: hline + 1, message: e.to_string() })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ModelFormatError> {
        let file = File::open(path)?;
        TreeModel::read_from(BufReader::new(file))
    }
}

/// 17 significant decimal digits: enough to reproduce any `f64` bit-exactly
/// on re-parse.
pub fn format_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

fn format_row(row: ArrayView1<f64>) -> String {
    let mut s = String::new();
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format_f64(*v));
    }
    s
}

fn next_line<I>(lines: &mut I) -> Result<(usize, String), ModelFormatError>
where
    I: Iterator<Item = (usize, io::Result<String>)>,
{
    match lines.next() {
        Some((idx, Ok(line))) => Ok((idx + 1, line)),
        Some((idx, Err(e))) => Err(ModelFormatError::parse(idx + 1, e.to_string())),
        None => Err(ModelFormatError::parse(0, "unexpected end of file")),
    }
}

fn read_row<I>(
    lines: &mut I,
    mut row: ndarray::ArrayViewMut1<f64>,
    expected: usize,
) -> Result<(), ModelFormatError>
where
    I: Iterator<Item = (usize, io::Result<String>)>,
{
    let (lineno, line) = next_line(lines)?;
    let mut count = 0;
    for tok in line.split_whitespace() {
        if count >= expected {
            return Err(ModelFormatError::parse(lineno, "too many values in row"));
        }
        row[count] = tok
            .parse::<f64>()
            .map_err(|_| ModelFormatError::parse(lineno, format!("bad float {tok:?}")))?;
        count += 1;
    }
    if count != expected {
        return Err(ModelFormatError::parse(
            lineno,
            format!("expected {expected} values, got {count}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ModelFormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("model file line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ModelFormatError {
    fn parse(line: usize, message: impl fmt::Display) -> Self {
        ModelFormatError::Parse { line, message: message.to_string() }
    }
}
