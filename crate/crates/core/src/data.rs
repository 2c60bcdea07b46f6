//! Dataset container, LibSVM-format IO, deterministic splits, and synthetic
//! data generators.
//!
//! A [`Dataset`] keeps both a sparse per-example representation (exactly what
//! was read from disk, used for faithful round-tripping) and a dense feature
//! matrix (used by training and inference). Classification labels are remapped
//! to contiguous class ids `1..=k` by sorting the distinct raw labels; the
//! original values stay available through [`Dataset::label_map`].

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loss::Target;
use crate::tree::format_f64;

/// Errors produced while reading, transforming, or splitting datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    /// A malformed input line; `line` and `column` are 1-based.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("dataset is already augmented with a constant feature")]
    AlreadyAugmented,
    #[error("dataset has no examples")]
    Empty,
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("datasets cannot be combined: {0}")]
    Incompatible(String),
}

/// An in-memory dataset: sparse rows plus a dense matrix view of the same data.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sparse features per example: `(index, value)` with 1-based, strictly
    /// increasing indices. Mirrors the on-disk representation.
    sparse: Vec<Vec<(u32, f64)>>,
    targets: Vec<Target>,
    /// Number of original (pre-augmentation) features.
    num_raw_features: usize,
    /// Number of classes (classification) or output dimensions (regression).
    num_outputs: usize,
    /// Sorted distinct raw labels; `label_map[c-1]` is the raw label written
    /// back to disk for class `c`. Empty for regression targets.
    label_map: Vec<f64>,
    /// Whether a trailing constant `-1` feature has been appended.
    augmented: bool,
    /// Dense `n x width` matrix; `width = num_raw_features (+1 if augmented)`.
    dense: Array2<f64>,
}

impl Dataset {
    /// Builds a classification dataset from a dense matrix and class labels in
    /// `1..=num_classes`. Raw labels are the class ids themselves.
    pub fn from_dense_classification(
        dense: Array2<f64>,
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if dense.nrows() != labels.len() {
            return Err(DataError::Incompatible(format!(
                "{} feature rows but {} labels",
                dense.nrows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(DataError::Incompatible("zero classes".to_string()));
        }
        for (i, &label) in labels.iter().enumerate() {
            if label < 1 || label > num_classes {
                return Err(DataError::Incompatible(format!(
                    "label {label} of example {i} outside 1..={num_classes}"
                )));
            }
        }
        let sparse = dense
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (j as u32 + 1, v))
                    .collect()
            })
            .collect();
        Ok(Dataset {
            sparse,
            targets: labels.iter().map(|&label| Target::Class(label)).collect(),
            num_raw_features: dense.ncols(),
            num_outputs: num_classes,
            label_map: (1..=num_classes).map(|c| c as f64).collect(),
            augmented: false,
            dense,
        })
    }

    /// Builds a regression dataset from a dense matrix and one target vector
    /// per row. All target vectors must share one length.
    pub fn from_dense_regression(
        dense: Array2<f64>,
        targets: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        if dense.nrows() != targets.len() {
            return Err(DataError::Incompatible(format!(
                "{} feature rows but {} targets",
                dense.nrows(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(DataError::Empty);
        }
        let dim = targets[0].len();
        if dim == 0 || targets.iter().any(|t| t.len() != dim) {
            return Err(DataError::Incompatible(
                "target vectors must share one nonzero length".to_string(),
            ));
        }
        let sparse = dense
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (j as u32 + 1, v))
                    .collect()
            })
            .collect();
        Ok(Dataset {
            sparse,
            targets: targets.into_iter().map(Target::Vector).collect(),
            num_raw_features: dense.ncols(),
            num_outputs: dim,
            label_map: Vec::new(),
            augmented: false,
            dense,
        })
    }

    /// Number of examples.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    /// True when the dataset holds no examples.
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Number of features before augmentation.
    pub fn num_raw_features(&self) -> usize {
        self.num_raw_features
    }

    /// Number of dense feature columns (raw features plus the constant column
    /// when augmented).
    pub fn width(&self) -> usize {
        self.dense.ncols()
    }

    /// Number of classes (classification) or target dimensions (regression).
    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    /// True once [`Dataset::augment`] has appended the constant `-1` feature.
    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// True when targets are class labels.
    pub fn is_classification(&self) -> bool {
        !self.label_map.is_empty()
    }

    /// Sorted distinct raw labels; class `c` corresponds to `label_map()[c-1]`.
    /// Empty for regression datasets.
    pub fn label_map(&self) -> &[f64] {
        &self.label_map
    }

    /// Dense feature row of example `i`.
    pub fn features(&self, i: usize) -> ArrayView1<'_, f64> {
        self.dense.row(i)
    }

    /// The full dense feature matrix.
    pub fn dense(&self) -> &Array2<f64> {
        &self.dense
    }

    /// Target of example `i`.
    pub fn target(&self, i: usize) -> &Target {
        &self.targets[i]
    }

    /// Class label of example `i` in `1..=k`, or `None` for regression data.
    pub fn class(&self, i: usize) -> Option<usize> {
        match self.targets[i] {
            Target::Class(c) => Some(c),
            Target::Vector(_) => None,
        }
    }

    /// Sparse features of example `i` as stored (1-based indices, increasing).
    pub fn sparse_example(&self, i: usize) -> &[(u32, f64)] {
        &self.sparse[i]
    }

    /// Reads a LibSVM-format dataset: one `<label> <index>:<value> ...` record
    /// per line, `#` starting a comment, blank lines ignored. Feature indices
    /// are 1-based and must be strictly increasing within a line. Distinct
    /// labels are sorted and remapped to classes `1..=k`.
    pub fn parse_libsvm<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut sparse: Vec<Vec<(u32, f64)>> = Vec::new();
        let mut raw_labels: Vec<f64> = Vec::new();
        let mut max_index = 0u32;

        for (line_idx, line) in reader.lines().enumerate() {
            let line_no = line_idx + 1;
            let line = line?;
            let content = match line.find('#') {
                Some(pos) => &line[..pos],
                None => &line[..],
            };
            let tokens = tokenize(content);
            if tokens.is_empty() {
                continue;
            }

            let (label_col, label_tok) = tokens[0];
            let label: f64 = label_tok.parse().map_err(|_| DataError::Parse {
                line: line_no,
                column: label_col,
                message: format!("invalid label `{label_tok}`"),
            })?;
            if !label.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    column: label_col,
                    message: format!("label `{label_tok}` is not finite"),
                });
            }

            let mut features: Vec<(u32, f64)> = Vec::with_capacity(tokens.len() - 1);
            let mut prev_index = 0u32;
            for &(col, tok) in &tokens[1..] {
                let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| DataError::Parse {
                    line: line_no,
                    column: col,
                    message: format!("expected `index:value`, found `{tok}`"),
                })?;
                let index: u32 = idx_str.parse().map_err(|_| DataError::Parse {
                    line: line_no,
                    column: col,
                    message: format!("invalid feature index `{idx_str}`"),
                })?;
                if index == 0 {
                    return Err(DataError::Parse {
                        line: line_no,
                        column: col,
                        message: "feature index must be at least 1".to_string(),
                    });
                }
                if index <= prev_index {
                    return Err(DataError::Parse {
                        line: line_no,
                        column: col,
                        message: format!(
                            "feature index {index} not strictly increasing (previous {prev_index})"
                        ),
                    });
                }
                let value: f64 = val_str.parse().map_err(|_| DataError::Parse {
                    line: line_no,
                    column: col + idx_str.len() + 1,
                    message: format!("invalid feature value `{val_str}`"),
                })?;
                if !value.is_finite() {
                    return Err(DataError::Parse {
                        line: line_no,
                        column: col + idx_str.len() + 1,
                        message: format!("feature value `{val_str}` is not finite"),
                    });
                }
                prev_index = index;
                max_index = max_index.max(index);
                features.push((index, value));
            }
            sparse.push(features);
            raw_labels.push(label);
        }

        let mut label_map: Vec<f64> = raw_labels.clone();
        label_map.sort_by(|a, b| a.partial_cmp(b).expect("labels are finite"));
        label_map.dedup();
        let targets = raw_labels
            .iter()
            .map(|raw| {
                let class = label_map
                    .iter()
                    .position(|l| l == raw)
                    .expect("raw label present in sorted distinct labels");
                Target::Class(class + 1)
            })
            .collect();

        let num_raw_features = max_index as usize;
        let mut dense = Array2::zeros((sparse.len(), num_raw_features));
        for (i, feats) in sparse.iter().enumerate() {
            for &(idx, value) in feats {
                dense[[i, idx as usize - 1]] = value;
            }
        }
        Ok(Dataset {
            sparse,
            targets,
            num_raw_features,
            num_outputs: label_map.len(),
            label_map,
            augmented: false,
            dense,
        })
    }

    /// Writes the dataset in LibSVM format. Labels use their shortest exact
    /// decimal form; feature values use 17-significant-digit scientific
    /// notation, so `parse -> write` is byte-stable. The constant feature added
    /// by [`Dataset::augment`] is omitted.
    pub fn write_libsvm<W: Write>(&self, mut writer: W) -> Result<(), DataError> {
        let limit = self.num_raw_features as u32;
        let mut line = String::new();
        for (i, features) in self.sparse.iter().enumerate() {
            line.clear();
            match &self.targets[i] {
                Target::Class(c) => {
                    let _ = write!(line, "{}", self.label_map[c - 1]);
                }
                Target::Vector(_) => {
                    return Err(DataError::Incompatible(
                        "only classification datasets can be written".to_string(),
                    ));
                }
            }
            for &(idx, value) in features.iter().filter(|&&(idx, _)| idx <= limit) {
                let _ = write!(line, " {}:{}", idx, format_f64(value));
            }
            line.push('\n');
            writer.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Appends a constant `-1` feature at index `num_raw_features + 1` to every
    /// example, turning affine splits `w'x > t` into linear splits in the
    /// extended space. Calling this twice is an error.
    pub fn augment(&mut self) -> Result<(), DataError> {
        if self.augmented {
            return Err(DataError::AlreadyAugmented);
        }
        let n = self.len();
        let width = self.num_raw_features + 1;
        let mut dense = Array2::zeros((n, width));
        dense
            .slice_mut(ndarray::s![.., ..self.num_raw_features])
            .assign(&self.dense);
        dense.column_mut(width - 1).fill(-1.0);
        for features in &mut self.sparse {
            features.push((width as u32, -1.0));
        }
        self.dense = dense;
        self.augmented = true;
        Ok(())
    }

    /// Splits into `fractions.len()` disjoint parts after a seeded shuffle.
    /// Part `i` receives `floor(n * fractions[i])` examples except the last,
    /// which receives the remainder. Fractions must be positive and sum to 1.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>, DataError> {
        if fractions.is_empty() {
            return Err(DataError::BadFractions("no fractions given".to_string()));
        }
        if fractions.iter().any(|&f| !f.is_finite() || f <= 0.0) {
            return Err(DataError::BadFractions(
                "fractions must be positive and finite".to_string(),
            ));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::BadFractions(format!(
                "fractions sum to {total}, expected 1"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        for (i, &fraction) in fractions.iter().enumerate() {
            let size = if i + 1 == fractions.len() {
                n - start
            } else {
                (n as f64 * fraction).floor() as usize
            };
            let idx = &order[start..start + size];
            parts.push(self.subset(idx));
            start += size;
        }
        Ok(parts)
    }

    /// New dataset holding the given examples (in the given order), keeping
    /// the global label map and feature width.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let sparse = indices.iter().map(|&i| self.sparse[i].clone()).collect();
        let targets = indices.iter().map(|&i| self.targets[i].clone()).collect();
        let mut dense = Array2::zeros((indices.len(), self.dense.ncols()));
        for (row, &i) in indices.iter().enumerate() {
            dense.row_mut(row).assign(&self.dense.row(i));
        }
        Dataset {
            sparse,
            targets,
            num_raw_features: self.num_raw_features,
            num_outputs: self.num_outputs,
            label_map: self.label_map.clone(),
            augmented: self.augmented,
            dense,
        }
    }

    /// Concatenates two datasets with identical schema (feature width, label
    /// map, augmentation state), e.g. to retrain on train plus validation.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.num_raw_features != other.num_raw_features
            || self.augmented != other.augmented
            || self.label_map != other.label_map
            || self.num_outputs != other.num_outputs
        {
            return Err(DataError::Incompatible(
                "feature width, labels, and augmentation state must match".to_string(),
            ));
        }
        let mut sparse = self.sparse.clone();
        sparse.extend(other.sparse.iter().cloned());
        let mut targets = self.targets.clone();
        targets.extend(other.targets.iter().cloned());
        let mut dense = Array2::zeros((self.len() + other.len(), self.dense.ncols()));
        dense
            .slice_mut(ndarray::s![..self.len(), ..])
            .assign(&self.dense);
        dense
            .slice_mut(ndarray::s![self.len().., ..])
            .assign(&other.dense);
        Ok(Dataset {
            sparse,
            targets,
            num_raw_features: self.num_raw_features,
            num_outputs: self.num_outputs,
            label_map: self.label_map.clone(),
            augmented: self.augmented,
            dense,
        })
    }
}

/// Splits a line into `(1-based column, token)` pairs on ASCII whitespace.
fn tokenize(line: &str) -> Vec<(usize, &str)> {
    let bytes = line.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i > start {
            out.push((start + 1, &line[start..i]));
        }
    }
    out
}

/// Two-class planar dataset that no single axis-aligned split can separate
/// well: features are uniform on `[-1, 1]^2`, and the class is determined by
/// the XOR of the signs of two linear functions rotated 30 degrees from the
/// axes. Each label is then flipped independently with probability `noise`.
pub fn make_rotated_xor(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = std::f64::consts::PI / 6.0;
    let (sin, cos) = angle.sin_cos();
    let mut dense = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let x = rng.random_range(-1.0..1.0);
        let y = rng.random_range(-1.0..1.0);
        dense[[i, 0]] = x;
        dense[[i, 1]] = y;
        let u1 = cos * x + sin * y;
        let u2 = -sin * x + cos * y;
        let mut class = if (u1 >= 0.0) == (u2 >= 0.0) { 1 } else { 2 };
        if noise > 0.0 && rng.random::<f64>() < noise {
            class = 3 - class;
        }
        labels.push(class);
    }
    Dataset::from_dense_classification(dense, &labels, 2)
        .expect("generated labels are always in 1..=2")
}

/// Dense synthetic classification data with features uniform on `[-1, 1]` and
/// uniformly random labels; used for benchmarks and runtime measurements.
pub fn make_random_dense(n: usize, num_features: usize, num_classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = Array2::zeros((n, num_features));
    for value in dense.iter_mut() {
        *value = rng.random_range(-1.0..1.0);
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=num_classes)).collect();
    Dataset::from_dense_classification(dense, &labels, num_classes)
        .expect("generated labels are always in range")
}
