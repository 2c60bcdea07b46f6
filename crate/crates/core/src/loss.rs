//! Loss functions `ℓ(θ, y)` and their gradients in `θ`.
//!
//! Inference and the optimizer stay loss-agnostic: both work through
//! [`loss_value`] / [`loss_gradient`] and a [`Target`] that is either a class
//! label (log loss) or a real target vector (squared loss).

use std::fmt;

use ndarray::{Array1, ArrayView1};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("class label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target has {actual} entries, parameters have {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{0} target does not match the configured loss")]
    TargetKindMismatch(&'static str),
}

/// Which loss the model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Negative log probability of the correct label under the softmax of θ.
    Log,
    /// Squared Euclidean distance between θ and the target vector.
    Squared,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Log => write!(f, "log"),
            LossKind::Squared => write!(f, "sqr"),
        }
    }
}

/// Ground truth for one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// 1-based class label in `1..=k`.
    Class(usize),
    /// Regression target in `R^q`.
    Vector(Vec<f64>),
}

/// Numerically stable `log Σ exp(θ_β)`: the max is factored out before
/// exponentiating, so large θ produced by the optimizer cannot overflow.
pub fn log_sum_exp(theta: ArrayView1<f64>) -> f64 {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = theta.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of θ, computed against the shifted log-sum-exp.
pub fn softmax(theta: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(theta);
    theta.mapv(|v| (v - lse).exp())
}

/// `-θ_[y] + log Σ_β exp(θ_[β])`, the negative log probability of label `y`.
pub fn log_loss(theta: ArrayView1<f64>, label: usize) -> Result<f64, LossError> {
    check_label(theta, label)?;
    Ok(-theta[label - 1] + log_sum_exp(theta))
}

/// Gradient of [`log_loss`] in θ: `softmax(θ) - e_y`.
pub fn log_loss_grad(theta: ArrayView1<f64>, label: usize) -> Result<Array1<f64>, LossError> {
    check_label(theta, label)?;
    let mut grad = softmax(theta);
    grad[label - 1] -= 1.0;
    Ok(grad)
}

/// `‖θ - y‖²`.
pub fn sqr_loss(theta: ArrayView1<f64>, target: &[f64]) -> Result<f64, LossError> {
    check_dims(theta, target)?;
    Ok(theta
        .iter()
        .zip(target)
        .map(|(&t, &y)| (t - y) * (t - y))
        .sum())
}

/// Gradient of [`sqr_loss`] in θ: `2(θ - y)`.
pub fn sqr_loss_grad(theta: ArrayView1<f64>, target: &[f64]) -> Result<Array1<f64>, LossError> {
    check_dims(theta, target)?;
    Ok(Array1::from_iter(
        theta.iter().zip(target).map(|(&t, &y)| 2.0 * (t - y)),
    ))
}

/// `ℓ(θ, y)` for the configured loss.
pub fn loss_value(
    kind: LossKind,
    theta: ArrayView1<f64>,
    target: &Target,
) -> Result<f64, LossError> {
    match (kind, target) {
        (LossKind::Log, Target::Class(label)) => log_loss(theta, *label),
        (LossKind::Squared, Target::Vector(y)) => sqr_loss(theta, y),
        (LossKind::Log, Target::Vector(_)) => Err(LossError::TargetKindMismatch("vector")),
        (LossKind::Squared, Target::Class(_)) => Err(LossError::TargetKindMismatch("class")),
    }
}

/// `∂ℓ/∂θ` for the configured loss.
pub fn loss_gradient(
    kind: LossKind,
    theta: ArrayView1<f64>,
    target: &Target,
) -> Result<Array1<f64>, LossError> {
    match (kind, target) {
        (LossKind::Log, Target::Class(label)) => log_loss_grad(theta, *label),
        (LossKind::Squared, Target::Vector(y)) => sqr_loss_grad(theta, y),
        (LossKind::Log, Target::Vector(_)) => Err(LossError::TargetKindMismatch("vector")),
        (LossKind::Squared, Target::Class(_)) => Err(LossError::TargetKindMismatch("class")),
    }
}

fn check_label(theta: ArrayView1<f64>, label: usize) -> Result<(), LossError> {
    if label == 0 || label > theta.len() {
        return Err(LossError::LabelOutOfRange { label, classes: theta.len() });
    }
    Ok(())
}

fn check_dims(theta: ArrayView1<f64>, target: &[f64]) -> Result<(), LossError> {
    if theta.len() != target.len() {
        return Err(LossError::DimensionMismatch {
            expected: theta.len(),
            actual: target.len(),
        });
    }
    Ok(())
}
