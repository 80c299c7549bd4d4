//! Convex per-sample criteria with Lipschitz gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `ℓ(q, y) = ‖q − y‖²`.
    Squared,
    /// `ℓ(q, y) = −Σ_k y_k log softmax(q)_k` with probability-vector targets.
    CrossEntropy,
}

impl LossKind {
    /// Lipschitz constant `L_ℓ` of `∇ℓ(·, y)`.
    pub fn lipschitz(self) -> f64 {
        match self {
            LossKind::Squared => 2.0,
            // Softmax Jacobian has spectral norm ≤ 1/2; 1 is a valid, looser constant.
            LossKind::CrossEntropy => 1.0,
        }
    }
}

const PROB_TOL: f64 = 1e-9;

fn check(kind: LossKind, f: &Matrix, y: &Matrix) -> Result<()> {
    if f.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} and targets {:?} differ",
            f.shape(),
            y.shape()
        )));
    }
    if f.rows() == 0 {
        return Err(Error::Shape("loss over zero samples".into()));
    }
    if kind == LossKind::CrossEntropy {
        for i in 0..y.rows() {
            let row = y.row(i);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < -PROB_TOL) || (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidTargets(format!(
                    "row {i} is not a probability vector (sum {sum})"
                )));
            }
        }
    }
    Ok(())
}

fn log_sum_exp(q: &[f64]) -> f64 {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + q.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss `ℓ(q, y)`.
pub fn sample_loss(kind: LossKind, q: &[f64], y: &[f64]) -> f64 {
    match kind {
        LossKind::Squared => q.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
        LossKind::CrossEntropy => {
            let lse = log_sum_exp(q);
            q.iter()
                .zip(y)
                .filter(|(_, &t)| t != 0.0)
                .map(|(a, t)| t * (lse - a))
                .sum()
        }
    }
}

/// Gradient of [`sample_loss`] in `q`, written into `out`.
pub fn sample_grad(kind: LossKind, q: &[f64], y: &[f64], out: &mut [f64]) {
    match kind {
        LossKind::Squared => {
            for ((o, a), b) in out.iter_mut().zip(q).zip(y) {
                *o = 2.0 * (a - b);
            }
        }
        LossKind::CrossEntropy => {
            let lse = log_sum_exp(q);
            for ((o, a), t) in out.iter_mut().zip(q).zip(y) {
                *o = (a - lse).exp() - t;
            }
        }
    }
}

/// `L = (1/n) Σ_i ℓ(F_i, Y_i)`.
pub fn loss_value(kind: LossKind, f: &Matrix, y: &Matrix) -> Result<f64> {
    check(kind, f, y)?;
    let n = f.rows();
    let total: f64 = (0..n).map(|i| sample_loss(kind, f.row(i), y.row(i))).sum();
    Ok(total / n as f64)
}

/// Gradient of [`loss_value`] with respect to `F`.
pub fn loss_grad(kind: LossKind, f: &Matrix, y: &Matrix) -> Result<Matrix> {
    check(kind, f, y)?;
    let n = f.rows();
    let mut g = Matrix::zeros(n, f.cols());
    for i in 0..n {
        sample_grad(kind, f.row(i), y.row(i), g.row_mut(i));
    }
    Ok(g.scale(1.0 / n as f64))
}
