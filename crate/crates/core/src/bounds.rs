//! Suboptimality bounds for the second phase and the constants they need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::loss::{self, LossKind};
use crate::network::{self, NetworkSpec, Params};
use crate::trainer::{self, Phase2Mode, TrainLog, TrainRecord};

/// Relative slack used when flagging a violation.
pub const VIOLATION_SLACK: f64 = 1e-9;

pub fn is_violation(measured: f64, bound: f64) -> bool {
    measured > bound + VIOLATION_SLACK * (1.0 + bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastLayerOptimum {
    /// `[W; b]` of the output layer at the optimum, `(m_H + 1) × m_y`.
    pub z: Matrix,
    /// `L(w*)`.
    pub loss: f64,
    /// `‖Z* − Z^τ‖²`.
    pub r_sq: f64,
    /// `‖[h, 1] Z* − Y‖_F` (squared loss only).
    pub residual: Option<f64>,
    pub rank: usize,
    /// False when the optimum comes from a finite iterative solve.
    pub exact: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Options for the iterative cross-entropy path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterativeSolve {
    pub grad_tol: f64,
    pub max_steps: usize,
}

impl Default for IterativeSolve {
    fn default() -> Self {
        IterativeSolve {
            grad_tol: 1e-10,
            max_steps: 1_000_000,
        }
    }
}

/// Minimizer of the frozen-feature problem nearest to the anchor.
pub fn solve_last_layer_optimum(kind: LossKind, h: &Matrix, y: &Matrix, anchor: &Matrix) -> Result<LastLayerOptimum> {
    solve_last_layer_optimum_with(kind, h, y, anchor, IterativeSolve::default())
}

pub fn solve_last_layer_optimum_with(
    kind: LossKind,
    h: &Matrix,
    y: &Matrix,
    anchor: &Matrix,
    opts: IterativeSolve,
) -> Result<LastLayerOptimum> {
    let m = h.with_ones_column();
    let n = m.rows();
    if anchor.shape() != (m.cols(), y.cols()) {
        return Err(Error::Shape(format!(
            "anchor is {:?}, expected ({}, {})",
            anchor.shape(),
            m.cols(),
            y.cols()
        )));
    }
    let rank = linalg::numerical_rank(&m, None)?;
    if rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    match kind {
        LossKind::Squared => {
            let z = linalg::min_norm_solve(&m, y, anchor)?;
            let residual = m.matmul(&z)?.sub(y)?.frobenius_norm();
            let r_sq = z.sub(anchor)?.frobenius_norm().powi(2);
            Ok(LastLayerOptimum {
                z,
                loss: 0.0,
                r_sq,
                residual: Some(residual),
                rank,
                exact: true,
                iterations: 0,
                grad_norm: 0.0,
            })
        }
        LossKind::CrossEntropy => {
            let eta = 1.0 / trainer::compute_l_h(kind, h);
            let mut z = anchor.clone();
            let mut grad_norm = f64::INFINITY;
            let mut iterations = 0;
            while iterations < opts.max_steps {
                let g = m.t_matmul(&loss::loss_grad(kind, &m.matmul(&z)?, y)?)?;
                grad_norm = g.frobenius_norm();
                if grad_norm < opts.grad_tol {
                    break;
                }
                z = z.sub(&g.scale(eta))?;
                iterations += 1;
            }
            let value = loss::loss_value(kind, &m.matmul(&z)?, y)?;
            let r_sq = z.sub(anchor)?.frobenius_norm().powi(2);
            Ok(LastLayerOptimum {
                z,
                loss: value,
                r_sq,
                residual: None,
                rank,
                exact: false,
                iterations,
                grad_norm,
            })
        }
    }
}

/// Mean of the realized `R²` over independent re-perturbations of the same
/// pre-perturbation parameters.
pub fn average_r_sq(
    spec: &NetworkSpec,
    params_before: &Params,
    x: &Matrix,
    y: &Matrix,
    sigmas: &[f64],
    seeds: &[u64],
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let mut total = 0.0;
    for &s in seeds {
        let p = trainer::perturb(params_before, sigmas, s)?;
        let h = network::forward_hidden(spec, &p, x)?;
        total += solve_last_layer_optimum(LossKind::Squared, h.hidden(), y, &p.last_layer_matrix())?.r_sq;
    }
    Ok(total / seeds.len() as f64)
}

/// `R² L_H / (2 (t − τ))`.
pub fn gd_bound(r_sq: f64, l_h: f64, t: usize, tau: usize) -> Result<f64> {
    if t <= tau {
        return Err(Error::Config(format!("gradient-descent bound needs t > τ, got t = {t}, τ = {tau}")));
    }
    Ok(r_sq * l_h / (2.0 * (t - tau) as f64))
}

/// `η̄_k = a / √(k − τ + 1)`.
pub fn inverse_sqrt_rate(a: f64, k: usize, tau: usize) -> f64 {
    a / ((k - tau + 1) as f64).sqrt()
}

/// `(R² + G² Σ_{k=τ}^t η̄_k²) / (2 Σ_{k=τ}^t η̄_k)`.
pub fn sgd_bound(r_sq: f64, g_sq: f64, eta_bar: impl Fn(usize) -> f64, t: usize, tau: usize) -> Result<f64> {
    if t < tau {
        return Err(Error::Config(format!("SGD bound needs t ≥ τ, got t = {t}, τ = {tau}")));
    }
    let mut acc = SgdSums::default();
    for k in tau..=t {
        acc.push(eta_bar(k))?;
    }
    acc.bound(r_sq, g_sq)
}

/// Running partial sums `Σ η̄_k` and `Σ η̄_k²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SgdSums {
    pub sum: f64,
    pub sum_sq: f64,
}

impl SgdSums {
    pub fn push(&mut self, eta: f64) -> Result<()> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("step sizes must be non-negative, got {eta}")));
        }
        self.sum += eta;
        self.sum_sq += eta * eta;
        Ok(())
    }

    pub fn bound(&self, r_sq: f64, g_sq: f64) -> Result<f64> {
        if self.sum == 0.0 {
            return Err(Error::Numeric("all step sizes on [τ, t] are zero".into()));
        }
        Ok((r_sq + g_sq * self.sum_sq) / (2.0 * self.sum))
    }
}

/// `√(L R̄² (L(w^τ) − L*) / (2 η̄ (1 − η̄))) / √(t − τ + 1)`.
pub fn lazy_bound(l_est: f64, r_bar: f64, loss_tau: f64, loss_star: f64, eta_bar: f64, t: usize, tau: usize) -> Result<f64> {
    if !(eta_bar > 0.0 && eta_bar < 1.0) {
        return Err(Error::Config(format!("η̄ must lie in (0, 1), got {eta_bar}")));
    }
    if t < tau {
        return Err(Error::Config(format!("lazy bound needs t ≥ τ, got t = {t}, τ = {tau}")));
    }
    let gap = (loss_tau - loss_star).max(0.0);
    let inner = l_est * r_bar * r_bar * gap / (2.0 * eta_bar * (1.0 - eta_bar));
    Ok(inner.sqrt() / ((t - tau + 1) as f64).sqrt())
}

/// Largest logged `‖Δ∇L‖ / ‖Δw‖` along a lazy trajectory.
pub fn empirical_lipschitz(records: &[TrainRecord]) -> Option<f64> {
    records
        .iter()
        .filter_map(|r| r.lipschitz_ratio)
        .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Distance from `ν ⊙ w` to the solution of `J ω = vec(Yᵀ)` nearest to it.
pub fn linearized_distance(params: &Params, jacobian: &Matrix, y: &Matrix) -> Result<f64> {
    let d = params.len();
    if jacobian.shape() != (y.rows() * y.cols(), d) {
        return Err(Error::Shape(format!(
            "Jacobian is {:?}, expected ({}, {d})",
            jacobian.shape(),
            y.rows() * y.cols()
        )));
    }
    let mask = trainer::nu_mask(params);
    let anchor: Vec<f64> = mask.iter().zip(params.as_slice()).map(|(m, w)| m * w).collect();
    let anchor = Matrix::new(d, 1, anchor)?;
    let b = Matrix::new(y.rows() * y.cols(), 1, y.as_slice().to_vec())?;
    let omega = linalg::min_norm_solve(jacobian, &b, &anchor)?;
    Ok(omega.sub(&anchor)?.frobenius_norm())
}

/// `R̄ = max_k ‖ν ⊙ w^k − ω̂^k‖` over a trajectory of `(w^k, J(w^k))`.
pub fn estimate_r_bar(trajectory: &[(Params, Matrix)], y: &Matrix, kind: LossKind) -> Result<f64> {
    if kind != LossKind::Squared {
        return Err(Error::Unsupported(
            "R̄ has an exact solve only for the squared loss; use the iterative last-layer solver for cross-entropy".into(),
        ));
    }
    if trajectory.is_empty() {
        return Err(Error::Config("empty trajectory".into()));
    }
    let mut worst = 0.0f64;
    for (params, j) in trajectory {
        worst = worst.max(linearized_distance(params, j, y)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BoundConstants {
    Gd {
        r_sq: f64,
        l_h: f64,
        loss_star: f64,
    },
    Sgd {
        r_sq: f64,
        g_sq: f64,
        /// `a` in `η̄_k = a/√(k − τ + 1)`.
        scale: f64,
        loss_star: f64,
        /// `G²` is the trajectory maximum rather than a supplied bound.
        g_sq_measured: bool,
    },
    /// Diagnostic only: `L` is an empirical lower estimate.
    Lazy {
        l_est: f64,
        r_bar: f64,
        loss_star: f64,
        eta_bar: f64,
    },
}

impl BoundConstants {
    fn mode(&self) -> Phase2Mode {
        match self {
            BoundConstants::Gd { .. } => Phase2Mode::LastLayerGd,
            BoundConstants::Sgd { .. } => Phase2Mode::LastLayerSgd,
            BoundConstants::Lazy { .. } => Phase2Mode::LazyFull,
        }
    }

    fn loss_star(&self) -> f64 {
        match *self {
            BoundConstants::Gd { loss_star, .. }
            | BoundConstants::Sgd { loss_star, .. }
            | BoundConstants::Lazy { loss_star, .. } => loss_star,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub t: usize,
    pub bound: f64,
    /// `L(w^t) − L*`, or `L(w^{t*}) − L*` for the SGD bound.
    pub measured: f64,
    pub slack: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub entries: Vec<BoundEntry>,
    pub violations: usize,
    /// True for the lazy bound, whose violations never count as failures.
    pub diagnostic: bool,
}

impl BoundReport {
    pub fn at(&self, t: usize) -> Option<&BoundEntry> {
        self.entries.iter().find(|e| e.t == t)
    }
}

fn entry(t: usize, bound: f64, measured: f64) -> BoundEntry {
    BoundEntry {
        t,
        bound,
        measured,
        slack: bound - measured,
        violated: is_violation(measured, bound),
    }
}

/// Evaluates the bound matching the log's phase-2 mode at every phase-2 step.
pub fn check_bounds(log: &TrainLog, constants: &BoundConstants) -> Result<BoundReport> {
    if constants.mode() != log.phase2_mode {
        return Err(Error::Config(format!(
            "{:?} constants do not match a {:?} run",
            constants.mode(),
            log.phase2_mode
        )));
    }
    let tau = log.tau;
    let loss_star = constants.loss_star();
    let mut entries = Vec::new();
    match *constants {
        BoundConstants::Gd { r_sq, l_h, .. } => {
            for t in tau + 1..=log.total_steps {
                entries.push(entry(t, gd_bound(r_sq, l_h, t, tau)?, log.loss_at(t) - loss_star));
            }
        }
        BoundConstants::Sgd { r_sq, g_sq, scale, .. } => {
            let mut sums = SgdSums::default();
            let mut best = f64::INFINITY;
            for t in tau..=log.total_steps {
                sums.push(inverse_sqrt_rate(scale, t, tau))?;
                best = best.min(log.loss_at(t));
                entries.push(entry(t, sums.bound(r_sq, g_sq)?, best - loss_star));
            }
        }
        BoundConstants::Lazy {
            l_est, r_bar, eta_bar, ..
        } => {
            for t in tau..=log.total_steps {
                let b = lazy_bound(l_est, r_bar, log.loss_at_tau, loss_star, eta_bar, t, tau)?;
                entries.push(entry(t, b, log.loss_at(t) - loss_star));
            }
        }
    }
    let violations = entries.iter().filter(|e| e.violated).count();
    Ok(BoundReport {
        diagnostic: matches!(constants, BoundConstants::Lazy { .. }),
        constants: constants.clone(),
        entries,
        violations,
    })
}
