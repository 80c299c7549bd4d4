//! Empirical neural tangent kernel `K(w) = J Jᵀ` with
//! `J = ∂vec(f_Xᵀ)/∂w`, its numerical rank, and the rank-preservation test
//! used during the second training phase.
//!
//! Rows of `J` are ordered sample-major: row `i · m_y + k` is the gradient of
//! output `k` on sample `i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{self, BnMode, NetworkSpec, ParamSubset, Params};

/// Upper bound on `n · m_y · d` for a materialized Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianCaps {
    pub max_entries: usize,
}

impl Default for JacobianCaps {
    fn default() -> Self {
        JacobianCaps {
            max_entries: 50_000_000,
        }
    }
}

/// How the kernel's rank is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPath {
    /// Materialize `K` and take its singular values.
    #[default]
    Kernel,
    /// Square the singular values of `J`; `K` is never formed.
    Jacobian,
}

pub fn compute_jacobian(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<Matrix> {
    compute_jacobian_with(spec, params, x, BnMode::Batch, JacobianCaps::default())
}

/// Jacobian of `vec(f_Xᵀ)`, one backward pass per output coordinate.
pub fn compute_jacobian_with(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    bn_mode: BnMode<'_>,
    caps: JacobianCaps,
) -> Result<Matrix> {
    let n = x.rows();
    let m_y = spec.output_dim;
    let d = params.len();
    let rows = n * m_y;
    if rows.saturating_mul(d) > caps.max_entries {
        return Err(Error::SizeCap(format!(
            "Jacobian would be {rows}x{d} (cap {} entries); use the Jacobian-free rank path or a smaller problem",
            caps.max_entries
        )));
    }
    let trace = network::forward(spec, params, x, bn_mode)?;
    let grads: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut upstream = Matrix::zeros(n, m_y);
            upstream.set(r / m_y, r % m_y, 1.0);
            network::backprop_trace(spec, params, &trace, &upstream, ParamSubset::All)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(rows * d);
    for g in grads {
        data.extend(g);
    }
    Ok(Matrix::from_raw(rows, d, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkSnapshot {
    #[serde(skip)]
    pub jacobian: Option<Matrix>,
    #[serde(skip)]
    pub kernel: Option<Matrix>,
    /// Eigenvalues of `K` (singular values, descending).
    pub spectrum: Vec<f64>,
    pub tolerance: f64,
    pub rank: usize,
    pub step: Option<usize>,
}

impl NtkSnapshot {
    /// `n · m_y`.
    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    /// Rank counted against someone else's threshold.
    pub fn rank_at(&self, tolerance: f64) -> usize {
        linalg::rank_from_singular_values(&self.spectrum, tolerance)
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }
}

pub fn compute_ntk(j: Matrix) -> Result<NtkSnapshot> {
    compute_ntk_with(j, RankPath::Kernel)
}

pub fn compute_ntk_with(j: Matrix, path: RankPath) -> Result<NtkSnapshot> {
    if !j.all_finite() {
        return Err(Error::NonFinite("Jacobian".into()));
    }
    let dim = j.rows();
    let (kernel, spectrum) = match path {
        RankPath::Kernel => {
            let k = j.matmul_t(&j)?;
            let sv = linalg::singular_values(&k)?;
            (Some(k), sv)
        }
        RankPath::Jacobian => {
            let mut sv = linalg::singular_values(&j)?;
            sv.iter_mut().for_each(|s| *s *= *s);
            sv.resize(dim, 0.0);
            (None, sv)
        }
    };
    let tolerance = linalg::default_rank_tolerance(dim, dim, spectrum[0]);
    let rank = linalg::rank_from_singular_values(&spectrum, tolerance);
    Ok(NtkSnapshot {
        jacobian: Some(j),
        kernel,
        spectrum,
        tolerance,
        rank,
        step: None,
    })
}

/// Jacobian plus kernel at the current parameters.
pub fn ntk_snapshot(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    bn_mode: BnMode<'_>,
    path: RankPath,
) -> Result<NtkSnapshot> {
    let j = compute_jacobian_with(spec, params, x, bn_mode, JacobianCaps::default())?;
    compute_ntk_with(j, path)
}

/// `rank K(current) ≥ rank K(reference)`, both counted at the reference threshold.
pub fn assert_rank_preserved(reference: &NtkSnapshot, current: &NtkSnapshot) -> Result<bool> {
    if reference.dim() != current.dim() {
        return Err(Error::Shape(format!(
            "kernels of size {} and {} belong to different problems",
            reference.dim(),
            current.dim()
        )));
    }
    if let (Some(a), Some(b)) = (&reference.jacobian, &current.jacobian) {
        if a.cols() != b.cols() {
            return Err(Error::Shape(format!(
                "Jacobians have {} and {} parameter columns",
                a.cols(),
                b.cols()
            )));
        }
    }
    Ok(current.rank_at(reference.tolerance) >= reference.rank)
}
