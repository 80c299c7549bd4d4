//! Checks that the last hidden layer can express an interpolating solution:
//! input distinguishability, full row rank of `[h_X, 1]`, and an explicit
//! parameter construction that certifies it for plain softplus networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{self, NetworkSpec, Params};

/// Threshold a margin must exceed for inputs to count as distinguishable.
pub const DISTINGUISHABILITY_TOL: f64 = 1e-9;

/// Largest power of two tried as the witness scale.
pub const WITNESS_MAX_DOUBLINGS: u32 = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinguishabilityReport {
    pub passed: bool,
    /// `min_{i≠j} ‖x_i‖² − x_iᵀx_j`; `+∞` for a single sample.
    pub margin: f64,
    /// Ordered pair `(i, j)` attaining the margin.
    pub worst_pair: Option<(usize, usize)>,
    pub tolerance: f64,
}

pub fn check_distinguishability(x: &Matrix) -> DistinguishabilityReport {
    check_distinguishability_with_tol(x, DISTINGUISHABILITY_TOL)
}

pub fn check_distinguishability_with_tol(x: &Matrix, tolerance: f64) -> DistinguishabilityReport {
    let n = x.rows();
    let sq: Vec<f64> = (0..n).map(|i| linalg::dot(x.row(i), x.row(i))).collect();
    let mut margin = f64::INFINITY;
    let mut worst_pair = None;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = sq[i] - linalg::dot(x.row(i), x.row(j));
            if c < margin {
                margin = c;
                worst_pair = Some((i, j));
            }
        }
    }
    DistinguishabilityReport {
        passed: margin > tolerance,
        margin,
        worst_pair,
        tolerance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    Random,
    Witness,
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityReport {
    /// Numerical rank of `[h_X, 1]`.
    pub rank: usize,
    pub n: usize,
    pub passed: bool,
    /// `det([h, 1][h, 1]ᵀ)`.
    pub gram_det: f64,
    pub tolerance: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub source: ParamSource,
}

/// Rank of `[h_X^{(H)}, 1_n]` under the given parameters.
pub fn check_expressivity(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    tol: Option<f64>,
) -> Result<ExpressivityReport> {
    check_expressivity_from(spec, params, x, tol, ParamSource::Supplied)
}

pub(crate) fn check_expressivity_from(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    tol: Option<f64>,
    source: ParamSource,
) -> Result<ExpressivityReport> {
    let trace = network::forward_hidden(spec, params, x)?;
    features_report(trace.hidden(), tol, source)
}

/// Same report for an already computed feature matrix.
pub fn features_report(h: &Matrix, tol: Option<f64>, source: ParamSource) -> Result<ExpressivityReport> {
    let m = h.with_ones_column();
    let info = linalg::rank_info(&m, tol)?;
    let n = h.rows();
    Ok(ExpressivityReport {
        rank: info.rank,
        n,
        passed: info.rank == n,
        gram_det: linalg::gram_det(&m),
        tolerance: info.tolerance,
        sigma_min: info.sigma_min,
        sigma_max: info.sigma_max,
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessCase {
    /// Hidden layers `1..H−1` hold at least `n` units: layer 1 matches each
    /// sample against every other, later layers sharpen the diagonal.
    Wide,
    /// Hidden layers `1..H−1` hold at least `m_x` units: an identity chain
    /// carries `x + α1` forward and layer `H` performs the matching.
    Narrow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub params: Params,
    pub case: WitnessCase,
    /// Number of doublings applied to the scale, starting from 1.
    pub doublings: u32,
    pub scale: f64,
    /// Distinguishability margin `c` used by the construction.
    pub margin: f64,
    /// `min_i |h_ii| − Σ_{k≠i} |h_ik|` over the leading `n × n` block.
    pub dominance: f64,
}

/// Which construction applies to `(spec, n)`; the wide one wins when both do.
pub fn witness_case(spec: &NetworkSpec, n: usize) -> Result<WitnessCase> {
    if spec.has_batch_norm() {
        return Err(Error::Unsupported(
            "the witness construction covers plain fully-connected layers only; use random draws for batch-norm networks".into(),
        ));
    }
    if spec.last_hidden() < n {
        return Err(Error::Config(format!(
            "last hidden width m_H = {} must be at least n = {}",
            spec.last_hidden(),
            n
        )));
    }
    let h = spec.depth();
    let inner_min = spec.hidden[..h - 1].iter().copied().min().unwrap_or(usize::MAX);
    if inner_min >= n {
        Ok(WitnessCase::Wide)
    } else if h >= 2 && inner_min >= spec.input_dim {
        Ok(WitnessCase::Narrow)
    } else {
        Err(Error::Config(format!(
            "hidden layers 1..H−1 need at least min(m_x, n) = {} units, smallest has {}",
            spec.input_dim.min(n),
            inner_min
        )))
    }
}

fn build_wide(spec: &NetworkSpec, x: &Matrix, c: f64, alpha: f64) -> Params {
    let n = x.rows();
    let mut p = Params::zeros(spec);
    let layers = p.layout().layers.clone();
    let first = layers[0];
    for i in 0..n {
        let xi = x.row(i);
        for (k, &v) in xi.iter().enumerate() {
            p.set(first.weight(k, i), alpha * v);
        }
        p.set(first.bias(i), alpha * (c / 2.0 - linalg::dot(xi, xi)));
    }
    for layer in &layers[1..spec.depth()] {
        for i in 0..n {
            p.set(layer.weight(i, i), alpha);
            p.set(layer.bias(i), -alpha);
        }
    }
    p
}

fn build_narrow(spec: &NetworkSpec, x: &Matrix, c: f64, alpha: f64, alpha_out: f64) -> Params {
    let n = x.rows();
    let m_x = spec.input_dim;
    let depth = spec.depth();
    let mut p = Params::zeros(spec);
    let layers = p.layout().layers.clone();
    for (l, layer) in layers[..depth - 1].iter().enumerate() {
        for k in 0..m_x {
            p.set(layer.weight(k, k), 1.0);
            if l == 0 {
                p.set(layer.bias(k), alpha);
            }
        }
    }
    let last = layers[depth - 1];
    for i in 0..n {
        let xi = x.row(i);
        let sum: f64 = xi.iter().sum();
        for (k, &v) in xi.iter().enumerate() {
            p.set(last.weight(k, i), alpha_out * v);
        }
        p.set(
            last.bias(i),
            -alpha_out * alpha * sum + alpha_out * (c / 2.0 - linalg::dot(xi, xi)),
        );
    }
    p
}

/// `min_i |h_ii| − Σ_{k≠i, k<n} |h_ik|`.
pub fn diagonal_dominance(h: &Matrix) -> f64 {
    let n = h.rows();
    (0..n)
        .map(|i| {
            let off: f64 = (0..n).filter(|&k| k != i).map(|k| h.get(i, k).abs()).sum();
            h.get(i, i).abs() - off
        })
        .fold(f64::INFINITY, f64::min)
}

/// Builds hidden-layer parameters whose leading `n × n` feature block is
/// strictly diagonally dominant, doubling the scale from 1 until it is and
/// `[h_X, 1]` also has full numerical row rank.
pub fn construct_witness(spec: &NetworkSpec, x: &Matrix) -> Result<Witness> {
    spec.validate()?;
    if x.cols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "inputs have {} features, network expects {}",
            x.cols(),
            spec.input_dim
        )));
    }
    let n = x.rows();
    let case = witness_case(spec, n)?;
    let report = check_distinguishability(x);
    if !report.passed {
        let (i, j) = report.worst_pair.unwrap_or((0, 0));
        return Err(Error::NotDistinguishable {
            i,
            j,
            margin: report.margin,
        });
    }
    let c = if report.margin.is_finite() { report.margin } else { 1.0 };

    let mut worst = f64::NEG_INFINITY;
    for doublings in 0..=WITNESS_MAX_DOUBLINGS {
        let scale = (2.0f64).powi(doublings as i32);
        let params = match case {
            WitnessCase::Wide => build_wide(spec, x, c, scale),
            WitnessCase::Narrow => build_narrow(spec, x, c, scale, scale),
        };
        let trace = network::forward_hidden(spec, &params, x)?;
        let h = trace.hidden();
        if !h.all_finite() {
            break;
        }
        let block = h.select_rows(&(0..n).collect::<Vec<_>>());
        let mut square = Matrix::zeros(n, n);
        for i in 0..n {
            square.row_mut(i).copy_from_slice(&block.row(i)[..n]);
        }
        let dominance = diagonal_dominance(&square);
        // Dominance can hold with underflowed entries; also demand a numerical rank certificate.
        if dominance > 0.0 && features_report(h, None, ParamSource::Witness)?.passed {
            return Ok(Witness {
                params,
                case,
                doublings,
                scale,
                margin: c,
                dominance,
            });
        }
        worst = dominance;
    }
    Err(Error::WitnessNotFound {
        doublings: WITNESS_MAX_DOUBLINGS,
        worst_margin: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticReport {
    pub trials: usize,
    pub passed: usize,
    pub fraction: f64,
    pub reports: Vec<ExpressivityReport>,
}

/// RNG for trial `k` of a run seeded with `seed`: one ChaCha stream per trial.
pub fn trial_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Fraction of independent Gaussian parameter draws for which
/// `[h_X, 1]` has full row rank.
pub fn probabilistic_expressivity(
    spec: &NetworkSpec,
    x: &Matrix,
    trials: usize,
    init_scale: f64,
    seed: u64,
) -> Result<ProbabilisticReport> {
    let reports: Vec<ExpressivityReport> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = trial_rng(seed, k as u64);
            let params = Params::init_gaussian(spec, init_scale, &mut rng);
            check_expressivity_from(spec, &params, x, None, ParamSource::Random)
        })
        .collect::<Result<_>>()?;
    let passed = reports.iter().filter(|r| r.passed).count();
    Ok(ProbabilisticReport {
        trials,
        passed,
        fraction: if trials == 0 { 0.0 } else { passed as f64 / trials as f64 },
        reports,
    })
}
