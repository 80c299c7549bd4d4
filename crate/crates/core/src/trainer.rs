//! Two-phase training: an unmodified base method for `τ` steps, one Gaussian
//! perturbation of the hidden layers, then a second phase that keeps the
//! tangent kernel's rank.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::loss::{self, LossKind};
use crate::network::{self, BnMode, BnStats, NetworkSpec, ParamSubset, Params};
use crate::ntk::{self, NtkSnapshot, RankPath};

const STREAM_BASE: u64 = 1;
const STREAM_PERTURB: u64 = 2;
const STREAM_PHASE2: u64 = 3;
const STREAM_LIPSCHITZ: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseVariant {
    /// Full-batch steps.
    Gd,
    /// Shuffled minibatches with heavy-ball momentum.
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseAlgoConfig {
    pub variant: BaseVariant,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BaseAlgoConfig {
    fn default() -> Self {
        BaseAlgoConfig {
            variant: BaseVariant::SgdMomentum,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

impl BaseAlgoConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.variant == BaseVariant::SgdMomentum && (self.batch_size == 0 || self.batch_size > n) {
            return Err(Error::Config(format!(
                "minibatch size must lie in 1..={n}, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Mode {
    /// Exact gradient steps `1/L_H` on the last layer over frozen features.
    LastLayerGd,
    /// Stochastic last-layer steps with `η̄_t = a/√(t−τ+1)`.
    LastLayerSgd,
    /// Full-network steps `2η̄/L`, rejected and halved when the NTK rank drops.
    LazyFull,
    /// The base method itself with its rate masked by `ν`: minibatches,
    /// momentum and weight decay carry over, only the last layer moves.
    LastLayerBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform with replacement: unbiased for the full gradient.
    WithReplacement,
    /// Shuffled epochs without replacement.
    Epochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Schedule {
    /// `a` in `η̄_t = a/√(t−τ+1)`.
    pub sgd_scale: f64,
    /// Minibatch size for last-layer SGD; the base minibatch size when unset.
    pub sgd_batch_size: Option<usize>,
    pub sampling: Sampling,
    /// `η̄ ∈ (0, 1)` for lazy steps.
    pub lazy_eta_bar: f64,
    /// Gradient Lipschitz constant for lazy steps; estimated at `w^τ` when unset.
    pub lipschitz: Option<f64>,
    pub max_halvings: u32,
}

impl Default for Phase2Schedule {
    fn default() -> Self {
        Phase2Schedule {
            sgd_scale: 0.01,
            sgd_batch_size: None,
            sampling: Sampling::WithReplacement,
            lazy_eta_bar: 0.5,
            lipschitz: None,
            max_halvings: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoPhaseConfig {
    /// `T`.
    pub total_steps: usize,
    /// Explicit switch step; overrides `tau_fraction`.
    pub tau: Option<usize>,
    /// `τ₀`, giving `τ = ⌊τ₀ T⌋`.
    pub tau_fraction: f64,
    /// Standard deviation of the perturbation, one entry for every hidden
    /// layer or a single entry shared by all of them.
    pub noise: Vec<f64>,
    pub phase2_mode: Phase2Mode,
    pub schedule: Phase2Schedule,
    pub seed: u64,
    /// Compute ranks every `k` steps; 0 disables monitoring.
    pub monitor_every: usize,
    pub record_wall_time: bool,
}

impl Default for TwoPhaseConfig {
    fn default() -> Self {
        TwoPhaseConfig {
            total_steps: 1000,
            tau: None,
            tau_fraction: 0.6,
            noise: vec![0.001],
            phase2_mode: Phase2Mode::LastLayerGd,
            schedule: Phase2Schedule::default(),
            seed: 0,
            monitor_every: 0,
            record_wall_time: false,
        }
    }
}

impl TwoPhaseConfig {
    pub fn tau(&self) -> usize {
        self.tau
            .unwrap_or_else(|| (self.tau_fraction * self.total_steps as f64).floor() as usize)
    }

    /// Per-layer noise scales for a network with `depth` hidden layers.
    pub fn sigmas(&self, depth: usize) -> Result<Vec<f64>> {
        match self.noise.len() {
            1 => Ok(vec![self.noise[0]; depth]),
            k if k == depth => Ok(self.noise.clone()),
            k => Err(Error::Config(format!("noise has {k} entries for {depth} hidden layers"))),
        }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if spec.depth() < 2 {
            return Err(Error::Config(format!(
                "two-phase training needs at least 2 hidden layers, got {}",
                spec.depth()
            )));
        }
        if self.tau.is_none() && !(0.0..=1.0).contains(&self.tau_fraction) {
            return Err(Error::Config(format!("tau_fraction must lie in [0, 1], got {}", self.tau_fraction)));
        }
        if self.tau() > self.total_steps {
            return Err(Error::Config(format!(
                "switch step {} exceeds the total of {} steps",
                self.tau(),
                self.total_steps
            )));
        }
        for (h, s) in self.sigmas(spec.depth())?.iter().enumerate() {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "noise scale for hidden layer {} must be positive (the perturbation must be a non-degenerate Gaussian), got {s}",
                    h + 1
                )));
            }
        }
        let s = &self.schedule;
        if !(s.sgd_scale > 0.0 && s.sgd_scale.is_finite()) {
            return Err(Error::Config(format!("sgd_scale must be positive, got {}", s.sgd_scale)));
        }
        if s.sgd_batch_size == Some(0) {
            return Err(Error::Config("sgd_batch_size must be at least 1".into()));
        }
        if !(s.lazy_eta_bar > 0.0 && s.lazy_eta_bar < 1.0) {
            return Err(Error::Config(format!("lazy_eta_bar must lie in (0, 1), got {}", s.lazy_eta_bar)));
        }
        if let Some(l) = s.lipschitz {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lipschitz must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

/// One optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub t: usize,
    pub phase: u8,
    /// `L(w^t)` over the full training set.
    pub loss: f64,
    /// Norm of the gradient used for the update.
    pub grad_norm: f64,
    pub step_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntk_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_preserved: Option<bool>,
    /// Lazy steps rejected before this one was accepted.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub rejected: u32,
    /// `‖∇L(w^t) − ∇L(w^{t−1})‖ / ‖w^t − w^{t−1}‖` in lazy mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

/// State right after the perturbation.
#[derive(Debug, Clone)]
pub struct PhaseTwoStart {
    pub tau: usize,
    pub params: Params,
    /// `h_X^{(H)}(w^τ)`.
    pub features: Matrix,
    pub bn_stats: BnStats,
    pub loss: f64,
    pub l_h: f64,
    pub ntk: Option<NtkSnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub tau: usize,
    pub total_steps: usize,
    pub phase2_mode: Phase2Mode,
    pub initial_loss: f64,
    /// `L(w^τ)` after the perturbation.
    pub loss_at_tau: f64,
    /// Running argmin of the loss over `{τ, …, T}`.
    pub t_star: usize,
    pub best_loss: f64,
    pub final_loss: f64,
    pub l_h: Option<f64>,
    pub lipschitz: Option<f64>,
    pub feature_rank_at_tau: Option<usize>,
    pub ntk_rank_at_tau: Option<usize>,
    /// `max ‖g^t‖²` over phase 2.
    pub max_grad_sq: f64,
    pub rejected_steps: usize,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Loss at step `t` (`t = 0` is the initial point, `t = τ` the perturbed one).
    pub fn loss_at(&self, t: usize) -> f64 {
        if t == self.tau {
            self.loss_at_tau
        } else if t == 0 {
            self.initial_loss
        } else {
            self.records[t - 1].loss
        }
    }

    /// Phase-2 losses `L(w^τ), …, L(w^T)`.
    pub fn phase2_losses(&self) -> Vec<f64> {
        let mut out = vec![self.loss_at_tau];
        out.extend(self.records[self.tau..].iter().map(|r| r.loss));
        out
    }
}

/// Hooks called while a run progresses.
pub trait Observer {
    fn phase_two_start(&mut self, _start: &PhaseTwoStart) -> Result<()> {
        Ok(())
    }

    fn record(&mut self, _record: &TrainRecord) -> Result<()> {
        Ok(())
    }

    /// Parameters after phase-2 step `t`.
    fn iterate(&mut self, _t: usize, _params: &Params) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Ones over the last layer, zeros elsewhere.
pub fn nu_mask(params: &Params) -> Vec<f64> {
    let split = params.layout().hidden_len;
    (0..params.len()).map(|i| if i < split { 0.0 } else { 1.0 }).collect()
}

/// Adds `N(0, σ_h²)` noise to every parameter of hidden layer `h`.
pub fn perturb(params: &Params, sigmas: &[f64], seed: u64) -> Result<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PERTURB);
    perturb_with(params, sigmas, &mut rng)
}

fn perturb_with(params: &Params, sigmas: &[f64], rng: &mut ChaCha8Rng) -> Result<Params> {
    let layers = params.layout().hidden_layers().to_vec();
    if sigmas.len() != layers.len() {
        return Err(Error::Config(format!(
            "{} noise scales for {} hidden layers",
            sigmas.len(),
            layers.len()
        )));
    }
    let mut out = params.clone();
    for (layer, &s) in layers.iter().zip(sigmas) {
        let normal = Normal::new(0.0, s).map_err(|e| Error::Config(format!("noise scale {s}: {e}")))?;
        for i in layer.range() {
            let v = out.get(i) + normal.sample(rng);
            out.set(i, v);
        }
    }
    Ok(out)
}

/// `L_H = (L_ℓ/n) Σ_i ‖[h_i, 1]‖²`.
pub fn compute_l_h(kind: LossKind, h: &Matrix) -> f64 {
    let n = h.rows() as f64;
    let total: f64 = (0..h.rows()).map(|i| linalg::dot(h.row(i), h.row(i)) + 1.0).sum();
    kind.lipschitz() * total / n
}

/// Full-set loss and gradient.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    y: &Matrix,
    kind: LossKind,
    bn_mode: BnMode<'_>,
) -> Result<(f64, Vec<f64>)> {
    let trace = network::forward(spec, params, x, bn_mode)?;
    let value = loss::loss_value(kind, &trace.output, y)?;
    let upstream = loss::loss_grad(kind, &trace.output, y)?;
    let grad = network::backprop_trace(spec, params, &trace, &upstream, ParamSubset::All)?;
    Ok((value, grad))
}

pub fn full_loss(spec: &NetworkSpec, params: &Params, x: &Matrix, y: &Matrix, kind: LossKind) -> Result<f64> {
    let f = network::forward_output(spec, params, x)?;
    let v = loss::loss_value(kind, &f, y)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss became {v}")));
    }
    Ok(v)
}

/// Power-iteration estimate of the largest Hessian eigenvalue at `params`,
/// using symmetric gradient differences.
pub fn estimate_lipschitz(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    y: &Matrix,
    kind: LossKind,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_LIPSCHITZ);
    let d = params.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = linalg::norm2(&v);
    v.iter_mut().for_each(|e| *e /= nv);
    let eps = 1e-5 * linalg::norm2(params.as_slice()).max(1.0);
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let mut p = params.clone();
            for (w, dv) in p.as_mut_slice().iter_mut().zip(&v) {
                *w += sign * eps * dv;
            }
            Ok(loss_and_grad(spec, &p, x, y, kind, BnMode::Batch)?.1)
        };
        let gp = shifted(1.0)?;
        let gm = shifted(-1.0)?;
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        lambda = linalg::norm2(&hv);
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Numeric(format!("curvature estimate is {lambda}")));
        }
        v = hv.into_iter().map(|e| e / lambda).collect();
    }
    Ok(lambda)
}

struct Clock {
    start: Option<Instant>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Clock {
            start: enabled.then(Instant::now),
        }
    }

    fn ms(&self) -> Option<f64> {
        self.start.map(|s| s.elapsed().as_secs_f64() * 1e3)
    }
}

fn record(t: usize, phase: u8, loss: f64, grad_norm: f64, step_size: f64, clock: &Clock) -> TrainRecord {
    TrainRecord {
        t,
        phase,
        loss,
        grad_norm,
        step_size,
        feature_rank: None,
        ntk_rank: None,
        rank_preserved: None,
        rejected: 0,
        lipschitz_ratio: None,
        wall_ms: clock.ms(),
    }
}

fn monitored(every: usize, t: usize) -> bool {
    every > 0 && t % every == 0
}

fn feature_rank(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<usize> {
    let h = network::forward_hidden(spec, params, x)?;
    linalg::numerical_rank(&h.hidden().with_ones_column(), None)
}

/// The base method alone for `total_steps` steps.
pub fn run_base(
    spec: &NetworkSpec,
    params0: &Params,
    data: &Dataset,
    base: &BaseAlgoConfig,
    total_steps: usize,
    kind: LossKind,
    monitor_every: usize,
    observer: &mut dyn Observer,
) -> Result<(Params, Vec<TrainRecord>)> {
    base.validate(data.len())?;
    let y = data.targets();
    let mut records = Vec::with_capacity(total_steps);
    let (params, _) = phase_one(
        spec,
        params0.clone(),
        &data.x,
        &y,
        base,
        total_steps,
        kind,
        monitor_every,
        &Clock::new(false),
        &mut records,
        observer,
    )?;
    Ok((params, records))
}

#[allow(clippy::too_many_arguments)]
fn phase_one(
    spec: &NetworkSpec,
    mut params: Params,
    x: &Matrix,
    y: &Matrix,
    base: &BaseAlgoConfig,
    steps: usize,
    kind: LossKind,
    monitor_every: usize,
    clock: &Clock,
    records: &mut Vec<TrainRecord>,
    observer: &mut dyn Observer,
) -> Result<(Params, Vec<f64>)> {
    let n = x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    rng.set_stream(STREAM_BASE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut velocity = vec![0.0; params.len()];
    for t in 1..=steps {
        let mut grad = match base.variant {
            BaseVariant::Gd => loss_and_grad(spec, &params, x, y, kind, BnMode::Batch)?.1,
            BaseVariant::SgdMomentum => {
                if cursor + base.batch_size > n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = &order[cursor..cursor + base.batch_size];
                cursor += base.batch_size;
                loss_and_grad(spec, &params, &x.select_rows(idx), &y.select_rows(idx), kind, BnMode::Batch)?.1
            }
        };
        for (g, w) in grad.iter_mut().zip(params.as_slice()) {
            *g += base.weight_decay * w;
        }
        let grad_norm = linalg::norm2(&grad);
        for ((v, g), w) in velocity.iter_mut().zip(&grad).zip(params.as_mut_slice()) {
            *v = base.momentum * *v + g;
            *w -= base.learning_rate * *v;
        }
        let loss = full_loss(spec, &params, x, y, kind)?;
        let mut rec = record(t, 1, loss, grad_norm, base.learning_rate, clock);
        if monitored(monitor_every, t) {
            rec.feature_rank = Some(feature_rank(spec, &params, x)?);
        }
        observer.record(&rec)?;
        records.push(rec);
    }
    Ok((params, velocity))
}

/// Runs both phases and returns the final parameters with the full log.
pub fn run_two_phase(
    spec: &NetworkSpec,
    params0: &Params,
    data: &Dataset,
    base: &BaseAlgoConfig,
    cfg: &TwoPhaseConfig,
    kind: LossKind,
) -> Result<(Params, TrainLog)> {
    run_two_phase_with(spec, params0, data, base, cfg, kind, &mut ())
}

pub fn run_two_phase_with(
    spec: &NetworkSpec,
    params0: &Params,
    data: &Dataset,
    base: &BaseAlgoConfig,
    cfg: &TwoPhaseConfig,
    kind: LossKind,
    observer: &mut dyn Observer,
) -> Result<(Params, TrainLog)> {
    cfg.validate(spec)?;
    base.validate(data.len())?;
    let x = &data.x;
    let y = data.targets();
    let n = x.rows();
    let tau = cfg.tau();
    let total = cfg.total_steps;
    let sigmas = cfg.sigmas(spec.depth())?;
    let clock = Clock::new(cfg.record_wall_time);

    let initial_loss = full_loss(spec, params0, x, &y, kind)?;
    let mut records = Vec::with_capacity(total);
    let (params, velocity) = phase_one(
        spec,
        params0.clone(),
        x,
        &y,
        base,
        tau,
        kind,
        cfg.monitor_every,
        &clock,
        &mut records,
        observer,
    )?;

    let params = perturb(&params, &sigmas, cfg.seed)?;
    let trace = network::forward_hidden(spec, &params, x)?;
    let features = trace.hidden().clone();
    let bn_stats = trace.bn_stats();
    let loss_at_tau = loss::loss_value(kind, &trace.output, &y)?;
    let l_h = compute_l_h(kind, &features);

    let mut feature_rank_at_tau = None;
    if tau < total {
        let r = linalg::numerical_rank(&features.with_ones_column(), None)?;
        if r < n {
            return Err(Error::RankLoss { rank: r, n });
        }
        feature_rank_at_tau = Some(r);
    }
    let reference = if tau < total && (cfg.monitor_every > 0 || cfg.phase2_mode == Phase2Mode::LazyFull) {
        Some(ntk::ntk_snapshot(spec, &params, x, BnMode::Batch, RankPath::Kernel)?.with_step(tau))
    } else {
        None
    };
    let start = PhaseTwoStart {
        tau,
        params: params.clone(),
        features,
        bn_stats,
        loss: loss_at_tau,
        l_h,
        ntk: reference,
    };
    observer.phase_two_start(&start)?;

    let mut state = PhaseTwo {
        spec,
        x,
        y: &y,
        kind,
        cfg,
        base,
        clock: &clock,
        start: &start,
        max_grad_sq: 0.0,
        rejected: 0,
        lipschitz: None,
    };
    let params = match cfg.phase2_mode {
        Phase2Mode::LastLayerGd | Phase2Mode::LastLayerSgd => state.last_layer(params, &mut records, observer)?,
        Phase2Mode::LazyFull => state.lazy(params, &mut records, observer)?,
        Phase2Mode::LastLayerBase => {
            let split = params.layout().hidden_len;
            state.last_layer_base(params, velocity[split..].to_vec(), &mut records, observer)?
        }
    };

    let mut t_star = tau;
    let mut best_loss = loss_at_tau;
    for r in &records[tau..] {
        if r.loss < best_loss {
            best_loss = r.loss;
            t_star = r.t;
        }
    }
    let final_loss = records.last().map(|r| r.loss).unwrap_or(initial_loss);
    let final_loss = if tau == total { loss_at_tau } else { final_loss };
    let log = TrainLog {
        tau,
        total_steps: total,
        phase2_mode: cfg.phase2_mode,
        initial_loss,
        loss_at_tau,
        t_star,
        best_loss,
        final_loss,
        l_h: matches!(cfg.phase2_mode, Phase2Mode::LastLayerGd | Phase2Mode::LastLayerSgd).then_some(l_h),
        lipschitz: state.lipschitz,
        feature_rank_at_tau,
        ntk_rank_at_tau: start.ntk.as_ref().map(|s| s.rank),
        max_grad_sq: state.max_grad_sq,
        rejected_steps: state.rejected,
        records,
    };
    Ok((params, log))
}

struct PhaseTwo<'a> {
    spec: &'a NetworkSpec,
    x: &'a Matrix,
    y: &'a Matrix,
    kind: LossKind,
    cfg: &'a TwoPhaseConfig,
    base: &'a BaseAlgoConfig,
    clock: &'a Clock,
    start: &'a PhaseTwoStart,
    max_grad_sq: f64,
    rejected: usize,
    lipschitz: Option<f64>,
}

impl PhaseTwo<'_> {
    fn monitor(&self, rec: &mut TrainRecord, params: &Params) -> Result<()> {
        if !monitored(self.cfg.monitor_every, rec.t) {
            return Ok(());
        }
        rec.feature_rank = Some(feature_rank(self.spec, params, self.x)?);
        if let Some(reference) = &self.start.ntk {
            let snap = ntk::ntk_snapshot(self.spec, params, self.x, BnMode::Batch, RankPath::Kernel)?;
            rec.ntk_rank = Some(snap.rank);
            rec.rank_preserved = Some(ntk::assert_rank_preserved(reference, &snap)?);
        }
        Ok(())
    }

    /// Convex problem in `Z = [W; b]` of the output layer over fixed `M = [h, 1]`.
    fn last_layer(
        &mut self,
        mut params: Params,
        records: &mut Vec<TrainRecord>,
        observer: &mut dyn Observer,
    ) -> Result<Params> {
        let m = self.start.features.with_ones_column();
        let n = m.rows();
        let mut z = params.last_layer_matrix();
        let sgd = self.cfg.phase2_mode == Phase2Mode::LastLayerSgd;
        let batch = self.cfg.schedule.sgd_batch_size.unwrap_or(self.base.batch_size).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STREAM_PHASE2);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let tau = self.start.tau;
        for t in tau + 1..=self.cfg.total_steps {
            let (grad, eta) = if sgd {
                let idx: Vec<usize> = match self.cfg.schedule.sampling {
                    Sampling::WithReplacement => (0..batch).map(|_| rng.random_range(0..n)).collect(),
                    Sampling::Epochs => {
                        if cursor + batch > n {
                            order.shuffle(&mut rng);
                            cursor = 0;
                        }
                        cursor += batch;
                        order[cursor - batch..cursor].to_vec()
                    }
                };
                let mb = m.select_rows(&idx);
                let g = loss::loss_grad(self.kind, &mb.matmul(&z)?, &self.y.select_rows(&idx))?;
                let eta = self.cfg.schedule.sgd_scale / ((t - tau) as f64).sqrt();
                (mb.t_matmul(&g)?, eta)
            } else {
                let g = loss::loss_grad(self.kind, &m.matmul(&z)?, self.y)?;
                (m.t_matmul(&g)?, 1.0 / self.start.l_h)
            };
            let grad_sq = linalg::dot(grad.as_slice(), grad.as_slice());
            self.max_grad_sq = self.max_grad_sq.max(grad_sq);
            z = z.sub(&grad.scale(eta))?;
            let loss = loss::loss_value(self.kind, &m.matmul(&z)?, self.y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at step {t}")));
            }
            params.set_last_layer_matrix(&z)?;
            let mut rec = record(t, 2, loss, grad_sq.sqrt(), eta, self.clock);
            self.monitor(&mut rec, &params)?;
            observer.record(&rec)?;
            observer.iterate(t, &params)?;
            records.push(rec);
        }
        Ok(params)
    }

    /// Base-method steps on the flat last-layer block (unit-major, matching
    /// the parameter layout) over frozen features.
    fn last_layer_base(
        &mut self,
        mut params: Params,
        mut velocity: Vec<f64>,
        records: &mut Vec<TrainRecord>,
        observer: &mut dyn Observer,
    ) -> Result<Params> {
        let m = self.start.features.with_ones_column();
        let n = m.rows();
        let base = self.base;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(STREAM_PHASE2);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for t in self.start.tau + 1..=self.cfg.total_steps {
            let grad_z = match base.variant {
                BaseVariant::Gd => {
                    let g = loss::loss_grad(self.kind, &m.matmul(&params.last_layer_matrix())?, self.y)?;
                    m.t_matmul(&g)?
                }
                BaseVariant::SgdMomentum => {
                    if cursor + base.batch_size > n {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    let idx = &order[cursor..cursor + base.batch_size];
                    cursor += base.batch_size;
                    let mb = m.select_rows(idx);
                    let g = loss::loss_grad(self.kind, &mb.matmul(&params.last_layer_matrix())?, &self.y.select_rows(idx))?;
                    mb.t_matmul(&g)?
                }
            };
            let mut grad = grad_z.transpose().into_vec();
            for (g, w) in grad.iter_mut().zip(params.last_slice()) {
                *g += base.weight_decay * w;
            }
            let grad_sq = linalg::dot(&grad, &grad);
            self.max_grad_sq = self.max_grad_sq.max(grad_sq);
            for ((v, g), w) in velocity.iter_mut().zip(&grad).zip(params.last_slice_mut()) {
                *v = base.momentum * *v + g;
                *w -= base.learning_rate * *v;
            }
            let loss = loss::loss_value(self.kind, &m.matmul(&params.last_layer_matrix())?, self.y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at step {t}")));
            }
            let mut rec = record(t, 2, loss, grad_sq.sqrt(), base.learning_rate, self.clock);
            self.monitor(&mut rec, &params)?;
            observer.record(&rec)?;
            observer.iterate(t, &params)?;
            records.push(rec);
        }
        Ok(params)
    }

    fn lazy(&mut self, mut params: Params, records: &mut Vec<TrainRecord>, observer: &mut dyn Observer) -> Result<Params> {
        let (spec, x, y, kind) = (self.spec, self.x, self.y, self.kind);
        let reference = self.start.ntk.as_ref().expect("reference kernel is computed for lazy mode");
        let l = match self.cfg.schedule.lipschitz {
            Some(l) => l,
            None => estimate_lipschitz(spec, &params, x, y, kind, 30, self.cfg.seed)?,
        };
        self.lipschitz = Some(l);
        let mut eta = 2.0 * self.cfg.schedule.lazy_eta_bar / l;
        let (_, mut grad) = loss_and_grad(spec, &params, x, y, kind, BnMode::Batch)?;
        for t in self.start.tau + 1..=self.cfg.total_steps {
            let grad_sq = linalg::dot(&grad, &grad);
            self.max_grad_sq = self.max_grad_sq.max(grad_sq);
            let mut rejected = 0;
            let (candidate, snap) = loop {
                let mut candidate = params.clone();
                for (w, g) in candidate.as_mut_slice().iter_mut().zip(&grad) {
                    *w -= eta * g;
                }
                let snap = ntk::ntk_snapshot(spec, &candidate, x, BnMode::Batch, RankPath::Kernel)?;
                if ntk::assert_rank_preserved(reference, &snap)? {
                    break (candidate, snap);
                }
                rejected += 1;
                if rejected > self.cfg.schedule.max_halvings {
                    return Err(Error::Numeric(format!(
                        "no rank-preserving step found at step {t} after {} halvings",
                        self.cfg.schedule.max_halvings
                    )));
                }
                eta *= 0.5;
            };
            self.rejected += rejected as usize;
            let (loss, next_grad) = loss_and_grad(spec, &candidate, x, y, kind, BnMode::Batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at step {t}")));
            }
            let dg: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let dw: Vec<f64> = candidate.as_slice().iter().zip(params.as_slice()).map(|(a, b)| a - b).collect();
            let dw_norm = linalg::norm2(&dw);
            let mut rec = record(t, 2, loss, grad_sq.sqrt(), eta, self.clock);
            rec.rejected = rejected;
            rec.lipschitz_ratio = (dw_norm > 0.0).then(|| linalg::norm2(&dg) / dw_norm);
            rec.ntk_rank = Some(snap.rank);
            rec.rank_preserved = Some(true);
            if monitored(self.cfg.monitor_every, t) {
                rec.feature_rank = Some(feature_rank(spec, &candidate, x)?);
            }
            params = candidate;
            grad = next_grad;
            observer.record(&rec)?;
            observer.iterate(t, &params)?;
            records.push(rec);
        }
        Ok(params)
    }
}
