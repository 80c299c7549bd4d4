//! Command-line front end: `verify`, `train`, `sweep` and `gen-data`, driven
//! by one TOML experiment file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, BoundConstants, BoundReport, SgdSums};
use crate::data::{self, Dataset, TargetKind};
use crate::error::{Error, Result};
use crate::expressivity::{self, DistinguishabilityReport, ExpressivityReport, WitnessCase};
use crate::loss::LossKind;
use crate::network::{NetworkSpec, Params};
use crate::trainer::{self, BaseAlgoConfig, Observer, Phase2Mode, PhaseTwoStart, TrainLog, TrainRecord, TwoPhaseConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Hidden layers before the last one.
    pub inner: Vec<usize>,
    /// `m_H`; `⌈width_factor · n⌉` when unset.
    pub last_hidden: Option<usize>,
    pub width_factor: f64,
    pub sharpness: f64,
    /// One flag per hidden layer; empty means no normalization.
    pub batch_norm: Vec<bool>,
    pub bn_epsilon: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            inner: vec![64],
            last_hidden: None,
            width_factor: 1.1,
            sharpness: 100.0,
            batch_norm: Vec::new(),
            bn_epsilon: 1e-5,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub n: usize,
    pub input_dim: usize,
    /// Targets per sample, or number of classes.
    pub output_dim: usize,
    pub min_margin: f64,
    pub kind: TargetKind,
    pub seed: u64,
    pub path: Option<PathBuf>,
    /// Scale every input row to unit norm after loading.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            n: 128,
            input_dim: 16,
            output_dim: 4,
            min_margin: 0.05,
            kind: TargetKind::ClassIndex,
            seed: 0,
            path: None,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub trials: usize,
    pub init_scale: f64,
    pub witness: bool,
    pub rank_tolerance: Option<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            trials: 20,
            init_scale: 1.0,
            witness: true,
            rank_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub tau_fractions: Vec<f64>,
    pub noise: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            tau_fractions: vec![0.4, 0.5, 0.6, 0.8],
            noise: vec![0.0001, 0.001, 0.01],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub enabled: bool,
    /// Supplied `G²`; the trajectory maximum is used otherwise.
    pub g_sq: Option<f64>,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection { enabled: true, g_sq: None }
    }
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    pub network: NetworkSection,
    pub data: DataSection,
    pub base: BaseAlgoConfig,
    pub two_phase: TwoPhaseConfig,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub bounds: BoundsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            loss: default_loss(),
            network: NetworkSection::default(),
            data: DataSection::default(),
            base: BaseAlgoConfig::default(),
            two_phase: TwoPhaseConfig::default(),
            verify: VerifySection::default(),
            sweep: SweepSection::default(),
            bounds: BoundsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Uses one seed for initialization, minibatches and the perturbation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.network.seed = seed;
        self.base.seed = seed;
        self.two_phase.seed = seed;
        self
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let mut ds = match d.source {
            DataSource::Synthetic => data::synth_gen(d.n, d.input_dim, d.output_dim, d.min_margin, d.kind, d.seed)?,
            DataSource::Csv => {
                let path = d
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.path is required for csv data".into()))?;
                data::load_csv(path, d.input_dim, d.kind)?
            }
        };
        if d.normalize {
            ds.x = data::normalize_inputs(&ds.x)?;
        }
        Ok(ds)
    }

    pub fn network_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let net = &self.network;
        let last = match net.last_hidden {
            Some(m) => m,
            None => {
                if !(net.width_factor > 0.0) {
                    return Err(Error::Config(format!("width_factor must be positive, got {}", net.width_factor)));
                }
                (net.width_factor * data.len() as f64).ceil() as usize
            }
        };
        let mut hidden = net.inner.clone();
        hidden.push(last);
        let bn = if net.batch_norm.is_empty() {
            vec![false; hidden.len()]
        } else {
            net.batch_norm.clone()
        };
        NetworkSpec::new(data.input_dim(), hidden, data.output_dim(), net.sharpness, bn, net.bn_epsilon)
    }

    pub fn init_params(&self, spec: &NetworkSpec) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(self.network.seed);
        Params::init_gaussian(spec, self.network.init_scale, &mut rng)
    }

    /// Every precondition that can be checked before training.
    pub fn validate(&self, data: &Dataset) -> Result<NetworkSpec> {
        if self.loss == LossKind::CrossEntropy && data.kind == TargetKind::Regression {
            return Err(Error::Config(
                "cross-entropy needs class targets (class_index or one_hot), the data are regression targets".into(),
            ));
        }
        if !(self.network.init_scale > 0.0) {
            return Err(Error::Config(format!("init_scale must be positive, got {}", self.network.init_scale)));
        }
        let spec = self.network_spec(data)?;
        self.base.validate(data.len())?;
        self.two_phase.validate(&spec)?;
        if let Some(g) = self.bounds.g_sq {
            if !(g >= 0.0) {
                return Err(Error::Config(format!("bounds.g_sq must be non-negative, got {g}")));
            }
        }
        Ok(spec)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::InvalidTargets(_) | Error::Io(_) | Error::SizeCap(_) => EXIT_CONFIG,
        Error::NotDistinguishable { .. } | Error::WitnessNotFound { .. } => EXIT_VERIFY,
        _ => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "twophase", version, about = "Two-phase training with convergence checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub monitor_every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check distinguishability and full-rank features.
    Verify(CommonArgs),
    /// Run two-phase training and write per-step records.
    Train(CommonArgs),
    /// Grid over switch fraction and noise scale.
    Sweep(CommonArgs),
    /// Write the configured synthetic dataset as CSV.
    GenData(CommonArgs),
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Ok(v) = std::env::var("TWOPHASE_THREADS") {
        match v.parse::<usize>() {
            Ok(k) if k > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => {
                eprintln!("error: TWOPHASE_THREADS must be a positive integer, got {v:?}");
                return EXIT_CONFIG;
            }
        }
    }
    let (args, cmd): (&CommonArgs, fn(&ExperimentConfig, &Path) -> Result<i32>) = match &cli.command {
        Command::Verify(a) => (a, cmd_verify),
        Command::Train(a) => (a, cmd_train),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::GenData(a) => (a, cmd_gen_data),
    };
    let result = load_config(args).and_then(|cfg| {
        fs::create_dir_all(&args.out)?;
        cmd(&cfg, &args.out)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(k) = args.monitor_every {
        cfg.two_phase.monitor_every = k;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessSummary {
    pub case: Option<WitnessCase>,
    pub passed: bool,
    pub doublings: Option<u32>,
    pub scale: Option<f64>,
    pub dominance: Option<f64>,
    pub rank: Option<usize>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub n: usize,
    pub input_dim: usize,
    pub last_hidden: usize,
    pub distinguishability: DistinguishabilityReport,
    pub trials: usize,
    pub trials_passed: usize,
    pub worst_trial: Option<ExpressivityReport>,
    pub witness: Option<WitnessSummary>,
    pub messages: Vec<String>,
}

pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let data = cfg.load_dataset()?;
    let spec = cfg.network_spec(&data)?;
    let report = verify(cfg, &spec, &data)?;
    write_json(&out.join("verify.json"), &report)?;
    fs::write(out.join("verify.txt"), verify_text(&report))?;
    print!("{}", verify_text(&report));
    Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY })
}

pub fn verify(cfg: &ExperimentConfig, spec: &NetworkSpec, data: &Dataset) -> Result<VerifyReport> {
    let n = data.len();
    let mut messages = Vec::new();
    let dist = expressivity::check_distinguishability(&data.x);
    if !dist.passed {
        let (i, j) = dist.worst_pair.unwrap_or((0, 0));
        messages.push(format!(
            "inputs are not distinguishable: rows {i} and {j} give ‖x_i‖² − x_iᵀx_j = {:e}",
            dist.margin
        ));
    }
    let m_h = spec.last_hidden();
    if m_h + 1 < n {
        messages.push(format!(
            "rank [h, 1] ≤ m_H + 1 = {} < n = {n}: the last hidden layer is too narrow for full row rank",
            m_h + 1
        ));
    }
    let mut prob = expressivity::probabilistic_expressivity(spec, &data.x, cfg.verify.trials, cfg.verify.init_scale, cfg.network.seed)?;
    if let Some(tol) = cfg.verify.rank_tolerance {
        for r in prob.reports.iter_mut() {
            r.passed = r.sigma_min > tol || r.rank == n && r.tolerance <= tol;
        }
        prob.passed = prob.reports.iter().filter(|r| r.passed).count();
    }
    let worst_trial = prob.reports.iter().min_by(|a, b| a.sigma_min.total_cmp(&b.sigma_min)).cloned();
    if prob.passed < prob.trials {
        messages.push(format!(
            "{} of {} random draws gave full row rank features",
            prob.passed, prob.trials
        ));
    }
    let witness = if cfg.verify.witness && dist.passed {
        Some(match expressivity::witness_case(spec, n) {
            Err(e) => WitnessSummary {
                case: None,
                passed: true,
                doublings: None,
                scale: None,
                dominance: None,
                rank: None,
                message: Some(format!("construction not applicable: {e}")),
            },
            Ok(case) => match expressivity::construct_witness(spec, &data.x) {
                Ok(w) => {
                    let rep = expressivity::check_expressivity(spec, &w.params, &data.x, None)?;
                    WitnessSummary {
                        case: Some(case),
                        passed: rep.passed,
                        doublings: Some(w.doublings),
                        scale: Some(w.scale),
                        dominance: Some(w.dominance),
                        rank: Some(rep.rank),
                        message: None,
                    }
                }
                Err(e) => {
                    messages.push(format!("witness construction failed: {e}"));
                    WitnessSummary {
                        case: Some(case),
                        passed: false,
                        doublings: None,
                        scale: None,
                        dominance: None,
                        rank: None,
                        message: Some(e.to_string()),
                    }
                }
            },
        })
    } else {
        None
    };
    let passed = dist.passed && m_h + 1 >= n && prob.passed == prob.trials && witness.as_ref().is_none_or(|w| w.passed);
    Ok(VerifyReport {
        passed,
        n,
        input_dim: data.input_dim(),
        last_hidden: m_h,
        distinguishability: dist,
        trials: prob.trials,
        trials_passed: prob.passed,
        worst_trial,
        witness,
        messages,
    })
}

fn verify_text(r: &VerifyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "verify: {}", if r.passed { "PASS" } else { "FAIL" });
    let _ = writeln!(s, "  samples            {}", r.n);
    let _ = writeln!(s, "  input dim          {}", r.input_dim);
    let _ = writeln!(s, "  last hidden width  {}", r.last_hidden);
    let _ = writeln!(
        s,
        "  distinguishability {} (margin {:e})",
        if r.distinguishability.passed { "ok" } else { "failed" },
        r.distinguishability.margin
    );
    let _ = writeln!(s, "  random draws       {}/{} full rank", r.trials_passed, r.trials);
    if let Some(t) = &r.worst_trial {
        let _ = writeln!(s, "  smallest sigma     {:e} (tolerance {:e})", t.sigma_min, t.tolerance);
    }
    if let Some(w) = &r.witness {
        match (&w.case, w.doublings) {
            (Some(c), Some(d)) => {
                let _ = writeln!(s, "  witness            {c:?}, {d} doublings, rank {}", w.rank.unwrap_or(0));
            }
            _ => {
                let _ = writeln!(s, "  witness            {}", w.message.as_deref().unwrap_or("-"));
            }
        }
    }
    for m in &r.messages {
        let _ = writeln!(s, "  note: {m}");
    }
    s
}

/// One line of `run.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLine {
    #[serde(flatten)]
    pub record: TrainRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suboptimality: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub tau: usize,
    pub phase2_mode: Phase2Mode,
    pub initial_loss: f64,
    pub loss_at_tau: f64,
    pub final_loss: f64,
    /// Minimum over the per-step records.
    pub best_loss: f64,
    pub t_star: usize,
    pub loss_at_t_star: f64,
    pub l_h: Option<f64>,
    pub r_sq: Option<f64>,
    pub g_sq: Option<f64>,
    pub loss_star: Option<f64>,
    pub violations: Option<usize>,
    pub bound_note: Option<String>,
    pub rejected_steps: usize,
}

struct StreamObserver<'a> {
    writer: BufWriter<Box<dyn Write>>,
    cfg: &'a ExperimentConfig,
    y: &'a crate::linalg::Matrix,
    constants: Option<BoundConstants>,
    sums: SgdSums,
    best: f64,
    tau: usize,
}

impl StreamObserver<'_> {
    fn streamed_bound(&mut self, rec: &TrainRecord) -> Result<(Option<f64>, Option<f64>)> {
        if rec.phase != 2 {
            return Ok((None, None));
        }
        self.best = self.best.min(rec.loss);
        match self.constants {
            Some(BoundConstants::Gd { r_sq, l_h, loss_star }) => {
                Ok((Some(bounds::gd_bound(r_sq, l_h, rec.t, self.tau)?), Some(rec.loss - loss_star)))
            }
            Some(BoundConstants::Sgd {
                r_sq,
                g_sq,
                scale,
                loss_star,
                g_sq_measured: false,
            }) => {
                // The k = t term joins the sums once w^t exists.
                self.sums.push(bounds::inverse_sqrt_rate(scale, rec.t, self.tau))?;
                Ok((Some(self.sums.bound(r_sq, g_sq)?), Some(self.best - loss_star)))
            }
            _ => Ok((None, None)),
        }
    }
}

impl Observer for StreamObserver<'_> {
    fn phase_two_start(&mut self, start: &PhaseTwoStart) -> Result<()> {
        self.tau = start.tau;
        self.best = start.loss;
        if !self.cfg.bounds.enabled || self.cfg.loss != LossKind::Squared || start.tau == self.cfg.two_phase.total_steps {
            return Ok(());
        }
        let opt = bounds::solve_last_layer_optimum(LossKind::Squared, &start.features, self.y, &start.params.last_layer_matrix())?;
        self.constants = match self.cfg.two_phase.phase2_mode {
            Phase2Mode::LastLayerGd => Some(BoundConstants::Gd {
                r_sq: opt.r_sq,
                l_h: start.l_h,
                loss_star: opt.loss,
            }),
            Phase2Mode::LastLayerSgd => {
                let scale = self.cfg.two_phase.schedule.sgd_scale;
                self.sums.push(bounds::inverse_sqrt_rate(scale, start.tau, start.tau))?;
                Some(BoundConstants::Sgd {
                    r_sq: opt.r_sq,
                    g_sq: self.cfg.bounds.g_sq.unwrap_or(0.0),
                    scale,
                    loss_star: opt.loss,
                    g_sq_measured: self.cfg.bounds.g_sq.is_none(),
                })
            }
            _ => None,
        };
        Ok(())
    }

    fn record(&mut self, rec: &TrainRecord) -> Result<()> {
        let (bound, suboptimality) = self.streamed_bound(rec)?;
        let line = RunLine {
            record: rec.clone(),
            bound,
            suboptimality,
        };
        serde_json::to_writer(&mut self.writer, &line)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }
}

/// Output of a training run plus its bound check.
pub struct TrainOutcome {
    pub log: TrainLog,
    pub summary: RunSummary,
    pub bounds: Option<BoundReport>,
}

pub fn train(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let spec = cfg.validate(data)?;
    let params = cfg.init_params(&spec);
    let y = data.targets();
    let sink: Box<dyn Write> = match out {
        Some(dir) => Box::new(File::create(dir.join("run.jsonl"))?),
        None => Box::new(std::io::sink()),
    };
    let mut obs = StreamObserver {
        writer: BufWriter::new(sink),
        cfg,
        y: &y,
        constants: None,
        sums: SgdSums::default(),
        best: f64::INFINITY,
        tau: 0,
    };
    let result = trainer::run_two_phase_with(&spec, &params, data, &cfg.base, &cfg.two_phase, cfg.loss, &mut obs);
    obs.writer.flush()?;
    let (_, log) = result?;

    let mut constants = obs.constants.clone();
    if let Some(BoundConstants::Sgd { g_sq, g_sq_measured, .. }) = constants.as_mut() {
        if *g_sq_measured {
            *g_sq = log.max_grad_sq;
        }
    }
    let report = constants.as_ref().map(|c| bounds::check_bounds(&log, c)).transpose()?;
    let bound_note = if report.is_some() {
        None
    } else if !cfg.bounds.enabled {
        Some("disabled".into())
    } else if cfg.loss != LossKind::Squared {
        Some("no exact last-layer optimum for cross-entropy".into())
    } else if log.tau == log.total_steps {
        Some("no second phase".into())
    } else {
        Some(format!("no bound for {:?}", log.phase2_mode))
    };
    let best_loss = log.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let (r_sq, g_sq, loss_star) = match &constants {
        Some(BoundConstants::Gd { r_sq, loss_star, .. }) => (Some(*r_sq), None, Some(*loss_star)),
        Some(BoundConstants::Sgd { r_sq, g_sq, loss_star, .. }) => (Some(*r_sq), Some(*g_sq), Some(*loss_star)),
        _ => (None, None, None),
    };
    let summary = RunSummary {
        steps: log.total_steps,
        tau: log.tau,
        phase2_mode: log.phase2_mode,
        initial_loss: log.initial_loss,
        loss_at_tau: log.loss_at_tau,
        final_loss: log.final_loss,
        best_loss,
        t_star: log.t_star,
        loss_at_t_star: log.best_loss,
        l_h: log.l_h,
        r_sq,
        g_sq,
        loss_star,
        violations: report.as_ref().map(|r| r.violations),
        bound_note,
        rejected_steps: log.rejected_steps,
    };
    Ok(TrainOutcome {
        log,
        summary,
        bounds: report,
    })
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let data = cfg.load_dataset()?;
    let outcome = train(cfg, &data, Some(out))?;
    write_json(&out.join("summary.json"), &outcome.summary)?;
    fs::write(out.join("summary.txt"), summary_text(&outcome.summary))?;
    if let Some(b) = &outcome.bounds {
        write_json(&out.join("bounds.json"), b)?;
    }
    print!("{}", summary_text(&outcome.summary));
    Ok(match outcome.summary.violations {
        Some(v) if v > 0 => EXIT_VERIFY,
        _ => EXIT_OK,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6e}"))
}

fn summary_text(s: &RunSummary) -> String {
    let mut out = String::new();
    let rows: Vec<(&str, String)> = vec![
        ("steps", s.steps.to_string()),
        ("tau", s.tau.to_string()),
        ("phase 2 mode", format!("{:?}", s.phase2_mode)),
        ("initial loss", format!("{:.6e}", s.initial_loss)),
        ("loss at tau", format!("{:.6e}", s.loss_at_tau)),
        ("final loss", format!("{:.6e}", s.final_loss)),
        ("best loss", format!("{:.6e}", s.best_loss)),
        ("t*", s.t_star.to_string()),
        ("L_H", opt(s.l_h)),
        ("R^2", opt(s.r_sq)),
        ("G^2", opt(s.g_sq)),
        ("violations", s.violations.map_or_else(|| "-".into(), |v| v.to_string())),
        ("bounds", s.bound_note.clone().unwrap_or_else(|| "checked".into())),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<14} {v}");
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub tau_fraction: f64,
    pub noise: f64,
    pub final_losses: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub errors: Vec<String>,
}

pub fn sweep(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<SweepCell>> {
    let s = &cfg.sweep;
    if s.tau_fractions.is_empty() || s.noise.is_empty() || s.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one switch fraction, noise scale and seed".into()));
    }
    for &f in &s.tau_fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("switch fraction {f} is outside [0, 1]")));
        }
    }
    for &d in &s.noise {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("noise scale {d} must be positive")));
        }
    }
    let grid: Vec<(f64, f64)> = s
        .tau_fractions
        .iter()
        .flat_map(|&f| s.noise.iter().map(move |&d| (f, d)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(tau_fraction, noise)| {
            let mut final_losses = Vec::new();
            let mut errors = Vec::new();
            for &seed in &s.seeds {
                let mut c = cfg.clone().with_seed(seed);
                c.two_phase.tau = None;
                c.two_phase.tau_fraction = tau_fraction;
                c.two_phase.noise = vec![noise];
                c.bounds.enabled = false;
                match train(&c, data, None) {
                    Ok(o) => final_losses.push(o.summary.final_loss),
                    Err(e) => errors.push(format!("seed {seed}: {e}")),
                }
            }
            let (mean, std) = mean_std(&final_losses);
            SweepCell {
                tau_fraction,
                noise,
                final_losses,
                mean,
                std,
                errors,
            }
        })
        .collect();
    Ok(cells)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    let data = cfg.load_dataset()?;
    cfg.validate(&data)?;
    let cells = sweep(cfg, &data)?;
    write_json(&out.join("sweep.json"), &cells)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["tau_fraction", "noise", "runs", "mean", "std", "failures"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for c in &cells {
        w.write_record([
            c.tau_fraction.to_string(),
            c.noise.to_string(),
            c.final_losses.len().to_string(),
            c.mean.map_or_else(String::new, |m| m.to_string()),
            c.std.map_or_else(String::new, |m| m.to_string()),
            c.errors.len().to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    let text = sweep_text(&cells);
    fs::write(out.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(if cells.iter().any(|c| !c.errors.is_empty()) { EXIT_NUMERIC } else { EXIT_OK })
}

fn sweep_text(cells: &[SweepCell]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8} {:>10} {:>5} {:>14} {:>14} {:>8}", "tau0", "delta0", "runs", "mean", "std", "failed");
    for c in cells {
        let _ = writeln!(
            s,
            "{:>8} {:>10} {:>5} {:>14} {:>14} {:>8}",
            c.tau_fraction,
            c.noise,
            c.final_losses.len(),
            opt(c.mean),
            opt(c.std),
            c.errors.len()
        );
    }
    s
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::Config("gen-data needs data.source = \"synthetic\"".into()));
    }
    let data = cfg.load_dataset()?;
    data.save_csv(&out.join("data.csv"))?;
    write_json(&out.join("data.json"), &data.provenance)?;
    println!("wrote {} samples to {}", data.len(), out.join("data.csv").display());
    Ok(EXIT_OK)
}
