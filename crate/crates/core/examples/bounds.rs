//! Last-layer gradient descent on a squared loss, checked step by step
//! against `R² L_H / (2 (t − τ))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twophase::bounds::{check_bounds, solve_last_layer_optimum, BoundConstants};
use twophase::data::{synth_gen, TargetKind};
use twophase::trainer::{run_two_phase_with, BaseAlgoConfig, BaseVariant, Observer, PhaseTwoStart, TwoPhaseConfig};
use twophase::{LossKind, NetworkSpec, Params};

#[derive(Default)]
struct AtSwitch(Option<PhaseTwoStart>);

impl Observer for AtSwitch {
    fn phase_two_start(&mut self, start: &PhaseTwoStart) -> twophase::Result<()> {
        self.0 = Some(start.clone());
        Ok(())
    }
}

fn main() -> twophase::Result<()> {
    let data = synth_gen(16, 8, 2, 0.2, TargetKind::Regression, 11)?;
    let spec = NetworkSpec::plain(8, vec![32, 32], 2, 1.0)?;
    let params = Params::init_gaussian(&spec, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
    let base = BaseAlgoConfig {
        variant: BaseVariant::Gd,
        ..Default::default()
    };
    let cfg = TwoPhaseConfig {
        total_steps: 3000,
        tau: Some(1000),
        ..Default::default()
    };
    let mut obs = AtSwitch::default();
    let (_, log) = run_two_phase_with(&spec, &params, &data, &base, &cfg, LossKind::Squared, &mut obs)?;
    let start = obs.0.expect("second phase ran");
    let opt = solve_last_layer_optimum(LossKind::Squared, &start.features, &data.y, &start.params.last_layer_matrix())?;
    let constants = BoundConstants::Gd {
        r_sq: opt.r_sq,
        l_h: start.l_h,
        loss_star: opt.loss,
    };
    let report = check_bounds(&log, &constants)?;
    println!("R² {:.4e}, L_H {:.4e}, L* {:.1e}", opt.r_sq, start.l_h, opt.loss);
    for e in report.entries.iter().filter(|e| (e.t - log.tau).is_power_of_two()) {
        println!("t − τ = {:>5}  measured {:.4e}  bound {:.4e}", e.t - log.tau, e.measured, e.bound);
    }
    println!("violations: {}", report.violations);
    Ok(())
}
