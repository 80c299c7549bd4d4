//! Full-network training with step halving whenever the tangent kernel
//! would lose rank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twophase::data::{synth_gen, TargetKind};
use twophase::trainer::{run_two_phase, BaseAlgoConfig, Phase2Mode, Phase2Schedule, TwoPhaseConfig};
use twophase::{LossKind, NetworkSpec, Params};

fn main() -> twophase::Result<()> {
    let data = synth_gen(8, 4, 1, 0.05, TargetKind::Regression, 3)?;
    let spec = NetworkSpec::plain(4, vec![8, 9], 1, 10.0)?;
    let params = Params::init_gaussian(&spec, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let base = BaseAlgoConfig {
        batch_size: 4,
        ..Default::default()
    };
    let cfg = TwoPhaseConfig {
        total_steps: 300,
        phase2_mode: Phase2Mode::LazyFull,
        schedule: Phase2Schedule {
            lazy_eta_bar: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let (_, log) = run_two_phase(&spec, &params, &data, &base, &cfg, LossKind::Squared)?;
    println!("L estimate {:?}", log.lipschitz);
    println!("loss at τ {:.4e}, final {:.4e}, rejected steps {}", log.loss_at_tau, log.final_loss, log.rejected_steps);
    Ok(())
}
