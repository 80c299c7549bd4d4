//! Classification with SGD plus momentum, against its two-phase version that
//! switches to last-layer training after 60% of the steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twophase::data::{synth_gen, TargetKind};
use twophase::trainer::{run_base, run_two_phase, BaseAlgoConfig, Phase2Mode, TwoPhaseConfig};
use twophase::{LossKind, NetworkSpec, Params};

fn main() -> twophase::Result<()> {
    let n = 64;
    let data = synth_gen(n, 8, 3, 0.05, TargetKind::ClassIndex, 0)?;
    let spec = NetworkSpec::plain(8, vec![32, 71], 3, 100.0)?;
    let params = Params::init_gaussian(&spec, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let base = BaseAlgoConfig {
        batch_size: 32,
        ..Default::default()
    };
    let steps = 600;

    let (_, records) = run_base(&spec, &params, &data, &base, steps, LossKind::CrossEntropy, 0, &mut ())?;
    println!("base           final loss {:.4e}", records.last().unwrap().loss);

    for mode in [Phase2Mode::LastLayerBase, Phase2Mode::LastLayerGd] {
        let cfg = TwoPhaseConfig {
            total_steps: steps,
            phase2_mode: mode,
            ..Default::default()
        };
        let (_, log) = run_two_phase(&spec, &params, &data, &base, &cfg, LossKind::CrossEntropy)?;
        println!(
            "{:<14} final loss {:.4e}  (tau {}, loss after perturbation {:.4e}, feature rank {:?})",
            format!("{mode:?}"),
            log.final_loss,
            log.tau, log.loss_at_tau, log.feature_rank_at_tau
        );
    }
    Ok(())
}
