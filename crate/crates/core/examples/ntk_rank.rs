//! Tangent kernel `K = J Jᵀ` at the switch point and its rank along a
//! last-layer trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twophase::data::{synth_gen, TargetKind};
use twophase::network::BnMode;
use twophase::ntk::{ntk_snapshot, RankPath};
use twophase::trainer::{run_two_phase, BaseAlgoConfig, TwoPhaseConfig};
use twophase::{LossKind, NetworkSpec, Params};

fn main() -> twophase::Result<()> {
    let data = synth_gen(8, 4, 2, 0.05, TargetKind::Regression, 5)?;
    let spec = NetworkSpec::plain(4, vec![10, 9], 2, 10.0)?;
    let params = Params::init_gaussian(&spec, 1.0, &mut ChaCha8Rng::seed_from_u64(5));

    let k0 = ntk_snapshot(&spec, &params, &data.x, BnMode::Batch, RankPath::Kernel)?;
    println!("initial kernel {}×{}, rank {}, tolerance {:.2e}", k0.dim(), k0.dim(), k0.rank, k0.tolerance);

    let base = BaseAlgoConfig {
        batch_size: 4,
        ..Default::default()
    };
    let cfg = TwoPhaseConfig {
        total_steps: 200,
        monitor_every: 25,
        ..Default::default()
    };
    let (_, log) = run_two_phase(&spec, &params, &data, &base, &cfg, LossKind::Squared)?;
    println!("rank at τ = {}: {:?} (n·m_y = 16)", log.tau, log.ntk_rank_at_tau);
    for r in log.records.iter().filter(|r| r.ntk_rank.is_some()) {
        println!("t = {:>3}  rank {:?}  preserved {:?}", r.t, r.ntk_rank.unwrap(), r.rank_preserved);
    }
    Ok(())
}
