//! Random Gaussian parameters give full row rank `[h_X, 1]` when the last
//! hidden layer has at least `n` units, and fail when it is too narrow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twophase::data::{synth_gen, TargetKind};
use twophase::expressivity::{check_distinguishability, check_expressivity, probabilistic_expressivity};
use twophase::{NetworkSpec, Params};

fn main() -> twophase::Result<()> {
    let data = synth_gen(24, 6, 3, 0.05, TargetKind::ClassIndex, 1)?;
    let dist = check_distinguishability(&data.x);
    println!("distinguishable: {} (margin {:.4})", dist.passed, dist.margin);

    for last in [27, 20] {
        let spec = NetworkSpec::plain(6, vec![16, last], 3, 100.0)?;
        let report = probabilistic_expressivity(&spec, &data.x, 20, 1.0, 7)?;
        println!("m_H = {last}: {}/{} draws full rank", report.passed, report.trials);
    }

    let spec = NetworkSpec::plain(6, vec![16, 27], 3, 100.0)?;
    let params = Params::init_gaussian(&spec, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let r = check_expressivity(&spec, &params, &data.x, None)?;
    println!(
        "one draw: rank {} of {}, sigma_min {:.3e}, sigma_max {:.3e}, tolerance {:.3e}",
        r.rank, r.n, r.sigma_min, r.sigma_max, r.tolerance
    );
    Ok(())
}
