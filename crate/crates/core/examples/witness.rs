//! Builds explicit hidden parameters with full-rank features, for an input
//! dimension below and above the sample count.

use twophase::data::{synth_gen, TargetKind};
use twophase::expressivity::{check_expressivity, construct_witness};
use twophase::NetworkSpec;

fn main() -> twophase::Result<()> {
    let n = 10;
    for (m_x, hidden) in [(3, vec![5, 10]), (12, vec![12, 11])] {
        let data = synth_gen(n, m_x, 1, 0.02, TargetKind::Regression, 4)?;
        let spec = NetworkSpec::plain(m_x, hidden.clone(), 1, 100.0)?;
        let w = construct_witness(&spec, &data.x)?;
        let rep = check_expressivity(&spec, &w.params, &data.x, None)?;
        println!(
            "m_x = {m_x:>2}, hidden {hidden:?}: {:?} case, scale 2^{} , dominance {:.3e}, rank {}/{n}",
            w.case, w.doublings, w.dominance, rep.rank
        );
    }
    Ok(())
}
