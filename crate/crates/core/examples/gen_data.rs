//! Samples points on the unit sphere with a minimum pairwise margin, writes
//! them as CSV and reads them back.

use twophase::data::{load_csv, synth_gen, TargetKind};
use twophase::expressivity::check_distinguishability;

fn main() -> twophase::Result<()> {
    let data = synth_gen(50, 5, 4, 0.1, TargetKind::ClassIndex, 9)?;
    let path = std::env::temp_dir().join("twophase_gen_data.csv");
    data.save_csv(&path)?;
    let back = load_csv(&path, 5, TargetKind::ClassIndex)?;
    let dist = check_distinguishability(&back.x);
    println!("wrote {} rows to {}", back.len(), path.display());
    println!("labels {:?}", &back.labels().unwrap()[..10]);
    println!("distinguishability margin {:.4}", dist.margin);
    Ok(())
}
