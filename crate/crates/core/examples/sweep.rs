//! Final loss over a grid of switch fractions and noise scales.

use twophase::cli::{sweep, ExperimentConfig};

fn main() -> twophase::Result<()> {
    let cfg = ExperimentConfig::from_toml(
        r#"
        [network]
        inner = [16]
        [data]
        n = 32
        input_dim = 6
        output_dim = 3
        [base]
        batch_size = 16
        [two_phase]
        total_steps = 300
        [sweep]
        tau_fractions = [0.4, 0.6, 0.8]
        noise = [0.0001, 0.01]
        seeds = [0, 1]
        "#,
    )?;
    let data = cfg.load_dataset()?;
    cfg.validate(&data)?;
    println!("{:>6} {:>8} {:>12} {:>12}", "tau0", "delta0", "mean", "std");
    for c in sweep(&cfg, &data)? {
        println!(
            "{:>6} {:>8} {:>12.4e} {:>12.4e}",
            c.tau_fraction,
            c.noise,
            c.mean.unwrap_or(f64::NAN),
            c.std.unwrap_or(f64::NAN)
        );
        for e in &c.errors {
            println!("        failed: {e}");
        }
    }
    Ok(())
}
