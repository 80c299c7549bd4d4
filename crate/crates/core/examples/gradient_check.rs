//! Backpropagation through batch-normalized layers against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twophase::gradcheck::{central_differences, max_relative_error};
use twophase::linalg::Matrix;
use twophase::network::{forward_output, BnMode};
use twophase::trainer::loss_and_grad;
use twophase::{loss, LossKind, NetworkSpec, Params};

fn main() -> twophase::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = NetworkSpec::new(3, vec![5, 4], 2, 10.0, vec![true, false], 1e-3)?;
    let params = Params::init_gaussian(&spec, 1.0, &mut rng);
    let x = Matrix::new(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let y = Matrix::new(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let (value, grad) = loss_and_grad(&spec, &params, &x, &y, LossKind::Squared, BnMode::Batch)?;
    let numeric = central_differences(params.as_slice(), 1e-6, |w| {
        let p = Params::from_flat(&spec, w.to_vec()).unwrap();
        loss::loss_value(LossKind::Squared, &forward_output(&spec, &p, &x).unwrap(), &y).unwrap()
    });
    println!("loss {value:.6}, {} parameters", grad.len());
    println!("max relative error {:.2e}", max_relative_error(&grad, &numeric));
    Ok(())
}
