//! Normalizes one random tensor with every method and prints the per-set
//! statistics of the result.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volnorm::norm::{norm_forward, AffineParams, NormPartition};
use volnorm::{NormMethod, Shape5, Tensor5};

fn main() -> volnorm::Result<()> {
    let shape = Shape5::new(2, 4, 8, 8, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor5::from_fn(shape, |_| rng.gen_range(-5.0..5.0));
    let affine = AffineParams::new(shape.c());

    for method in [
        NormMethod::batch(),
        NormMethod::group(2),
        NormMethod::group(8),
        NormMethod::instance(),
    ] {
        let partition = Arc::new(NormPartition::build(&method, shape)?);
        let (y, cache) = norm_forward(&x, &partition, &affine, method.epsilon, method.kind)?;
        let sums = y.reduce_over(&partition)?;
        let worst_mean = sums
            .iter()
            .map(|(s, m)| (s / *m as f64).abs())
            .fold(0.0, f64::max);
        println!(
            "{:<10} sets {:>3} of size {:>4}  max |output mean| {:.1e}  input std of set 0 {:.3}",
            method.kind.to_string(),
            partition.set_count(),
            partition.set_size(0),
            worst_mean,
            cache.std[0]
        );
    }
    Ok(())
}
