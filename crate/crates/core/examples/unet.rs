//! Builds the residual U-Net for each normalization method and runs one
//! training-mode and one inference-mode forward pass.

use std::time::Instant;

use volnorm::net::{Mode, UNet, UNetSpec};
use volnorm::{NormMethod, Shape5, Tensor5};

fn main() -> volnorm::Result<()> {
    let shape = Shape5::new(1, 16, 32, 32, 1)?;
    let x = Tensor5::from_fn(shape, |[_, d, h, w, _]| ((d + h + w) % 7) as f64 / 7.0);
    for norm in [NormMethod::none(), NormMethod::batch(), NormMethod::group(4), NormMethod::instance()] {
        let net = UNet::<f64>::build(UNetSpec::new(2, 8, norm), 0)?;
        let start = Instant::now();
        let (train_out, _) = net.forward(&x, Mode::Train)?;
        let (infer_out, _) = net.forward(&x, Mode::Infer)?;
        println!(
            "{:<10} {:>6} trainable  forward x2 {:.3} s  mean p train {:.4} infer {:.4}",
            norm.kind.to_string(),
            net.params().trainable_count(),
            start.elapsed().as_secs_f64(),
            train_out.sum() / train_out.len() as f64,
            infer_out.sum() / infer_out.len() as f64
        );
    }
    Ok(())
}
