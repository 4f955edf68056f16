//! Trains a small network at batch size 1, checkpoints it and evaluates
//! the restored copy on held-out volumes.

use volnorm::data::{DatasetManifest, SynthSpec};
use volnorm::net::{UNet, UNetSpec};
use volnorm::train::{evaluate, restore, samples_from_volumes, save_checkpoint, train, TrainConfig};
use volnorm::NormMethod;

fn main() -> volnorm::Result<()> {
    let manifest = DatasetManifest {
        synth: SynthSpec {
            height: 16,
            width: 16,
            radius_min: 3.0,
            radius_max: 5.0,
            wander: 2.0,
            ..SynthSpec::default()
        },
        train_count: 8,
        eval_count: 3,
    };
    let data = manifest.generate()?;
    let samples = samples_from_volumes::<f64>(&data.train)?;
    let spec = UNetSpec::new(1, 4, NormMethod::instance());
    let mut net = UNet::<f64>::build(spec, 0)?;
    let config = TrainConfig {
        epochs: 5,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let outcome = train(&mut net, &samples, &config)?;
    for r in &outcome.records {
        println!("epoch {} loss {:.4} ({:.2} s)", r.epoch, r.mean_loss, r.seconds);
    }

    let path = std::env::temp_dir().join("volnorm-example.ckpt");
    save_checkpoint(net.params(), &path)?;
    let mut restored = UNet::<f64>::build(spec, 99)?;
    restore(&mut restored, &path)?;
    let eval = evaluate(&restored, &data.eval)?;
    println!(
        "held-out Dice {:.4} per volume {:?}, prediction {:.3} s",
        eval.mean_dice, eval.per_volume, eval.seconds
    );
    Ok(())
}
