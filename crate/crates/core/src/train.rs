//! Optimizers, the training loop, evaluation and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{compose_prediction, slice_slabs, Volume};
use crate::error::{Error, Result};
use crate::net::{Mode, ParamStore, UNet};
use crate::objective::{bce_dice_loss, dice_hard, DICE_SMOOTH};
use crate::tensor::{Real, Shape5, Tensor5};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam(AdamHyper),
    Sgd { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::Adam(AdamHyper::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// A loss above this value counts as divergence.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule.
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 1,
            optimizer: Optimizer::default(),
            seed: 0,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    /// Long schedule: 30 epochs at learning rate 5e-5.
    pub fn long_preset() -> Self {
        Self {
            epochs: 30,
            learning_rate: 5e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("divergence threshold must be positive".into()));
        }
        match self.optimizer {
            Optimizer::Adam(h) => {
                if !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || !(h.epsilon > 0.0) {
                    return Err(Error::Config(format!("invalid Adam hyperparameters {h:?}")));
                }
            }
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!("SGD momentum {momentum} outside [0, 1)")));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from the
/// gradients stored alongside it.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, hyper: AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::lit(1.0 - hyper.beta1.powi(t));
    let c2 = T::lit(1.0 - hyper.beta2.powi(t));
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (lr, eps) = (T::lit(lr), T::lit(hyper.epsilon));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.data();
        for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Heavy-ball SGD: `vel = momentum * vel + g`, `x -= lr * vel`.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, velocity: &mut [Vec<T>], lr: f64, momentum: f64) {
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for (p, vel) in params.iter_mut().zip(velocity) {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.data();
        for ((x, &g), u) in p.value.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
            *u = mu * *u + g;
            *x -= lr * *u;
        }
    }
}

enum OptState<T> {
    Adam(AdamState<T>, AdamHyper),
    Sgd(Vec<Vec<T>>, f64),
}

impl<T: Real> OptState<T> {
    fn new(opt: Optimizer, params: &ParamStore<T>) -> Self {
        match opt {
            Optimizer::Adam(h) => Self::Adam(AdamState::new(params), h),
            Optimizer::Sgd { momentum } => Self::Sgd(
                params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
                momentum,
            ),
        }
    }

    fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        match self {
            Self::Adam(state, h) => adam_step(params, state, lr, *h),
            Self::Sgd(vel, mu) => sgd_step(params, vel, lr, *mu),
        }
    }
}

/// One training example: a slab and its mask window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f64> {
    pub input: Tensor5<T>,
    pub target: Tensor5<T>,
}

/// Every slab of every volume, cast to `T`.
pub fn samples_from_volumes<T: Real>(volumes: &[Volume]) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for vol in volumes {
        for slab in slice_slabs(vol)? {
            out.push(Sample {
                input: slab.data.cast(),
                target: slab.target.cast(),
            });
        }
    }
    Ok(out)
}

/// Concatenates tensors of equal shape along the batch axis.
pub fn stack_batch<T: Real>(items: &[&Tensor5<T>]) -> Result<Tensor5<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Usage("cannot stack an empty batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        t.expect_shape(first)?;
        data.extend_from_slice(t.data());
    }
    let [n, d, h, w, c] = first.dims();
    Tensor5::from_vec(Shape5::new(n * items.len(), d, h, w, c)?, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the steps taken; may be non-finite when diverged.
    pub mean_loss: f64,
    pub seconds: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.seconds).sum::<f64>() / self.records.len() as f64
    }
}

fn grads_finite<T: Real>(params: &ParamStore<T>) -> bool {
    params.iter().all(|p| p.grad.is_finite())
}

/// Trains `net` in place. Training stops at the first step whose loss is
/// non-finite or above the divergence threshold, or whose gradients or
/// updated parameters are non-finite; the outcome is then flagged diverged.
pub fn train<T: Real>(net: &mut UNet<T>, samples: &[Sample<T>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptState::new(config.optimizer, net.params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut diverged = false;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (input, target) = if let [i] = chunk {
                (samples[*i].input.clone(), samples[*i].target.clone())
            } else {
                let inputs: Vec<_> = chunk.iter().map(|&i| &samples[i].input).collect();
                let targets: Vec<_> = chunk.iter().map(|&i| &samples[i].target).collect();
                (stack_batch(&inputs)?, stack_batch(&targets)?)
            };
            let (pred, cache) = net.forward(&input, Mode::Train)?;
            let (loss, grad) = bce_dice_loss(&pred, &target, DICE_SMOOTH)?;
            let loss = loss.as_f64();
            total += loss;
            steps += 1;
            if !loss.is_finite() || loss > config.divergence_threshold {
                diverged = true;
                break;
            }
            net.update_running_stats(&cache)?;
            net.params_mut().zero_grads();
            net.backward(&grad, &cache)?;
            if !grads_finite(net.params()) {
                diverged = true;
                break;
            }
            opt.step(net.params_mut(), config.learning_rate);
            if !net.params().is_finite() {
                diverged = true;
                break;
            }
        }
        records.push(EpochRecord {
            epoch,
            mean_loss: total / steps.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
            diverged,
        });
        if diverged {
            break;
        }
    }
    Ok(TrainOutcome { records, diverged })
}

/// Per-volume predictions of `net`, thresholded into masks.
pub fn predict_volume<T: Real>(net: &UNet<T>, volume: &Volume) -> Result<Tensor5<T>> {
    let slabs = slice_slabs(volume)?;
    let mut parts = Vec::with_capacity(slabs.len());
    for slab in &slabs {
        let (pred, _) = net.forward(&slab.data.cast(), Mode::Infer)?;
        parts.push((slab, pred));
    }
    compose_prediction(&parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_dice: f64,
    pub per_volume: Vec<f64>,
    /// Wall-clock time of slicing, inference, composition and thresholding.
    pub seconds: f64,
}

/// Segments every volume and scores it against its mask with the hard Dice.
pub fn evaluate<T: Real>(net: &UNet<T>, volumes: &[Volume]) -> Result<Evaluation> {
    if volumes.is_empty() {
        return Err(Error::Usage("no volumes to evaluate".into()));
    }
    let mut seconds = 0.0;
    let mut per_volume = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let start = Instant::now();
        let mask = predict_volume(net, vol)?;
        seconds += start.elapsed().as_secs_f64();
        per_volume.push(dice_hard(&mask, &vol.mask_tensor().cast::<T>())?);
    }
    Ok(Evaluation {
        mean_dice: per_volume.iter().sum::<f64>() / per_volume.len() as f64,
        per_volume,
        seconds,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VNCHECKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 4096;

/// Layout: magic, `u32` version, `u32` count, then per tensor a `u32` name
/// length, the UTF-8 name and a tensor blob. All integers little-endian.
pub fn write_checkpoint<T: Real, W: Write>(params: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        p.value.write_blob(&mut out)?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::Format(format!("checkpoint truncated in {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<Vec<(String, Tensor5<T>)>> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated in magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = read_u32(&mut input, "count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut input, "name length")? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::Format(format!("tensor name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| Error::Format("checkpoint truncated in name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let value = Tensor5::read_blob(&mut input)?;
        out.push((name, value));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(params: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor5<T>)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Loads a checkpoint into a network built from a matching spec.
pub fn restore<T: Real>(net: &mut UNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries = load_checkpoint(path)?;
    net.params_mut().load_values(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetManifest, SynthSpec};
    use crate::net::UNetSpec;
    use crate::norm::NormMethod;

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let s = Shape5::vector(1).unwrap();
        store.push("w", Tensor5::filled(s, value), true);
        store.get_mut(0).grad = Tensor5::filled(s, grad);
        store
    }

    #[test]
    fn adam_zero_gradient_from_rest() {
        let mut store = scalar_store(0.7, 0.0);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 0.1, AdamHyper::default());
        assert_eq!(store.value(0).data(), &[0.7]);
        assert_eq!(state.m[0], [0.0]);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let h = AdamHyper::default();
        let mut store = scalar_store(0.0, 2.0);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 0.1, h);
        let (m, v) = (state.m[0][0], state.v[0][0]);
        store.zero_grads();
        adam_step(&mut store, &mut state, 0.1, h);
        assert_eq!(state.m[0][0], h.beta1 * m);
        assert_eq!(state.v[0][0], h.beta2 * v);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let lr = 1e-3;
        for g in [0.5, -3.0, 1e-4] {
            let mut store = scalar_store(1.0, g);
            let mut state = AdamState::new(&store);
            adam_step(&mut store, &mut state, lr, AdamHyper::default());
            let expected = 1.0 - lr * g / (g.abs() + 1e-8);
            assert!((store.value(0).data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_two_step_hand_trace() {
        // g = 0.5 twice, lr = 0.01, beta1 = 0.9, beta2 = 0.999, eps = 1e-8
        // step 1: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25, x = 1 - 0.01 * 0.5 / (0.5 + 1e-8)
        // step 2: m = 0.095, v = 0.00049975, m_hat = 0.5, v_hat = 0.25, same decrement again
        let mut store = scalar_store(1.0, 0.5);
        let mut state = AdamState::new(&store);
        let h = AdamHyper::default();
        adam_step(&mut store, &mut state, 0.01, h);
        adam_step(&mut store, &mut state, 0.01, h);
        let dec = 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(0).data()[0] - (1.0 - 2.0 * dec)).abs() < 1e-14);
        assert!((state.m[0][0] - 0.095).abs() < 1e-15);
        assert!((state.v[0][0] - 0.00049975).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn sgd_momentum_step() {
        let mut store = scalar_store(1.0, 2.0);
        let mut vel = vec![vec![0.0]];
        sgd_step(&mut store, &mut vel, 0.1, 0.5);
        sgd_step(&mut store, &mut vel, 0.1, 0.5);
        // velocities 2 then 3
        assert!((store.value(0).data()[0] - (1.0 - 0.2 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut store = scalar_store(1.0, 1.0);
        store.push("running", Tensor5::filled(Shape5::vector(1).unwrap(), 3.0), false);
        store.get_mut(1).grad = Tensor5::filled(Shape5::vector(1).unwrap(), 1.0);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 0.1, AdamHyper::default());
        assert_eq!(store.value(1).data(), &[3.0]);
    }

    fn tiny_setup(norm: NormMethod) -> (UNet<f64>, Vec<Sample<f64>>) {
        let spec = UNetSpec::new(1, 2, norm);
        let net = UNet::build(spec, 5).unwrap();
        let manifest = DatasetManifest {
            synth: SynthSpec {
                height: 16,
                width: 16,
                radius_min: 3.0,
                radius_max: 5.0,
                wander: 2.0,
                ..SynthSpec::default()
            },
            train_count: 2,
            eval_count: 1,
        };
        let ds = manifest.generate().unwrap();
        (net, samples_from_volumes(&ds.train).unwrap())
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (mut net, samples) = tiny_setup(NormMethod::instance());
        let before = net.params().clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &samples, &cfg).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(net.params().named_values(), before.named_values());
    }

    #[test]
    fn zero_learning_rate_leaves_trainables_unchanged() {
        let (mut net, samples) = tiny_setup(NormMethod::group(2));
        let before = net.params().named_values();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &samples, &cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(net.params().named_values(), before);
    }

    #[test]
    fn one_sample_epoch_matches_manual_step() {
        let (net, samples) = tiny_setup(NormMethod::batch());
        let sample = vec![samples[0].clone()];
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut trained = net.clone();
        train(&mut trained, &sample, &cfg).unwrap();

        let mut manual = net;
        let (pred, cache) = manual.forward(&sample[0].input, Mode::Train).unwrap();
        let (_, grad) = bce_dice_loss(&pred, &sample[0].target, DICE_SMOOTH).unwrap();
        manual.update_running_stats(&cache).unwrap();
        manual.params_mut().zero_grads();
        manual.backward(&grad, &cache).unwrap();
        let mut state = AdamState::new(manual.params());
        adam_step(manual.params_mut(), &mut state, 1e-2, AdamHyper::default());
        assert_eq!(trained.params().named_values(), manual.params().named_values());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (net, samples) = tiny_setup(NormMethod::instance());
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            seed: 9,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (net.clone(), net);
        let ra = train(&mut a, &samples, &cfg).unwrap();
        let rb = train(&mut b, &samples, &cfg).unwrap();
        let la: Vec<_> = ra.records.iter().map(|r| r.mean_loss).collect();
        let lb: Vec<_> = rb.records.iter().map(|r| r.mean_loss).collect();
        assert_eq!(la, lb);
        assert!(la[2] < la[0], "{la:?}");
    }

    #[test]
    fn huge_learning_rate_is_flagged_not_fatal() {
        for optimizer in [Optimizer::default(), Optimizer::Sgd { momentum: 0.0 }] {
            let (mut net, samples) = tiny_setup(NormMethod::none());
            let cfg = TrainConfig {
                epochs: 5,
                learning_rate: 1e300,
                optimizer,
                ..TrainConfig::default()
            };
            let out = train(&mut net, &samples, &cfg).unwrap();
            assert!(out.diverged, "{optimizer:?}");
            assert!(out.records.last().unwrap().diverged);
        }
    }

    #[test]
    fn batches_stack_along_n() {
        let s = Shape5::new(1, 2, 1, 1, 1).unwrap();
        let a = Tensor5::from_vec(s, vec![1.0, 2.0]).unwrap();
        let b = Tensor5::from_vec(s, vec![3.0, 4.0]).unwrap();
        let t = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(t.shape().dims(), [2, 2, 1, 1, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn batch_size_two_trains() {
        let (mut net, samples) = tiny_setup(NormMethod::batch());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &samples, &cfg).unwrap();
        assert!(!out.diverged);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (mut net, samples) = tiny_setup(NormMethod::batch());
        train(&mut net, &samples, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(net.params(), &mut bytes).unwrap();
        let entries = read_checkpoint::<f64, _>(bytes.as_slice()).unwrap();
        assert_eq!(entries, net.params().named_values());

        let mut fresh = UNet::<f64>::build(*net.spec(), 1234).unwrap();
        fresh.params_mut().load_values(&entries).unwrap();
        let (a, _) = net.forward(&samples[0].input, Mode::Infer).unwrap();
        let (b, _) = fresh.forward(&samples[0].input, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_errors() {
        let (net, _) = tiny_setup(NormMethod::batch());
        let mut bytes = Vec::new();
        write_checkpoint(net.params(), &mut bytes).unwrap();
        for cut in [0, 5, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(read_checkpoint::<f64, _>(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(read_checkpoint::<f64, _>(wrong_version.as_slice()), Err(Error::Format(_))));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(read_checkpoint::<f64, _>(trailing.as_slice()).is_err());
        assert!(read_checkpoint::<f32, _>(bytes.as_slice()).is_err());

        let entries = read_checkpoint::<f64, _>(bytes.as_slice()).unwrap();
        let mut group = UNet::<f64>::build(UNetSpec::new(1, 2, NormMethod::group(2)), 0).unwrap();
        assert!(group.params_mut().load_values(&entries).is_err());
    }
}
