//! Central finite-difference checks for every differentiable component.
//!
//! The numeric side only ever calls forward functions, so it is an
//! independent oracle for the hand-written backward passes.
//!
//! Errors are reported normwise: `max |analytic - numeric|` divided by the
//! largest magnitude on either side. Elementwise ratios blow up on
//! gradients that are zero up to rounding, which says nothing about the
//! backward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    concat_channels, conv3d_backward, conv3d_forward, max_pool2, max_pool2_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, upsample2, upsample2_backward, Conv3dSpec,
};
use crate::net::{Mode, UNet, UNetSpec};
use crate::norm::{norm_backward, norm_forward, AffineParams, NormMethod, NormPartition};
use crate::objective::{bce_dice_loss, DICE_SMOOTH};
use crate::tensor::{Shape5, Tensor5};

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Desk-scale networks have enough relu and pooling kinks that a 1e-5
/// step regularly straddles one; the smaller step keeps that rare.
pub const DESK_STEP: f64 = 1e-8;

/// Central differences of a scalar function with respect to every element
/// of `x`.
pub fn numeric_gradient(
    x: &Tensor5<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor5<f64>) -> f64,
) -> Tensor5<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor5::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Normwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

fn random(shape: Shape5, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so relu has no kink within one step.
fn away_from_zero(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.01..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dot(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    a.mul(b).expect("same shape").sum()
}

/// Gradient check of one normalization method on a `(2, 3, 3, 3, 4)` input.
pub fn check_norm(method: NormMethod, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new(2, 3, 3, 3, 4)?;
    let x = random(s, &mut rng, -2.0, 2.0);
    let r = random(s, &mut rng, -1.0, 1.0);
    let affine = AffineParams {
        gamma: (0..4).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let partition = Arc::new(NormPartition::build(&method, s)?);
    let eps = method.epsilon;
    let kind = method.kind;
    let objective = |x: &Tensor5<f64>, affine: &AffineParams<f64>| {
        let (y, _) = norm_forward(x, &partition, affine, eps, kind).expect("forward");
        dot(&y, &r)
    };

    let (_, cache) = norm_forward(&x, &partition, &affine, eps, kind)?;
    let grads = norm_backward(&r, &cache, &affine)?;

    let nx = numeric_gradient(&x, STEP, |x| objective(x, &affine));
    let vec = Shape5::vector(4)?;
    let gamma = Tensor5::from_vec(vec, affine.gamma.clone())?;
    let beta = Tensor5::from_vec(vec, affine.beta.clone())?;
    let ng = numeric_gradient(&gamma, STEP, |g| {
        let a = AffineParams {
            gamma: g.data().to_vec(),
            beta: affine.beta.clone(),
        };
        objective(&x, &a)
    });
    let nb = numeric_gradient(&beta, STEP, |b| {
        let a = AffineParams {
            gamma: affine.gamma.clone(),
            beta: b.data().to_vec(),
        };
        objective(&x, &a)
    });
    Ok(max_relative_error(grads.grad_x.data(), nx.data())
        .max(max_relative_error(&grads.grad_gamma, ng.data()))
        .max(max_relative_error(&grads.grad_beta, nb.data())))
}

/// Gradient check of a convolution against input, weight and bias.
pub fn check_conv(spec: Conv3dSpec, spatial: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new(1, spatial, spatial, spatial, spec.in_channels)?;
    let x = random(s, &mut rng, -1.0, 1.0);
    let w = random(spec.weight_shape()?, &mut rng, -1.0, 1.0);
    let b = random(spec.bias_shape()?, &mut rng, -1.0, 1.0);
    let r = random(s.with_channels(spec.out_channels)?, &mut rng, -1.0, 1.0);
    let f = |x: &Tensor5<f64>, w: &Tensor5<f64>, b: &Tensor5<f64>| {
        dot(&conv3d_forward(x, &spec, w, b).expect("forward").0, &r)
    };
    let (_, cache) = conv3d_forward(&x, &spec, &w, &b)?;
    let g = conv3d_backward(&r, &cache, &w)?;
    let nx = numeric_gradient(&x, STEP, |x| f(x, &w, &b));
    let nw = numeric_gradient(&w, STEP, |w| f(&x, w, &b));
    let nb = numeric_gradient(&b, STEP, |b| f(&x, &w, b));
    Ok(max_relative_error(g.grad_x.data(), nx.data())
        .max(max_relative_error(g.grad_w.data(), nw.data()))
        .max(max_relative_error(g.grad_b.data(), nb.data())))
}

fn check_unary(
    seed: u64,
    shape: Shape5,
    forward: impl Fn(&Tensor5<f64>) -> Tensor5<f64>,
    backward: impl Fn(&Tensor5<f64>, &Tensor5<f64>) -> Tensor5<f64>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(shape, &mut rng);
    let y = forward(&x);
    let r = random(y.shape(), &mut rng, -1.0, 1.0);
    let analytic = backward(&r, &x);
    let numeric = numeric_gradient(&x, STEP, |x| dot(&forward(x), &r));
    Ok(max_relative_error(analytic.data(), numeric.data()))
}

pub fn check_relu(seed: u64) -> Result<f64> {
    check_unary(
        seed,
        Shape5::new(1, 3, 3, 3, 2)?,
        relu,
        |g, x| relu_backward(g, x).expect("shape"),
    )
}

pub fn check_sigmoid(seed: u64) -> Result<f64> {
    check_unary(
        seed,
        Shape5::new(1, 3, 3, 3, 2)?,
        sigmoid,
        |g, x| sigmoid_backward(g, &sigmoid(x)).expect("shape"),
    )
}

pub fn check_max_pool(seed: u64) -> Result<f64> {
    check_unary(
        seed,
        Shape5::new(1, 4, 4, 4, 2)?,
        |x| max_pool2(x).expect("pool").0,
        |g, x| {
            let (_, idx) = max_pool2(x).expect("pool");
            max_pool2_backward(g, &idx, x.shape()).expect("shape")
        },
    )
}

pub fn check_upsample(seed: u64) -> Result<f64> {
    check_unary(
        seed,
        Shape5::new(1, 2, 2, 2, 3)?,
        |x| upsample2(x).expect("upsample"),
        |g, _| upsample2_backward(g).expect("shape"),
    )
}

pub fn check_concat(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = random(Shape5::new(1, 2, 2, 2, 2)?, &mut rng, -1.0, 1.0);
    check_unary(
        seed ^ 1,
        Shape5::new(1, 2, 2, 2, 3)?,
        |x| concat_channels(x, &other).expect("concat"),
        |g, _| crate::layers::split_channels(g, 3).expect("split").0,
    )
}

pub fn check_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new(1, 4, 4, 4, 1)?;
    let p = random(s, &mut rng, 1e-3, 1.0 - 1e-3);
    let y = Tensor5::from_fn(s, |_| if rng.gen_bool(0.35) { 1.0 } else { 0.0 });
    let (_, analytic) = bce_dice_loss(&p, &y, DICE_SMOOTH)?;
    let numeric = numeric_gradient(&p, STEP, |p| {
        bce_dice_loss(p, &y, DICE_SMOOTH).expect("loss").0
    });
    Ok(max_relative_error(analytic.data(), numeric.data()))
}

/// Moves biases and betas off their zero init. With zero biases a conv
/// over an all-dead receptive field outputs exactly 0.0, which sits on the
/// relu kink and makes one-sided and central differences disagree.
fn jitter_offsets(net: &mut UNet<f64>, rng: &mut ChaCha8Rng) {
    let store = net.params_mut();
    for i in 0..store.len() {
        let p = store.get_mut(i);
        if p.trainable && (p.name.ends_with("bias") || p.name.ends_with("beta")) {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
}

/// Like [`max_relative_error`], but a tensor whose gradient is zero on both
/// sides up to `floor` (a conv bias feeding a per-channel norm) counts as a
/// match instead of comparing rounding noise.
fn tensor_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let largest = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if largest < floor {
        0.0
    } else {
        max_relative_error(analytic, numeric)
    }
}

const ZERO_GRADIENT_FLOOR: f64 = 1e-8;

/// Whole-network check on a `(1, 8, 8, 8, 1)` input with `levels = 1`,
/// `base_filters = 2`, over every trainable parameter and the input.
pub fn check_network(norm: NormMethod, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new(1, 8, 8, 8, 1)?;
    let x = random(s, &mut rng, 0.0, 1.0);
    let target = Tensor5::from_fn(s, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let mut net = UNet::<f64>::build(UNetSpec::new(1, 2, norm), seed)?;
    jitter_offsets(&mut net, &mut rng);

    let loss = |net: &UNet<f64>, x: &Tensor5<f64>| {
        let (y, _) = net.forward(x, Mode::Train).expect("forward");
        bce_dice_loss(&y, &target, DICE_SMOOTH).expect("loss").0
    };
    let (y, cache) = net.forward(&x, Mode::Train)?;
    let (_, gy) = bce_dice_loss(&y, &target, DICE_SMOOTH)?;
    net.params_mut().zero_grads();
    let grad_x = net.backward(&gy, &cache)?;

    let mut worst = max_relative_error(
        grad_x.data(),
        numeric_gradient(&x, STEP, |x| loss(&net, x)).data(),
    );
    let mut probe = net.clone();
    for idx in 0..net.params().len() {
        let param = net.params().get(idx);
        if !param.trainable {
            continue;
        }
        let numeric = numeric_gradient(&param.value, STEP, |v| {
            probe.params_mut().get_mut(idx).value = v.clone();
            loss(&probe, &x)
        });
        probe.params_mut().get_mut(idx).value = param.value.clone();
        worst = worst.max(tensor_error(param.grad.data(), numeric.data(), ZERO_GRADIENT_FLOOR));
    }
    Ok(worst)
}

/// Central differences at selected flat indices of `x` only.
pub fn numeric_gradient_at(
    x: &Tensor5<f64>,
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&Tensor5<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Desk-scale check: `levels = 2`, `base_filters = 8` on a `(1, 16, 32, 32, 1)`
/// input. Full differencing would need two forward passes per parameter, so
/// `per_tensor` random entries of every trainable tensor (and of the input)
/// are compared instead.
pub fn check_network_sampled(norm: NormMethod, per_tensor: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape5::new(1, 16, 32, 32, 1)?;
    let x = random(s, &mut rng, 0.0, 1.0);
    let target = Tensor5::from_fn(s, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let mut net = UNet::<f64>::build(UNetSpec::new(2, 8, norm), seed)?;
    jitter_offsets(&mut net, &mut rng);
    let loss = |net: &UNet<f64>, x: &Tensor5<f64>| {
        let (y, _) = net.forward(x, Mode::Train).expect("forward");
        bce_dice_loss(&y, &target, DICE_SMOOTH).expect("loss").0
    };
    let (y, cache) = net.forward(&x, Mode::Train)?;
    let (_, gy) = bce_dice_loss(&y, &target, DICE_SMOOTH)?;
    net.params_mut().zero_grads();
    let grad_x = net.backward(&gy, &cache)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let picks = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..per_tensor.min(len)).map(|_| rng.gen_range(0..len)).collect()
    };
    let idx = picks(x.len(), &mut rng);
    analytic.extend(idx.iter().map(|&i| grad_x.data()[i]));
    numeric.extend(numeric_gradient_at(&x, &idx, DESK_STEP, |x| loss(&net, x)));
    let mut probe = net.clone();
    for p in 0..net.params().len() {
        let param = net.params().get(p);
        if !param.trainable {
            continue;
        }
        let idx = picks(param.value.len(), &mut rng);
        analytic.extend(idx.iter().map(|&i| param.grad.data()[i]));
        numeric.extend(numeric_gradient_at(&param.value, &idx, DESK_STEP, |v| {
            probe.params_mut().get_mut(p).value = v.clone();
            loss(&probe, &x)
        }));
        probe.params_mut().get_mut(p).value = param.value.clone();
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Runs every suite. `include_network` adds the whole-network checks,
/// which dominate the runtime.
pub fn run_all(include_network: bool) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64, tolerance: f64| {
        out.push(SuiteResult {
            name: name.to_string(),
            max_rel_err: err,
            tolerance,
        })
    };
    for (name, method) in [
        ("norm/batch", NormMethod::batch()),
        ("norm/group:2", NormMethod::group(2)),
        ("norm/instance", NormMethod::instance()),
    ] {
        push(name, check_norm(method, 1)?, LAYER_TOLERANCE);
    }
    push(
        "layer/conv3d",
        check_conv(Conv3dSpec::new(2, 2, 3, 1), 3, 2)?,
        LAYER_TOLERANCE,
    );
    push(
        "layer/conv3d-dilated",
        check_conv(Conv3dSpec::new(2, 3, 3, 2), 5, 3)?,
        LAYER_TOLERANCE,
    );
    push(
        "layer/conv3d-pointwise",
        check_conv(Conv3dSpec::new(3, 2, 1, 1), 3, 4)?,
        LAYER_TOLERANCE,
    );
    push("layer/relu", check_relu(5)?, LAYER_TOLERANCE);
    push("layer/sigmoid", check_sigmoid(6)?, LAYER_TOLERANCE);
    push("layer/max-pool", check_max_pool(7)?, LAYER_TOLERANCE);
    push("layer/upsample", check_upsample(8)?, LAYER_TOLERANCE);
    push("layer/concat", check_concat(9)?, LAYER_TOLERANCE);
    push("loss/bce-dice", check_loss(10)?, LOSS_TOLERANCE);
    if include_network {
        for (name, method) in [
            ("network/none", NormMethod::none()),
            ("network/batch", NormMethod::batch()),
            ("network/group:2", NormMethod::group(2)),
            ("network/instance", NormMethod::instance()),
        ] {
            push(name, check_network(method, 11)?, NETWORK_TOLERANCE);
        }
        push(
            "network-desk/instance",
            check_network_sampled(NormMethod::instance(), 2, 12)?,
            NETWORK_TOLERANCE,
        );
    }
    Ok(out)
}
