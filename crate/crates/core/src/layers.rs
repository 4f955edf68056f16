//! Stateless layer kernels with explicit forward and backward passes.
//!
//! Convolutions are 3D cross-correlations with "same" zero padding.
//! Weights are stored as a tensor of shape `(kd, kh, kw, C_in, C_out)`,
//! which is also the row-major `(taps * C_in) x C_out` matrix used by the
//! patch-times-kernel product.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape5, Tensor5};

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd extent per spatial axis `(D, H, W)`.
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            dilation: [dilation; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("convolution needs at least one channel".into()));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel extents must be odd, got {:?}",
                self.kernel
            )));
        }
        if self.dilation.contains(&0) {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the weight matrix, `taps * C_in`.
    pub fn patch_len(&self) -> usize {
        self.taps() * self.in_channels
    }

    pub fn weight_shape(&self) -> Result<Shape5> {
        let [kd, kh, kw] = self.kernel;
        Shape5::new(kd, kh, kw, self.in_channels, self.out_channels)
    }

    pub fn bias_shape(&self) -> Result<Shape5> {
        Shape5::vector(self.out_channels)
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }

    /// Spatial offsets of every tap, in weight order.
    fn tap_offsets(&self) -> Vec<[isize; 3]> {
        let half = |axis: usize| (self.kernel[axis] / 2) as isize;
        let mut out = Vec::with_capacity(self.taps());
        for a in 0..self.kernel[0] {
            for b in 0..self.kernel[1] {
                for c in 0..self.kernel[2] {
                    out.push([
                        (a as isize - half(0)) * self.dilation[0] as isize,
                        (b as isize - half(1)) * self.dilation[1] as isize,
                        (c as isize - half(2)) * self.dilation[2] as isize,
                    ]);
                }
            }
        }
        out
    }
}

/// Forward-pass state kept for [`conv3d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub spec: Conv3dSpec,
    pub input: Tensor5<T>,
}

/// Weight and bias gradients of one convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor5<T>,
    pub grad_w: Tensor5<T>,
    pub grad_b: Tensor5<T>,
}

struct PatchPlan {
    offsets: Vec<[isize; 3]>,
    dims: [usize; 3],
    cin: usize,
}

impl PatchPlan {
    fn new(spec: &Conv3dSpec, shape: Shape5) -> Self {
        Self {
            offsets: spec.tap_offsets(),
            dims: [shape.d(), shape.h(), shape.w()],
            cin: shape.c(),
        }
    }

    /// Input site index (within one sample) read by `tap` at output `site`,
    /// or `None` if it falls in the zero padding.
    fn source(&self, site: usize, tap: usize) -> Option<usize> {
        let [d, h, w] = self.dims;
        let (sd, rest) = (site / (h * w), site % (h * w));
        let (sh, sw) = (rest / w, rest % w);
        let off = self.offsets[tap];
        let id = sd as isize + off[0];
        let ih = sh as isize + off[1];
        let iw = sw as isize + off[2];
        if id < 0 || ih < 0 || iw < 0 || id >= d as isize || ih >= h as isize || iw >= w as isize
        {
            return None;
        }
        Some((id as usize * h + ih as usize) * w + iw as usize)
    }

    /// Fills `patches` (rows `sites`, each `taps * C_in` wide) from one sample.
    fn gather<T: Real>(&self, sample: &[T], sites: std::ops::Range<usize>, patches: &mut [T]) {
        let cin = self.cin;
        let row = self.offsets.len() * cin;
        for (r, site) in sites.enumerate() {
            let dst = &mut patches[r * row..(r + 1) * row];
            for tap in 0..self.offsets.len() {
                let slot = &mut dst[tap * cin..(tap + 1) * cin];
                match self.source(site, tap) {
                    Some(src) => slot.copy_from_slice(&sample[src * cin..(src + 1) * cin]),
                    None => slot.fill(T::zero()),
                }
            }
        }
    }

    /// Adds patch gradients back onto the input sites they were read from.
    fn scatter<T: Real>(&self, patches: &[T], sites: std::ops::Range<usize>, sample: &mut [T]) {
        let cin = self.cin;
        let row = self.offsets.len() * cin;
        for (r, site) in sites.enumerate() {
            let src = &patches[r * row..(r + 1) * row];
            for tap in 0..self.offsets.len() {
                if let Some(dst) = self.source(site, tap) {
                    for (acc, &g) in sample[dst * cin..(dst + 1) * cin]
                        .iter_mut()
                        .zip(&src[tap * cin..(tap + 1) * cin])
                    {
                        *acc += g;
                    }
                }
            }
        }
    }
}

fn chunk_rows(patch_len: usize) -> usize {
    (65_536 / patch_len.max(1)).clamp(64, 4096)
}

fn check_conv_params<T: Real>(
    spec: &Conv3dSpec,
    x: Shape5,
    weight: &Tensor5<T>,
    bias: &Tensor5<T>,
) -> Result<()> {
    spec.validate()?;
    if x.c() != spec.in_channels {
        return Err(Error::Shape {
            expected: x.with_channels(spec.in_channels)?,
            got: x,
        });
    }
    weight.expect_shape(spec.weight_shape()?)?;
    bias.expect_shape(spec.bias_shape()?)?;
    Ok(())
}

/// Same-padded dilated 3D cross-correlation.
pub fn conv3d_forward<T: Real>(
    x: &Tensor5<T>,
    spec: &Conv3dSpec,
    weight: &Tensor5<T>,
    bias: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvCache<T>)> {
    let shape = x.shape();
    check_conv_params(spec, shape, weight, bias)?;
    let out_shape = shape.with_channels(spec.out_channels)?;
    let cout = spec.out_channels;
    let k = spec.patch_len();
    let sites = shape.spatial();
    let mut out = Vec::with_capacity(out_shape.len());
    for _ in 0..shape.n() * sites {
        out.extend_from_slice(bias.data());
    }

    let plan = PatchPlan::new(spec, shape);
    let rows = chunk_rows(k);
    let mut patches = vec![T::zero(); if spec.is_pointwise() { 0 } else { rows * k }];
    for n in 0..shape.n() {
        let sample = &x.data()[n * sites * shape.c()..(n + 1) * sites * shape.c()];
        let mut start = 0;
        while start < sites {
            let end = (start + rows).min(sites);
            let m = end - start;
            let a: &[T] = if spec.is_pointwise() {
                &sample[start * k..end * k]
            } else {
                plan.gather(sample, start..end, &mut patches);
                &patches[..m * k]
            };
            let base = (n * sites + start) * cout;
            T::gemm(
                m,
                k,
                cout,
                T::one(),
                a,
                (k as isize, 1),
                weight.data(),
                (cout as isize, 1),
                T::one(),
                &mut out[base..base + m * cout],
                (cout as isize, 1),
            );
            start = end;
        }
    }
    let cache = ConvCache {
        spec: *spec,
        input: x.clone(),
    };
    Ok((Tensor5::from_vec(out_shape, out)?, cache))
}

pub fn conv3d_backward<T: Real>(
    grad_y: &Tensor5<T>,
    cache: &ConvCache<T>,
    weight: &Tensor5<T>,
) -> Result<ConvGrads<T>> {
    let spec = &cache.spec;
    let shape = cache.input.shape();
    grad_y.expect_shape(shape.with_channels(spec.out_channels)?)?;
    weight.expect_shape(spec.weight_shape()?)?;
    let cout = spec.out_channels;
    let cin = spec.in_channels;
    let k = spec.patch_len();
    let sites = shape.spatial();

    let mut grad_w = vec![T::zero(); k * cout];
    let mut grad_b = vec![T::zero(); cout];
    let mut grad_x = vec![T::zero(); shape.len()];
    for row in grad_y.data().chunks_exact(cout) {
        for (acc, &g) in grad_b.iter_mut().zip(row) {
            *acc += g;
        }
    }

    let plan = PatchPlan::new(spec, shape);
    let rows = chunk_rows(k);
    let mut patches = vec![T::zero(); if spec.is_pointwise() { 0 } else { rows * k }];
    let mut grad_patches = vec![T::zero(); if spec.is_pointwise() { 0 } else { rows * k }];
    for n in 0..shape.n() {
        let span = n * sites * cin..(n + 1) * sites * cin;
        let sample = &cache.input.data()[span.clone()];
        let mut start = 0;
        while start < sites {
            let end = (start + rows).min(sites);
            let m = end - start;
            let g = &grad_y.data()[(n * sites + start) * cout..(n * sites + end) * cout];
            let a: &[T] = if spec.is_pointwise() {
                &sample[start * k..end * k]
            } else {
                plan.gather(sample, start..end, &mut patches);
                &patches[..m * k]
            };
            // grad_w += patches^T * g
            T::gemm(
                k,
                m,
                cout,
                T::one(),
                a,
                (1, k as isize),
                g,
                (cout as isize, 1),
                T::one(),
                &mut grad_w,
                (cout as isize, 1),
            );
            // grad_patches = g * W^T
            if spec.is_pointwise() {
                let dst = &mut grad_x[span.start + start * k..span.start + end * k];
                T::gemm(
                    m,
                    cout,
                    k,
                    T::one(),
                    g,
                    (cout as isize, 1),
                    weight.data(),
                    (1, cout as isize),
                    T::zero(),
                    dst,
                    (k as isize, 1),
                );
            } else {
                T::gemm(
                    m,
                    cout,
                    k,
                    T::one(),
                    g,
                    (cout as isize, 1),
                    weight.data(),
                    (1, cout as isize),
                    T::zero(),
                    &mut grad_patches[..m * k],
                    (k as isize, 1),
                );
                plan.scatter(&grad_patches[..m * k], start..end, &mut grad_x[span.clone()]);
            }
            start = end;
        }
    }

    Ok(ConvGrads {
        grad_x: Tensor5::from_vec(shape, grad_x)?,
        grad_w: Tensor5::from_vec(spec.weight_shape()?, grad_w)?,
        grad_b: Tensor5::from_vec(spec.bias_shape()?, grad_b)?,
    })
}

pub fn relu<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`] given its input.
pub fn relu_backward<T: Real>(grad_y: &Tensor5<T>, input: &Tensor5<T>) -> Result<Tensor5<T>> {
    grad_y.map_binary(input, |g, x| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of [`sigmoid`] given its output.
pub fn sigmoid_backward<T: Real>(grad_y: &Tensor5<T>, output: &Tensor5<T>) -> Result<Tensor5<T>> {
    grad_y.map_binary(output, |g, y| g * y * (T::one() - y))
}

fn check_even(shape: Shape5) -> Result<()> {
    if !shape.d().is_multiple_of(2) || !shape.h().is_multiple_of(2) || !shape.w().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "2x2x2 pooling needs even spatial extents, got {shape}"
        )));
    }
    Ok(())
}

/// 2x2x2 max pooling. Returns the pooled tensor and, for every output
/// element, the flat input index that won (first maximum on ties).
pub fn max_pool2<T: Real>(x: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<usize>)> {
    let s = x.shape();
    check_even(s)?;
    let out_shape = Shape5::new(s.n(), s.d() / 2, s.h() / 2, s.w() / 2, s.c())?;
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for o in 0..out_shape.len() {
        let [n, d, h, w, c] = out_shape.unflatten(o);
        let mut best = usize::MAX;
        let mut best_v = T::neg_infinity();
        for (a, b, e) in CORNERS {
            let i = s.flatten([n, 2 * d + a, 2 * h + b, 2 * w + e, c]);
            let v = x.data()[i];
            if best == usize::MAX || v > best_v {
                best = i;
                best_v = v;
            }
        }
        out.push(best_v);
        argmax.push(best);
    }
    Ok((Tensor5::from_vec(out_shape, out)?, argmax))
}

const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

pub fn max_pool2_backward<T: Real>(
    grad_y: &Tensor5<T>,
    argmax: &[usize],
    input_shape: Shape5,
) -> Result<Tensor5<T>> {
    if argmax.len() != grad_y.len() {
        return Err(Error::Length {
            what: "pooling indices",
            expected: grad_y.len(),
            got: argmax.len(),
        });
    }
    let mut grad = Tensor5::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_y.data()) {
        grad.data_mut()[i] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour 2x upsampling along D, H and W.
pub fn upsample2<T: Real>(x: &Tensor5<T>) -> Result<Tensor5<T>> {
    let s = x.shape();
    let out_shape = Shape5::new(s.n(), s.d() * 2, s.h() * 2, s.w() * 2, s.c())?;
    Ok(Tensor5::from_fn(out_shape, |[n, d, h, w, c]| {
        x.get([n, d / 2, h / 2, w / 2, c])
    }))
}

pub fn upsample2_backward<T: Real>(grad_y: &Tensor5<T>) -> Result<Tensor5<T>> {
    let s = grad_y.shape();
    check_even(s)?;
    let out_shape = Shape5::new(s.n(), s.d() / 2, s.h() / 2, s.w() / 2, s.c())?;
    Ok(Tensor5::from_fn(out_shape, |[n, d, h, w, c]| {
        let mut acc = T::zero();
        for (a, b, e) in CORNERS {
            acc += grad_y.get([n, 2 * d + a, 2 * h + b, 2 * w + e, c]);
        }
        acc
    }))
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.with_channels(1)? != sb.with_channels(1)? {
        return Err(Error::Shape {
            expected: sa.with_channels(sb.c())?,
            got: sb,
        });
    }
    let out_shape = sa.with_channels(sa.c() + sb.c())?;
    let mut out = Vec::with_capacity(out_shape.len());
    for (ra, rb) in a.data().chunks_exact(sa.c()).zip(b.data().chunks_exact(sb.c())) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor5::from_vec(out_shape, out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(
    grad: &Tensor5<T>,
    first: usize,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    let s = grad.shape();
    if first == 0 || first >= s.c() {
        return Err(Error::Config(format!(
            "cannot split {} channels at {first}",
            s.c()
        )));
    }
    let mut a = Vec::with_capacity(s.spatial() * s.n() * first);
    let mut b = Vec::with_capacity(s.spatial() * s.n() * (s.c() - first));
    for row in grad.data().chunks_exact(s.c()) {
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    Ok((
        Tensor5::from_vec(s.with_channels(first)?, a)?,
        Tensor5::from_vec(s.with_channels(s.c() - first)?, b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, d: usize, h: usize, w: usize, c: usize) -> Shape5 {
        Shape5::new(n, d, h, w, c).unwrap()
    }

    fn random(s: Shape5, seed: u64) -> Tensor5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor5::from_fn(s, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(
        x: &Tensor5<f64>,
        spec: &Conv3dSpec,
        w: &Tensor5<f64>,
        b: &Tensor5<f64>,
    ) -> Tensor5<f64> {
        let s = x.shape();
        let out_shape = s.with_channels(spec.out_channels).unwrap();
        Tensor5::from_fn(out_shape, |[n, d, h, ww, co]| {
            let mut acc = b.data()[co];
            for a in 0..spec.kernel[0] {
                for bb in 0..spec.kernel[1] {
                    for c in 0..spec.kernel[2] {
                        let id = d as isize + (a as isize - (spec.kernel[0] / 2) as isize) * spec.dilation[0] as isize;
                        let ih = h as isize + (bb as isize - (spec.kernel[1] / 2) as isize) * spec.dilation[1] as isize;
                        let iw = ww as isize + (c as isize - (spec.kernel[2] / 2) as isize) * spec.dilation[2] as isize;
                        if id < 0 || ih < 0 || iw < 0 || id >= s.d() as isize || ih >= s.h() as isize || iw >= s.w() as isize {
                            continue;
                        }
                        for ci in 0..spec.in_channels {
                            acc += x.get([n, id as usize, ih as usize, iw as usize, ci])
                                * w.get([a, bb, c, ci, co]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let spec = Conv3dSpec::new(3, 3, 1, 1);
        let w = Tensor5::from_fn(spec.weight_shape().unwrap(), |[_, _, _, ci, co]| {
            if ci == co { 1.0 } else { 0.0 }
        });
        let b = Tensor5::zeros(spec.bias_shape().unwrap());
        let x = random(shape(2, 2, 3, 2, 3), 1);
        let (y, cache) = conv3d_forward(&x, &spec, &w, &b).unwrap();
        assert_eq!(y, x);
        let g = random(x.shape(), 2);
        assert_eq!(conv3d_backward(&g, &cache, &w).unwrap().grad_x, g);
    }

    #[test]
    fn all_ones_kernel_counts_interior_taps() {
        let spec = Conv3dSpec::new(1, 1, 3, 1);
        let w = Tensor5::filled(spec.weight_shape().unwrap(), 1.0);
        let b = Tensor5::zeros(spec.bias_shape().unwrap());
        let x = Tensor5::filled(shape(1, 5, 5, 5, 1), 1.0);
        let (y, _) = conv3d_forward(&x, &spec, &w, &b).unwrap();
        assert_eq!(y.get([0, 2, 2, 2, 0]), 27.0);
        assert_eq!(y.get([0, 0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn dilated_impulse_response() {
        let spec = Conv3dSpec::new(1, 1, 3, 2);
        let w = Tensor5::filled(spec.weight_shape().unwrap(), 1.0);
        let b = Tensor5::zeros(spec.bias_shape().unwrap());
        let s = shape(1, 7, 7, 7, 1);
        let mut x = Tensor5::zeros(s);
        x.set([0, 3, 3, 3, 0], 1.0);
        let (y, _) = conv3d_forward(&x, &spec, &w, &b).unwrap();
        for i in 0..s.len() {
            let [_, d, h, w, _] = s.unflatten(i);
            let on = [d, h, w].iter().all(|&v| [1, 3, 5].contains(&v));
            assert_eq!(y.data()[i], if on { 1.0 } else { 0.0 }, "at {d},{h},{w}");
        }
    }

    #[test]
    fn forward_matches_naive_loops() {
        for (spec, s) in [
            (Conv3dSpec::new(3, 4, 3, 1), shape(2, 4, 5, 3, 3)),
            (Conv3dSpec::new(2, 5, 3, 2), shape(1, 6, 4, 5, 2)),
            (Conv3dSpec::new(7, 2, 1, 1), shape(1, 3, 3, 3, 7)),
        ] {
            let x = random(s, 3);
            let w = random(spec.weight_shape().unwrap(), 4);
            let b = random(spec.bias_shape().unwrap(), 5);
            let (y, _) = conv3d_forward(&x, &spec, &w, &b).unwrap();
            let expected = naive_conv(&x, &spec, &w, &b);
            assert!(max_relative_error(y.data(), expected.data()) < 1e-13);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let spec = Conv3dSpec::new(2, 2, 3, 1);
        let w = Tensor5::zeros(spec.weight_shape().unwrap());
        let b = Tensor5::zeros(spec.bias_shape().unwrap());
        let x = Tensor5::<f64>::zeros(shape(1, 2, 2, 2, 3));
        assert!(matches!(
            conv3d_forward(&x, &spec, &w, &b),
            Err(Error::Shape { .. })
        ));
        assert!(Conv3dSpec::new(1, 1, 2, 1).validate().is_err());
        assert!(Conv3dSpec::new(1, 1, 3, 0).validate().is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let spec = Conv3dSpec::new(2, 2, 3, 1);
        let x = random(shape(1, 3, 3, 3, 2), 1);
        let w = random(spec.weight_shape().unwrap(), 2);
        let b = random(spec.bias_shape().unwrap(), 3);
        let (y, cache) = conv3d_forward(&x, &spec, &w, &b).unwrap();
        let g = conv3d_backward(&Tensor5::zeros(y.shape()), &cache, &w).unwrap();
        assert_eq!(g.grad_x.max_abs(), 0.0);
        assert_eq!(g.grad_w.max_abs(), 0.0);
        assert_eq!(g.grad_b.max_abs(), 0.0);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = Conv3dSpec::new(2, 2, 3, 1);
        let x = random(shape(1, 3, 3, 3, 2), 7);
        let w = random(spec.weight_shape().unwrap(), 8);
        let b = random(spec.bias_shape().unwrap(), 9);
        let r = random(x.shape(), 10);
        let dot = |y: &Tensor5<f64>| y.mul(&r).unwrap().sum();
        let (_, cache) = conv3d_forward(&x, &spec, &w, &b).unwrap();
        let g = conv3d_backward(&r, &cache, &w).unwrap();
        let nx = numeric_gradient(&x, 1e-5, |x| dot(&conv3d_forward(x, &spec, &w, &b).unwrap().0));
        let nw = numeric_gradient(&w, 1e-5, |w| dot(&conv3d_forward(&x, &spec, w, &b).unwrap().0));
        let nb = numeric_gradient(&b, 1e-5, |b| dot(&conv3d_forward(&x, &spec, &w, b).unwrap().0));
        assert!(max_relative_error(g.grad_x.data(), nx.data()) <= 1e-5);
        assert!(max_relative_error(g.grad_w.data(), nw.data()) <= 1e-5);
        assert!(max_relative_error(g.grad_b.data(), nb.data()) <= 1e-5);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = random(shape(1, 4, 4, 2, 3), 1);
        let (p, idx) = max_pool2(&x).unwrap();
        assert_eq!(p.shape(), shape(1, 2, 2, 1, 3));
        assert_eq!(idx.len(), p.len());
        let u = upsample2(&p).unwrap();
        assert_eq!(u.shape(), x.shape());
        assert!(max_pool2(&random(shape(1, 3, 2, 2, 1), 1)).is_err());
        assert_eq!(upsample2_backward(&Tensor5::filled(u.shape(), 1.0)).unwrap(), Tensor5::filled(p.shape(), 8.0));
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random(shape(1, 2, 2, 2, 3), 1);
        let b = random(shape(1, 2, 2, 2, 2), 2);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.get([0, 1, 0, 1, 3]), b.get([0, 1, 0, 1, 0]));
        let (a2, b2) = split_channels(&c, 3).unwrap();
        assert_eq!((a2, b2), (a, b.clone()));
        assert!(concat_channels(&random(shape(1, 2, 2, 1, 1), 1), &b).is_err());
    }
}
