//! A small 3D residual U-Net with pluggable normalization.
//!
//! Every residual block is
//! `conv(dilation 1) -> norm -> relu -> conv(dilation 2) -> norm -> relu`,
//! and its output is the block input concatenated with that result along the
//! channel axis. Encoder levels pool with 2x2x2 max pooling; decoder levels
//! upsample by nearest neighbour, apply a pointwise conv, norm and relu, and
//! concatenate the matching encoder output before their own block. A final
//! pointwise conv with sigmoid produces one probability channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, conv3d_backward, conv3d_forward, max_pool2, max_pool2_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, split_channels, upsample2, upsample2_backward,
    Conv3dSpec, ConvCache,
};
use crate::norm::{
    batchnorm_update_running, norm_backward, norm_forward_with, norm_infer, AffineParams,
    NormCache, NormKind, NormMethod, NormPartition, Reduction, RunningStats, DEFAULT_MOMENTUM,
};
use crate::tensor::{Real, Shape5, Tensor5};

/// One named parameter or buffer with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor5<T>,
    pub grad: Tensor5<T>,
    /// Buffers such as running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor5<T>, trainable: bool) -> usize {
        let grad = Tensor5::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor5<T> {
        &self.params[idx].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    fn accumulate(&mut self, idx: usize, grad: &[T]) {
        for (acc, &g) in self.params[idx].grad.data_mut().iter_mut().zip(grad) {
            *acc += g;
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Replaces every value with the matching `(name, tensor)` entry.
    /// Names, order and shapes must agree exactly.
    pub fn load_values(&mut self, entries: &[(String, Tensor5<T>)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, network expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (mine, (name, value)) in self.params.iter().zip(entries) {
            if mine.name != *name {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` where `{}` was expected",
                    mine.name
                )));
            }
            value.expect_shape(mine.value.shape())?;
        }
        for (mine, (_, value)) in self.params.iter_mut().zip(entries) {
            mine.value = value.clone();
        }
        Ok(())
    }

    /// `(name, value)` pairs in store order.
    pub fn named_values(&self) -> Vec<(String, Tensor5<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Training uses per-input statistics; inference uses running statistics
/// for Batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetSpec {
    pub levels: usize,
    pub base_filters: usize,
    pub norm: NormMethod,
    pub kernel: usize,
    pub dilation: usize,
    pub momentum: f64,
    pub reduction: Reduction,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            levels: 2,
            base_filters: 8,
            norm: NormMethod::instance(),
            kernel: 3,
            dilation: 2,
            momentum: DEFAULT_MOMENTUM,
            reduction: Reduction::Deterministic,
        }
    }
}

impl UNetSpec {
    pub fn new(levels: usize, base_filters: usize, norm: NormMethod) -> Self {
        Self {
            levels,
            base_filters,
            norm,
            ..Self::default()
        }
    }

    /// Filters of the residual block at `level` (the bottleneck is `levels`).
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Channel counts seen by every normalization site, in build order.
    pub fn norm_site_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            out.extend([self.filters(l); 2]);
        }
        out.extend([self.filters(self.levels); 2]);
        for l in (0..self.levels).rev() {
            out.extend([self.filters(l); 3]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_filters == 0 {
            return Err(Error::Config("levels and base_filters must be at least 1".into()));
        }
        if self.kernel.is_multiple_of(2) || self.dilation == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd and dilation positive, got {} / {}",
                self.kernel, self.dilation
            )));
        }
        for c in self.norm_site_channels() {
            self.norm.validate(c)?;
        }
        Ok(())
    }

    /// Checks that an input of `shape` fits the network.
    pub fn check_input(&self, shape: Shape5) -> Result<()> {
        let step = 1usize << self.levels;
        if shape.c() != 1 {
            return Err(Error::Shape {
                expected: shape.with_channels(1)?,
                got: shape,
            });
        }
        if !shape.d().is_multiple_of(step) || !shape.h().is_multiple_of(step) || !shape.w().is_multiple_of(step) {
            return Err(Error::Config(format!(
                "spatial extents of {shape} must be divisible by {step}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: Conv3dSpec,
    weight: usize,
    bias: usize,
}

impl ConvLayer {
    fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: Conv3dSpec,
    ) -> Result<Self> {
        spec.validate()?;
        // He-uniform
        let bound = (6.0 / spec.patch_len() as f64).sqrt();
        let wshape = spec.weight_shape()?;
        let values = (0..wshape.len())
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        let weight = store.push(format!("{name}.weight"), Tensor5::from_vec(wshape, values)?, true);
        let bias = store.push(format!("{name}.bias"), Tensor5::zeros(spec.bias_shape()?), true);
        Ok(Self { spec, weight, bias })
    }

    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor5<T>,
    ) -> Result<(Tensor5<T>, ConvCache<T>)> {
        conv3d_forward(x, &self.spec, store.value(self.weight), store.value(self.bias))
    }

    fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grad_y: &Tensor5<T>,
        cache: &ConvCache<T>,
    ) -> Result<Tensor5<T>> {
        let g = conv3d_backward(grad_y, cache, store.value(self.weight))?;
        store.accumulate(self.weight, g.grad_w.data());
        store.accumulate(self.bias, g.grad_b.data());
        Ok(g.grad_x)
    }
}

#[derive(Debug, Clone)]
struct NormSite {
    method: NormMethod,
    reduction: Reduction,
    affine: Option<(usize, usize)>,
    running: Option<(usize, usize)>,
    momentum: f64,
}

impl NormSite {
    fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        spec: &UNetSpec,
    ) -> Result<Self> {
        let method = spec.norm;
        method.validate(channels)?;
        let vector = Shape5::vector(channels)?;
        let affine = (method.kind != NormKind::NoNorm).then(|| {
            (
                store.push(format!("{name}.gamma"), Tensor5::filled(vector, T::one()), true),
                store.push(format!("{name}.beta"), Tensor5::zeros(vector), true),
            )
        });
        let running = (method.kind == NormKind::Batch).then(|| {
            (
                store.push(format!("{name}.running_mean"), Tensor5::zeros(vector), false),
                store.push(format!("{name}.running_var"), Tensor5::filled(vector, T::one()), false),
            )
        });
        Ok(Self {
            method,
            reduction: spec.reduction,
            affine,
            running,
            momentum: spec.momentum,
        })
    }

    fn affine<T: Real>(&self, store: &ParamStore<T>) -> Option<AffineParams<T>> {
        self.affine.map(|(g, b)| AffineParams {
            gamma: store.value(g).data().to_vec(),
            beta: store.value(b).data().to_vec(),
        })
    }

    fn running<T: Real>(&self, store: &ParamStore<T>) -> Option<RunningStats<T>> {
        self.running.map(|(m, v)| RunningStats {
            mean: store.value(m).data().to_vec(),
            var: store.value(v).data().to_vec(),
            momentum: self.momentum,
        })
    }

    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor5<T>,
        mode: Mode,
    ) -> Result<(Tensor5<T>, Option<NormCache<T>>)> {
        let Some(affine) = self.affine(store) else {
            return Ok((x.clone(), None));
        };
        match mode {
            Mode::Train => {
                let partition = std::sync::Arc::new(NormPartition::build(&self.method, x.shape())?);
                let (y, cache) = norm_forward_with(
                    x,
                    &partition,
                    &affine,
                    self.method.epsilon,
                    self.method.kind,
                    self.reduction,
                )?;
                Ok((y, Some(cache)))
            }
            Mode::Infer => Ok((
                norm_infer(x, &self.method, &affine, self.running(store).as_ref())?,
                None,
            )),
        }
    }

    fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grad_y: &Tensor5<T>,
        cache: Option<&NormCache<T>>,
    ) -> Result<Tensor5<T>> {
        let (Some((gi, bi)), Some(cache)) = (self.affine, cache) else {
            if self.affine.is_some() {
                return Err(Error::Usage(
                    "normalization backward needs a training-mode cache".into(),
                ));
            }
            return Ok(grad_y.clone());
        };
        let affine = self.affine(store).expect("affine present");
        let g = norm_backward(grad_y, cache, &affine)?;
        store.accumulate(gi, &g.grad_gamma);
        store.accumulate(bi, &g.grad_beta);
        Ok(g.grad_x)
    }

    fn update_running<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: Option<&NormCache<T>>,
    ) -> Result<()> {
        let (Some((mi, vi)), Some(cache)) = (self.running, cache) else {
            return Ok(());
        };
        let stats = self.running(store).expect("running stats present");
        let next = batchnorm_update_running(&stats, cache)?;
        store.get_mut(mi).value.data_mut().copy_from_slice(&next.mean);
        store.get_mut(vi).value.data_mut().copy_from_slice(&next.var);
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvLayer,
    norm1: NormSite,
    conv2: ConvLayer,
    norm2: NormSite,
}

#[derive(Debug, Clone)]
struct ResBlockCache<T> {
    input_channels: usize,
    conv1: ConvCache<T>,
    norm1: Option<NormCache<T>>,
    pre1: Tensor5<T>,
    conv2: ConvCache<T>,
    norm2: Option<NormCache<T>>,
    pre2: Tensor5<T>,
}

impl ResBlock {
    fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        filters: usize,
        spec: &UNetSpec,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ConvLayer::build(
                store,
                rng,
                &format!("{name}.conv1"),
                Conv3dSpec::new(in_channels, filters, spec.kernel, 1),
            )?,
            norm1: NormSite::build(store, &format!("{name}.norm1"), filters, spec)?,
            conv2: ConvLayer::build(
                store,
                rng,
                &format!("{name}.conv2"),
                Conv3dSpec::new(filters, filters, spec.kernel, spec.dilation),
            )?,
            norm2: NormSite::build(store, &format!("{name}.norm2"), filters, spec)?,
        })
    }

    fn out_channels(&self) -> usize {
        self.conv1.spec.in_channels + self.conv2.spec.out_channels
    }

    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor5<T>,
        mode: Mode,
    ) -> Result<(Tensor5<T>, ResBlockCache<T>)> {
        let (h1, conv1) = self.conv1.forward(store, x)?;
        let (pre1, norm1) = self.norm1.forward(store, &h1, mode)?;
        let (h2, conv2) = self.conv2.forward(store, &relu(&pre1))?;
        let (pre2, norm2) = self.norm2.forward(store, &h2, mode)?;
        let out = concat_channels(x, &relu(&pre2))?;
        let cache = ResBlockCache {
            input_channels: x.shape().c(),
            conv1,
            norm1,
            pre1,
            conv2,
            norm2,
            pre2,
        };
        Ok((out, cache))
    }

    fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grad: &Tensor5<T>,
        cache: &ResBlockCache<T>,
    ) -> Result<Tensor5<T>> {
        let (grad_skip, grad_a2) = split_channels(grad, cache.input_channels)?;
        let g = relu_backward(&grad_a2, &cache.pre2)?;
        let g = self.norm2.backward(store, &g, cache.norm2.as_ref())?;
        let g = self.conv2.backward(store, &g, &cache.conv2)?;
        let g = relu_backward(&g, &cache.pre1)?;
        let g = self.norm1.backward(store, &g, cache.norm1.as_ref())?;
        let g = self.conv1.backward(store, &g, &cache.conv1)?;
        g.add(&grad_skip)
    }

    fn update_running<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &ResBlockCache<T>,
    ) -> Result<()> {
        self.norm1.update_running(store, cache.norm1.as_ref())?;
        self.norm2.update_running(store, cache.norm2.as_ref())
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up_conv: ConvLayer,
    up_norm: NormSite,
    block: ResBlock,
}

#[derive(Debug, Clone)]
struct DecoderCache<T> {
    up_conv: ConvCache<T>,
    up_norm: Option<NormCache<T>>,
    pre: Tensor5<T>,
    up_channels: usize,
    block: ResBlockCache<T>,
}

#[derive(Debug, Clone)]
struct EncoderCache<T> {
    block: ResBlockCache<T>,
    skip_shape: Shape5,
    argmax: Vec<usize>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    encoders: Vec<EncoderCache<T>>,
    bottleneck: ResBlockCache<T>,
    decoders: Vec<DecoderCache<T>>,
    head: ConvCache<T>,
    output: Tensor5<T>,
}

impl<T: Real> UNetCache<T> {
    /// Output of the first normalization site (before its activation).
    pub fn first_norm_output(&self) -> &Tensor5<T> {
        &self.encoders[0].block.pre1
    }

    pub fn output(&self) -> &Tensor5<T> {
        &self.output
    }
}

/// A residual U-Net together with its parameters.
#[derive(Debug, Clone)]
pub struct UNet<T = f64> {
    spec: UNetSpec,
    params: ParamStore<T>,
    encoders: Vec<ResBlock>,
    bottleneck: ResBlock,
    decoders: Vec<DecoderStage>,
    head: ConvLayer,
}

impl<T: Real> UNet<T> {
    /// Builds the network with deterministic He-uniform initialization.
    pub fn build(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut channels = 1;
        let mut skips = Vec::new();
        let mut encoders = Vec::new();
        for l in 0..spec.levels {
            let block = ResBlock::build(
                &mut params,
                &mut rng,
                &format!("enc{l}"),
                channels,
                spec.filters(l),
                &spec,
            )?;
            channels = block.out_channels();
            skips.push(channels);
            encoders.push(block);
        }
        let bottleneck = ResBlock::build(
            &mut params,
            &mut rng,
            "bottleneck",
            channels,
            spec.filters(spec.levels),
            &spec,
        )?;
        channels = bottleneck.out_channels();
        let mut decoders = Vec::new();
        for l in (0..spec.levels).rev() {
            let f = spec.filters(l);
            let name = format!("dec{l}");
            let up_conv = ConvLayer::build(
                &mut params,
                &mut rng,
                &format!("{name}.up_conv"),
                Conv3dSpec::new(channels, f, 1, 1),
            )?;
            let up_norm = NormSite::build(&mut params, &format!("{name}.up_norm"), f, &spec)?;
            let block = ResBlock::build(&mut params, &mut rng, &name, f + skips[l], f, &spec)?;
            channels = block.out_channels();
            decoders.push(DecoderStage {
                up_conv,
                up_norm,
                block,
            });
        }
        let head = ConvLayer::build(&mut params, &mut rng, "head", Conv3dSpec::new(channels, 1, 1, 1))?;
        Ok(Self {
            spec,
            params,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Maps `(N, D, H, W, 1)` to per-voxel probabilities of the same shape.
    pub fn forward(&self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, UNetCache<T>)> {
        self.spec.check_input(x.shape())?;
        let store = &self.params;
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for block in &self.encoders {
            let (out, cache) = block.forward(store, &h, mode)?;
            let (pooled, argmax) = max_pool2(&out)?;
            encoders.push(EncoderCache {
                block: cache,
                skip_shape: out.shape(),
                argmax,
            });
            skips.push(out);
            h = pooled;
        }
        let (mut h, bottleneck) = self.bottleneck.forward(store, &h, mode)?;
        let mut decoders = Vec::with_capacity(self.decoders.len());
        for (stage, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            let up = upsample2(&h)?;
            let (u, up_conv) = stage.up_conv.forward(store, &up)?;
            let (pre, up_norm) = stage.up_norm.forward(store, &u, mode)?;
            let joined = concat_channels(&relu(&pre), skip)?;
            let (out, block) = stage.block.forward(store, &joined, mode)?;
            decoders.push(DecoderCache {
                up_conv,
                up_norm,
                up_channels: pre.shape().c(),
                pre,
                block,
            });
            h = out;
        }
        let (logits, head) = self.head.forward(store, &h)?;
        let output = sigmoid(&logits);
        let cache = UNetCache {
            encoders,
            bottleneck,
            decoders,
            head,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Accumulates parameter gradients of a loss with gradient `grad_y`
    /// (with respect to the probabilities) and returns the input gradient.
    pub fn backward(&mut self, grad_y: &Tensor5<T>, cache: &UNetCache<T>) -> Result<Tensor5<T>> {
        let store = &mut self.params;
        let g = sigmoid_backward(grad_y, &cache.output)?;
        let mut g = self.head.backward(store, &g, &cache.head)?;
        let mut grad_skips = Vec::with_capacity(self.decoders.len());
        for (stage, dc) in self.decoders.iter().zip(&cache.decoders).rev() {
            let gj = stage.block.backward(store, &g, &dc.block)?;
            let (g_up, g_skip) = split_channels(&gj, dc.up_channels)?;
            grad_skips.push(g_skip);
            let gu = relu_backward(&g_up, &dc.pre)?;
            let gu = stage.up_norm.backward(store, &gu, dc.up_norm.as_ref())?;
            let gu = stage.up_conv.backward(store, &gu, &dc.up_conv)?;
            g = upsample2_backward(&gu)?;
        }
        // grad_skips is ordered shallowest level first
        let mut g = self.bottleneck.backward(store, &g, &cache.bottleneck)?;
        for ((block, ec), g_skip) in self
            .encoders
            .iter()
            .zip(&cache.encoders)
            .zip(&grad_skips)
            .rev()
        {
            let g_out = max_pool2_backward(&g, &ec.argmax, ec.skip_shape)?.add(g_skip)?;
            g = block.backward(store, &g_out, &ec.block)?;
        }
        Ok(g)
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running statistics of every Batch normalization site.
    pub fn update_running_stats(&mut self, cache: &UNetCache<T>) -> Result<()> {
        let store = &mut self.params;
        for (block, ec) in self.encoders.iter().zip(&cache.encoders) {
            block.update_running(store, &ec.block)?;
        }
        self.bottleneck.update_running(store, &cache.bottleneck)?;
        for (stage, dc) in self.decoders.iter().zip(&cache.decoders) {
            stage.up_norm.update_running(store, dc.up_norm.as_ref())?;
            stage.block.update_running(store, &dc.block)?;
        }
        Ok(())
    }
}
