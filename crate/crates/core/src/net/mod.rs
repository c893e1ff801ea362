//! Runtime networks: residual blocks, skip captures and concatenation, and
//! the forward/backward walk over the layer list.
//!
//! Parameters live inside their layers and expose themselves through the
//! visitor methods; every learnable value appears exactly once under a
//! unique name. Gradients accumulate across backward calls until
//! [`Network::zero_grads`].

pub mod checkpoint;
pub mod config;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta};
pub use config::{receptive_field, CompositionInfo, LayerConfig, LayerKind, NetworkConfig, RfEntry};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::batchnorm::{BatchNorm, BnCache};
use crate::ops::conv::{conv2d, conv2d_backward, ConvKernel, ConvSpec};
use crate::ops::deconv::{bilinear_kernel, deconv_backward, deconv_upsample};
use crate::ops::pool::{max_pool, max_pool_backward};
use crate::ops::{relu, relu_backward};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Forward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

struct ConvLayer<T> {
    name: String,
    spec: ConvSpec,
    kernel: ConvKernel<T>,
    grad_weights: Tensor4<T>,
    grad_bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn new(name: String, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let kernel = ConvKernel::init_fan_in(&spec, rng)?;
        let grad_weights = Tensor4::zeros(kernel.weights.shape())?;
        let grad_bias = vec![T::zero(); spec.out_channels];
        Ok(ConvLayer { name, spec, kernel, grad_weights, grad_bias })
    }

    fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d(x, &self.kernel, &self.spec)
    }

    fn backward(&mut self, input: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let grads = conv2d_backward(input, &self.kernel, &self.spec, upstream)?;
        self.grad_weights.add_assign(&grads.weights)?;
        for (g, d) in self.grad_bias.iter_mut().zip(&grads.bias) {
            *g += *d;
        }
        Ok(grads.input)
    }
}

struct BnLayer<T> {
    name: String,
    bn: BatchNorm<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
}

impl<T: Scalar> BnLayer<T> {
    fn new(name: String, channels: usize) -> Self {
        BnLayer {
            name,
            bn: BatchNorm::new(channels),
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
        }
    }

    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>)> {
        let (y, cache, stats) = self.bn.forward_train(x)?;
        self.bn.apply_stats(&stats);
        Ok((y, cache))
    }

    fn backward(&mut self, cache: &BnCache<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (gx, dgamma, dbeta) = self.bn.backward(cache, upstream)?;
        for (g, d) in self.grad_gamma.iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in self.grad_beta.iter_mut().zip(&dbeta) {
            *g += *d;
        }
        Ok(gx)
    }
}

struct DeconvLayer<T> {
    name: String,
    factor: usize,
    kernel: ConvKernel<T>,
    grad_weights: Tensor4<T>,
    grad_bias: Vec<T>,
}

impl<T: Scalar> DeconvLayer<T> {
    fn new(name: String, factor: usize, channels: usize) -> Result<Self> {
        let kernel = bilinear_kernel(factor, channels)?;
        let grad_weights = Tensor4::zeros(kernel.weights.shape())?;
        let grad_bias = vec![T::zero(); channels];
        Ok(DeconvLayer { name, factor, kernel, grad_weights, grad_bias })
    }

    fn backward(&mut self, input: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let grads = deconv_backward(input, &self.kernel, self.factor, upstream)?;
        self.grad_weights.add_assign(&grads.weights)?;
        for (g, d) in self.grad_bias.iter_mut().zip(&grads.bias) {
            *g += *d;
        }
        Ok(grads.input)
    }
}

/// Strided identity: takes every `stride`-th pixel. Used as the shortcut of
/// stride-changing blocks that keep their channel count, so the dilation
/// ablation does not change the parameter count.
fn subsample<T: Scalar>(x: &Tensor4<T>, stride: usize) -> Result<Tensor4<T>> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.shape();
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor4::zeros((n, c, oh, ow))?;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = x.at(b, ch, oy * stride, ox * stride);
                    out.set(b, ch, oy, ox, v);
                }
            }
        }
    }
    Ok(out)
}

fn subsample_backward<T: Scalar>(upstream: &Tensor4<T>, in_shape: Shape4, stride: usize) -> Result<Tensor4<T>> {
    if stride == 1 {
        return Ok(upstream.clone());
    }
    let mut grad = Tensor4::zeros(in_shape)?;
    let (n, c, oh, ow) = upstream.shape();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    grad.set(b, ch, oy * stride, ox * stride, upstream.at(b, ch, oy, ox));
                }
            }
        }
    }
    Ok(grad)
}

struct ResidualBlock<T> {
    conv1: ConvLayer<T>,
    bn1: BnLayer<T>,
    conv2: ConvLayer<T>,
    bn2: BnLayer<T>,
    /// Projection shortcut, present exactly when the channel count changes.
    proj: Option<(ConvLayer<T>, BnLayer<T>)>,
    stride: usize,
}

struct BlockCache<T> {
    x: Tensor4<T>,
    h2: Tensor4<T>,
    h3: Tensor4<T>,
    sum: Tensor4<T>,
    bn1: BnCache<T>,
    bn2: BnCache<T>,
    proj_bn: Option<BnCache<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv1 = ConvLayer::new(
            format!("{name}.conv1"),
            ConvSpec::new(1, dilation, stride, dilation, in_channels, out_channels)?,
            rng,
        )?;
        let bn1 = BnLayer::new(format!("{name}.bn1"), out_channels);
        let conv2 = ConvLayer::new(
            format!("{name}.conv2"),
            ConvSpec::new(1, dilation, 1, dilation, out_channels, out_channels)?,
            rng,
        )?;
        let bn2 = BnLayer::new(format!("{name}.bn2"), out_channels);
        let proj = if in_channels != out_channels {
            let conv = ConvLayer::new(
                format!("{name}.proj"),
                ConvSpec::new(0, 1, stride, 0, in_channels, out_channels)?,
                rng,
            )?;
            Some((conv, BnLayer::new(format!("{name}.proj_bn"), out_channels)))
        } else {
            None
        };
        Ok(ResidualBlock { conv1, bn1, conv2, bn2, proj, stride })
    }

    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BlockCache<T>)> {
        let h1 = self.conv1.forward(x)?;
        let (h2, bn1_cache) = self.bn1.forward_train(&h1)?;
        let h3 = relu(&h2);
        let h4 = self.conv2.forward(&h3)?;
        let (h5, bn2_cache) = self.bn2.forward_train(&h4)?;
        let (shortcut, proj_bn) = match &mut self.proj {
            Some((conv, bn)) => {
                let s1 = conv.forward(x)?;
                let (s2, cache) = bn.forward_train(&s1)?;
                (s2, Some(cache))
            }
            None => (subsample(x, self.stride)?, None),
        };
        let sum = h5.add(&shortcut)?;
        let y = relu(&sum);
        Ok((y, BlockCache { x: x.clone(), h2, h3, sum, bn1: bn1_cache, bn2: bn2_cache, proj_bn }))
    }

    fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let h = self.bn1.bn.forward_infer(&self.conv1.forward(x)?)?;
        let h = relu(&h);
        let h = self.bn2.bn.forward_infer(&self.conv2.forward(&h)?)?;
        let shortcut = match &self.proj {
            Some((conv, bn)) => bn.bn.forward_infer(&conv.forward(x)?)?,
            None => subsample(x, self.stride)?,
        };
        Ok(relu(&h.add(&shortcut)?))
    }

    fn backward(&mut self, cache: &BlockCache<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g_sum = relu_backward(&cache.sum, upstream);
        let g_h4 = self.bn2.backward(&cache.bn2, &g_sum)?;
        let g_h3 = self.conv2.backward(&cache.h3, &g_h4)?;
        let g_h2 = relu_backward(&cache.h2, &g_h3);
        let g_h1 = self.bn1.backward(&cache.bn1, &g_h2)?;
        let mut g_x = self.conv1.backward(&cache.x, &g_h1)?;
        let g_short = match (&mut self.proj, &cache.proj_bn) {
            (Some((conv, bn)), Some(pc)) => {
                let g = bn.backward(pc, &g_sum)?;
                conv.backward(&cache.x, &g)?
            }
            _ => subsample_backward(&g_sum, cache.x.shape(), self.stride)?,
        };
        g_x.add_assign(&g_short)?;
        Ok(g_x)
    }
}

enum Resample<T> {
    Direct,
    Pool { window: usize },
    Upsample { factor: usize, kernel: ConvKernel<T> },
}

struct SkipSource<T> {
    label: String,
    channels: usize,
    resample: Resample<T>,
}

enum Layer<T> {
    Conv(ConvLayer<T>),
    Bn(BnLayer<T>),
    Relu,
    Pool { window: usize, stride: usize },
    Block(ResidualBlock<T>),
    Concat(Vec<SkipSource<T>>),
    Deconv(DeconvLayer<T>),
    Capture(String),
}

enum SourceCache<T> {
    Direct,
    Pool { argmax: Vec<usize>, in_shape: Shape4 },
    Upsample { input: Tensor4<T> },
}

enum TapeItem<T> {
    Conv { input: Tensor4<T> },
    Bn { cache: BnCache<T> },
    Relu { input: Tensor4<T> },
    Pool { argmax: Vec<usize>, in_shape: Shape4 },
    Block(Box<BlockCache<T>>),
    Concat { in_shape: Shape4, sources: Vec<SourceCache<T>> },
    Deconv { input: Tensor4<T> },
    Capture,
}

/// Forward-pass record consumed by [`Network::backward`].
pub struct Tape<T> {
    items: Vec<TapeItem<T>>,
    pub logits: Tensor4<T>,
    /// Shape of the score map before the final deconv (equals the logits
    /// shape when the network has no deconv layer).
    pub feature_shape: Shape4,
}

/// View of one named parameter: flat value and gradient slices plus the
/// tensor shape (vectors report as (1, 1, 1, len)).
pub struct ParamInfo<'a, T> {
    pub name: String,
    pub value: &'a [T],
    pub grad: &'a [T],
    pub shape: Shape4,
}

/// An instantiated network with parameters, gradients and skip wiring.
pub struct Network<T> {
    pub config: NetworkConfig,
    pub seed: u64,
    info: CompositionInfo,
    layers: Vec<Layer<T>>,
}

/// Deterministic construction: identical (config, seed) pairs produce
/// bit-identical parameters.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    let info = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut channels = config.input_channels;
    let mut stride = 1usize;
    let mut captures: HashMap<String, (usize, usize)> = HashMap::new();

    for (i, layer) in config.layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv(spec) => {
                layers.push(Layer::Conv(ConvLayer::new(format!("conv{i}"), *spec, &mut rng)?));
                channels = spec.out_channels;
                stride *= spec.stride;
            }
            LayerKind::BatchNorm => {
                layers.push(Layer::Bn(BnLayer::new(format!("bn{i}"), channels)));
            }
            LayerKind::Relu => layers.push(Layer::Relu),
            LayerKind::MaxPool { window, stride: s } => {
                layers.push(Layer::Pool { window: *window, stride: *s });
                stride *= s;
            }
            LayerKind::ResidualStage { out_channels, blocks, stride: s, dilation } => {
                for b in 0..*blocks {
                    let (block_stride, cin) = if b == 0 { (*s, channels) } else { (1, *out_channels) };
                    layers.push(Layer::Block(ResidualBlock::new(
                        &format!("stage{i}.block{b}"),
                        cin,
                        *out_channels,
                        block_stride,
                        *dilation,
                        &mut rng,
                    )?));
                }
                channels = *out_channels;
                stride *= s;
            }
            LayerKind::ConcatSkip { sources } => {
                let mut plan = Vec::new();
                let mut total = 0usize;
                for label in sources {
                    let (c, cap_stride) = captures[label];
                    let resample = if stride == cap_stride {
                        Resample::Direct
                    } else if stride > cap_stride {
                        Resample::Pool { window: stride / cap_stride }
                    } else {
                        let factor = cap_stride / stride;
                        Resample::Upsample { factor, kernel: bilinear_kernel(factor, c)? }
                    };
                    plan.push(SkipSource { label: label.clone(), channels: c, resample });
                    total += c;
                }
                layers.push(Layer::Concat(plan));
                channels = total;
            }
            LayerKind::Deconv { factor } => {
                layers.push(Layer::Deconv(DeconvLayer::new(format!("deconv{i}"), *factor, channels)?));
            }
        }
        if let Some(label) = &layer.capture {
            captures.insert(label.clone(), (channels, stride));
            layers.push(Layer::Capture(label.clone()));
        }
    }

    Ok(Network { config: config.clone(), seed, info, layers })
}

impl<T: Scalar> Network<T> {
    pub fn feature_stride(&self) -> usize {
        self.info.feature_stride
    }

    pub fn bins(&self) -> usize {
        self.config.bins
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let (_, c, h, w) = x.shape();
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let s = self.info.feature_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the network stride {s}"
            )));
        }
        Ok(())
    }

    /// Train-mode forward. Commits batch-norm running-statistics updates and
    /// returns the tape for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tape<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut captured: HashMap<String, Tensor4<T>> = HashMap::new();
        let mut items = Vec::with_capacity(self.layers.len());
        let mut feature_shape = None;

        for layer in &mut self.layers {
            match layer {
                Layer::Conv(conv) => {
                    let out = conv.forward(&cur)?;
                    items.push(TapeItem::Conv { input: std::mem::replace(&mut cur, out) });
                }
                Layer::Bn(bn) => {
                    let (out, cache) = bn.forward_train(&cur)?;
                    cur = out;
                    items.push(TapeItem::Bn { cache });
                }
                Layer::Relu => {
                    let out = relu(&cur);
                    items.push(TapeItem::Relu { input: std::mem::replace(&mut cur, out) });
                }
                Layer::Pool { window, stride } => {
                    let pooled = max_pool(&cur, *window, *stride)?;
                    items.push(TapeItem::Pool { argmax: pooled.argmax, in_shape: cur.shape() });
                    cur = pooled.output;
                }
                Layer::Block(block) => {
                    let (out, cache) = block.forward_train(&cur)?;
                    cur = out;
                    items.push(TapeItem::Block(Box::new(cache)));
                }
                Layer::Concat(sources) => {
                    let in_shape = cur.shape();
                    let mut caches = Vec::with_capacity(sources.len());
                    let mut fused: Option<Tensor4<T>> = None;
                    for src in sources.iter() {
                        let t = captured
                            .get(&src.label)
                            .ok_or_else(|| Error::Config(format!("skip label {} not captured", src.label)))?;
                        let (resampled, cache) = match &src.resample {
                            Resample::Direct => (t.clone(), SourceCache::Direct),
                            Resample::Pool { window } => {
                                let pooled = max_pool(t, *window, *window)?;
                                (pooled.output, SourceCache::Pool { argmax: pooled.argmax, in_shape: t.shape() })
                            }
                            Resample::Upsample { factor, kernel } => (
                                deconv_upsample(t, kernel, *factor)?,
                                SourceCache::Upsample { input: t.clone() },
                            ),
                        };
                        fused = Some(match fused {
                            None => resampled,
                            Some(acc) => acc.concat_channels(&resampled)?,
                        });
                        caches.push(cache);
                    }
                    cur = fused.expect("concat has at least one source");
                    items.push(TapeItem::Concat { in_shape, sources: caches });
                }
                Layer::Deconv(deconv) => {
                    feature_shape = Some(cur.shape());
                    let out = deconv_upsample(&cur, &deconv.kernel, deconv.factor)?;
                    items.push(TapeItem::Deconv { input: std::mem::replace(&mut cur, out) });
                }
                Layer::Capture(label) => {
                    captured.insert(label.clone(), cur.clone());
                    items.push(TapeItem::Capture);
                }
            }
        }
        let feature_shape = feature_shape.unwrap_or_else(|| cur.shape());
        Ok(Tape { items, logits: cur, feature_shape })
    }

    /// Inference-mode forward: pure, uses running batch-norm statistics.
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut captured: HashMap<String, Tensor4<T>> = HashMap::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(conv) => conv.forward(&cur)?,
                Layer::Bn(bn) => bn.bn.forward_infer(&cur)?,
                Layer::Relu => relu(&cur),
                Layer::Pool { window, stride } => max_pool(&cur, *window, *stride)?.output,
                Layer::Block(block) => block.forward_infer(&cur)?,
                Layer::Concat(sources) => {
                    let mut fused: Option<Tensor4<T>> = None;
                    for src in sources.iter() {
                        let t = captured
                            .get(&src.label)
                            .ok_or_else(|| Error::Config(format!("skip label {} not captured", src.label)))?;
                        let resampled = match &src.resample {
                            Resample::Direct => t.clone(),
                            Resample::Pool { window } => max_pool(t, *window, *window)?.output,
                            Resample::Upsample { factor, kernel } => deconv_upsample(t, kernel, *factor)?,
                        };
                        fused = Some(match fused {
                            None => resampled,
                            Some(acc) => acc.concat_channels(&resampled)?,
                        });
                    }
                    fused.expect("concat has at least one source")
                }
                Layer::Deconv(deconv) => deconv_upsample(&cur, &deconv.kernel, deconv.factor)?,
                Layer::Capture(label) => {
                    captured.insert(label.clone(), cur.clone());
                    cur
                }
            };
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients for `sum(grad_logits .* logits)` and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, tape: &Tape<T>, grad_logits: &Tensor4<T>) -> Result<Tensor4<T>> {
        if grad_logits.shape() != tape.logits.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match logits {:?}",
                grad_logits.shape(),
                tape.logits.shape()
            )));
        }
        let mut grad = grad_logits.clone();
        let mut skip_grads: HashMap<String, Tensor4<T>> = HashMap::new();

        for (layer, item) in self.layers.iter_mut().zip(&tape.items).rev() {
            match (layer, item) {
                (Layer::Conv(conv), TapeItem::Conv { input }) => {
                    grad = conv.backward(input, &grad)?;
                }
                (Layer::Bn(bn), TapeItem::Bn { cache }) => {
                    grad = bn.backward(cache, &grad)?;
                }
                (Layer::Relu, TapeItem::Relu { input }) => {
                    grad = relu_backward(input, &grad);
                }
                (Layer::Pool { .. }, TapeItem::Pool { argmax, in_shape }) => {
                    grad = max_pool_backward(*in_shape, argmax, &grad)?;
                }
                (Layer::Block(block), TapeItem::Block(cache)) => {
                    grad = block.backward(cache, &grad)?;
                }
                (Layer::Concat(sources), TapeItem::Concat { in_shape, sources: caches }) => {
                    let mut offset = 0usize;
                    for (src, cache) in sources.iter().zip(caches) {
                        let slice = grad.slice_channels(offset, offset + src.channels)?;
                        let g_src = match (&src.resample, cache) {
                            (Resample::Direct, SourceCache::Direct) => slice,
                            (Resample::Pool { .. }, SourceCache::Pool { argmax, in_shape }) => {
                                max_pool_backward(*in_shape, argmax, &slice)?
                            }
                            (Resample::Upsample { factor, kernel }, SourceCache::Upsample { input }) => {
                                // resampling kernel is a fixed buffer; only the
                                // input gradient propagates
                                deconv_backward(input, kernel, *factor, &slice)?.input
                            }
                            _ => return Err(Error::Config("concat cache mismatch".into())),
                        };
                        match skip_grads.get_mut(&src.label) {
                            Some(acc) => acc.add_assign(&g_src)?,
                            None => {
                                skip_grads.insert(src.label.clone(), g_src);
                            }
                        }
                        offset += src.channels;
                    }
                    grad = Tensor4::zeros(*in_shape)?;
                }
                (Layer::Deconv(deconv), TapeItem::Deconv { input }) => {
                    grad = deconv.backward(input, &grad)?;
                }
                (Layer::Capture(label), TapeItem::Capture) => {
                    if let Some(g) = skip_grads.remove(label) {
                        grad.add_assign(&g)?;
                    }
                }
                _ => return Err(Error::Config("tape does not match network structure".into())),
            }
        }
        Ok(grad)
    }

    /// Visits every learnable parameter once, in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(ParamInfo<'_, T>)) {
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => visit_conv(c, f),
                Layer::Bn(b) => visit_bn(b, f),
                Layer::Block(block) => {
                    visit_conv(&block.conv1, f);
                    visit_bn(&block.bn1, f);
                    visit_conv(&block.conv2, f);
                    visit_bn(&block.bn2, f);
                    if let Some((conv, bn)) = &block.proj {
                        visit_conv(conv, f);
                        visit_bn(bn, f);
                    }
                }
                Layer::Deconv(d) => {
                    f(ParamInfo {
                        name: format!("{}.weight", d.name),
                        value: d.kernel.weights.data(),
                        grad: d.grad_weights.data(),
                        shape: d.kernel.weights.shape(),
                    });
                    f(ParamInfo {
                        name: format!("{}.bias", d.name),
                        value: &d.kernel.bias,
                        grad: &d.grad_bias,
                        shape: (1, 1, 1, d.kernel.bias.len()),
                    });
                }
                _ => {}
            }
        }
    }

    /// Visits every parameter with a mutable value slice and its gradient.
    pub fn visit_params_update(&mut self, f: &mut dyn FnMut(&str, &mut [T], &[T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => update_conv(c, f),
                Layer::Bn(b) => update_bn(b, f),
                Layer::Block(block) => {
                    update_conv(&mut block.conv1, f);
                    update_bn(&mut block.bn1, f);
                    update_conv(&mut block.conv2, f);
                    update_bn(&mut block.bn2, f);
                    if let Some((conv, bn)) = &mut block.proj {
                        update_conv(conv, f);
                        update_bn(bn, f);
                    }
                }
                Layer::Deconv(d) => {
                    f(&format!("{}.weight", d.name), d.kernel.weights.data_mut(), d.grad_weights.data());
                    f(&format!("{}.bias", d.name), &mut d.kernel.bias, &d.grad_bias);
                }
                _ => {}
            }
        }
    }

    /// Visits batch-norm running statistics (model state that is not
    /// learnable but ships with checkpoints).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.for_each_bn(&mut |bn| {
            f(&format!("{}.running_mean", bn.name), &bn.bn.running_mean);
            f(&format!("{}.running_var", bn.name), &bn.bn.running_var);
        });
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.for_each_bn_mut(&mut |bn| {
            f(&format!("{}.running_mean", bn.name), &mut bn.bn.running_mean);
            f(&format!("{}.running_var", bn.name), &mut bn.bn.running_var);
        });
    }

    fn for_each_bn(&self, f: &mut dyn FnMut(&BnLayer<T>)) {
        for layer in &self.layers {
            match layer {
                Layer::Bn(b) => f(b),
                Layer::Block(block) => {
                    f(&block.bn1);
                    f(&block.bn2);
                    if let Some((_, bn)) = &block.proj {
                        f(bn);
                    }
                }
                _ => {}
            }
        }
    }

    fn for_each_bn_mut(&mut self, f: &mut dyn FnMut(&mut BnLayer<T>)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Bn(b) => f(b),
                Layer::Block(block) => {
                    f(&mut block.bn1);
                    f(&mut block.bn2);
                    if let Some((_, bn)) = &mut block.proj {
                        f(bn);
                    }
                }
                _ => {}
            }
        }
    }

    /// Total learnable value count.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p| count += p.value.len());
        count
    }

    pub fn zero_grads(&mut self) {
        self.visit_grads_mut(&mut |g| g.iter_mut().for_each(|v| *v = T::zero()));
    }

    pub fn scale_grads(&mut self, k: T) {
        self.visit_grads_mut(&mut |g| g.iter_mut().for_each(|v| *v *= k));
    }

    fn visit_grads_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    f(c.grad_weights.data_mut());
                    f(&mut c.grad_bias);
                }
                Layer::Bn(b) => {
                    f(&mut b.grad_gamma);
                    f(&mut b.grad_beta);
                }
                Layer::Block(block) => {
                    f(block.conv1.grad_weights.data_mut());
                    f(&mut block.conv1.grad_bias);
                    f(&mut block.bn1.grad_gamma);
                    f(&mut block.bn1.grad_beta);
                    f(block.conv2.grad_weights.data_mut());
                    f(&mut block.conv2.grad_bias);
                    f(&mut block.bn2.grad_gamma);
                    f(&mut block.bn2.grad_beta);
                    if let Some((conv, bn)) = &mut block.proj {
                        f(conv.grad_weights.data_mut());
                        f(&mut conv.grad_bias);
                        f(&mut bn.grad_gamma);
                        f(&mut bn.grad_beta);
                    }
                }
                Layer::Deconv(d) => {
                    f(d.grad_weights.data_mut());
                    f(&mut d.grad_bias);
                }
                _ => {}
            }
        }
    }

    /// Converts parameters, gradients and buffers to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut out = build_network::<U>(&self.config, self.seed)?;
        let mut values: HashMap<String, Vec<U>> = HashMap::new();
        self.visit_params(&mut |p| {
            values.insert(p.name.clone(), p.value.iter().map(|&v| U::from_f64(v.to_f64_lossy())).collect());
        });
        out.visit_params_update(&mut |name, value, _| {
            if let Some(v) = values.get(name) {
                value.copy_from_slice(v);
            }
        });
        let mut buffers: HashMap<String, Vec<U>> = HashMap::new();
        self.visit_buffers(&mut |name, value| {
            buffers.insert(name.to_string(), value.iter().map(|&v| U::from_f64(v.to_f64_lossy())).collect());
        });
        out.visit_buffers_mut(&mut |name, value| {
            if let Some(v) = buffers.get(name) {
                value.copy_from_slice(v);
            }
        });
        Ok(out)
    }
}

fn visit_conv<'a, T: Scalar>(c: &'a ConvLayer<T>, f: &mut dyn FnMut(ParamInfo<'a, T>)) {
    f(ParamInfo {
        name: format!("{}.weight", c.name),
        value: c.kernel.weights.data(),
        grad: c.grad_weights.data(),
        shape: c.kernel.weights.shape(),
    });
    f(ParamInfo {
        name: format!("{}.bias", c.name),
        value: &c.kernel.bias,
        grad: &c.grad_bias,
        shape: (1, 1, 1, c.kernel.bias.len()),
    });
}

fn visit_bn<'a, T: Scalar>(b: &'a BnLayer<T>, f: &mut dyn FnMut(ParamInfo<'a, T>)) {
    f(ParamInfo {
        name: format!("{}.gamma", b.name),
        value: &b.bn.gamma,
        grad: &b.grad_gamma,
        shape: (1, 1, 1, b.bn.gamma.len()),
    });
    f(ParamInfo {
        name: format!("{}.beta", b.name),
        value: &b.bn.beta,
        grad: &b.grad_beta,
        shape: (1, 1, 1, b.bn.beta.len()),
    });
}

fn update_conv<T: Scalar>(c: &mut ConvLayer<T>, f: &mut dyn FnMut(&str, &mut [T], &[T])) {
    f(&format!("{}.weight", c.name), c.kernel.weights.data_mut(), c.grad_weights.data());
    f(&format!("{}.bias", c.name), &mut c.kernel.bias, &c.grad_bias);
}

fn update_bn<T: Scalar>(b: &mut BnLayer<T>, f: &mut dyn FnMut(&str, &mut [T], &[T])) {
    f(&format!("{}.gamma", b.name), &mut b.bn.gamma, &b.grad_gamma);
    f(&format!("{}.beta", b.name), &mut b.bn.beta, &b.grad_beta);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_stage_config(cin: usize, cout: usize, stride: usize, dilation: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels: cin,
            layers: vec![LayerConfig::plain(LayerKind::ResidualStage {
                out_channels: cout,
                blocks: 1,
                stride,
                dilation,
            })],
            bins: cout,
            sigma: 1.0,
        }
    }

    #[test]
    fn zero_branch_identity_block_passes_nonnegative_input() {
        let config = single_stage_config(4, 4, 1, 1);
        let mut net = build_network::<f64>(&config, 7).unwrap();
        // zero every conv weight and bias: the residual branch emits beta = 0
        net.visit_params_update(&mut |name, value, _| {
            if name.contains("conv") {
                value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let x = Tensor4::from_vec((1, 4, 4, 4), (0..64).map(|v| (v % 7) as f64 * 0.5).collect()).unwrap();
        let tape = net.forward_train(&x).unwrap();
        assert_eq!(tape.logits, x);
    }

    #[test]
    fn stride_two_block_halves_and_doubles() {
        let config = single_stage_config(8, 16, 2, 1);
        let mut net = build_network::<f64>(&config, 1).unwrap();
        let x = Tensor4::<f64>::filled((1, 8, 8, 8), 0.3).unwrap();
        let tape = net.forward_train(&x).unwrap();
        assert_eq!(tape.logits.shape(), (1, 16, 4, 4));
    }

    #[test]
    fn build_is_deterministic() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let a = build_network::<f32>(&config, 42).unwrap();
        let b = build_network::<f32>(&config, 42).unwrap();
        let mut pa = Vec::new();
        a.visit_params(&mut |p| pa.push((p.name.clone(), p.value.to_vec())));
        let mut pb = Vec::new();
        b.visit_params(&mut |p| pb.push((p.name.clone(), p.value.to_vec())));
        assert_eq!(pa, pb);
        let c = build_network::<f32>(&config, 43).unwrap();
        let mut pc = Vec::new();
        c.visit_params(&mut |p| pc.push((p.name.clone(), p.value.to_vec())));
        assert_ne!(pa, pc);
    }

    #[test]
    fn dilation_ablation_preserves_param_count() {
        for skips in [true, false] {
            let on = NetworkConfig::toy(1.0 / 16.0, 16, true, skips).unwrap();
            let off = NetworkConfig::toy(1.0 / 16.0, 16, false, skips).unwrap();
            let net_on = build_network::<f32>(&on, 0).unwrap();
            let net_off = build_network::<f32>(&off, 0).unwrap();
            assert_eq!(net_on.param_count(), net_off.param_count(), "skips {skips}");
        }
    }

    #[test]
    fn param_count_matches_rf_table() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let net = build_network::<f32>(&config, 3).unwrap();
        let table = receptive_field(&config).unwrap();
        let analytic: usize = table.iter().map(|e| e.params).sum();
        assert_eq!(net.param_count(), analytic);
    }

    #[test]
    fn registry_names_are_unique() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let net = build_network::<f32>(&config, 3).unwrap();
        let mut names = Vec::new();
        net.visit_params(&mut |p| names.push(p.name.clone()));
        let set: std::collections::HashSet<_> = names.iter().cloned().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn toy_shapes_through_deconv() {
        let config = NetworkConfig::toy(1.0 / 16.0, 32, true, true).unwrap();
        let mut net = build_network::<f64>(&config, 0).unwrap();
        let x = Tensor4::<f64>::filled((1, 3, 64, 64), 0.5).unwrap();
        let tape = net.forward_train(&x).unwrap();
        assert_eq!(tape.feature_shape, (1, 32, 16, 16));
        assert_eq!(tape.logits.shape(), (1, 32, 64, 64));
    }

    #[test]
    fn inference_is_pure_and_batch_consistent() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let net = build_network::<f64>(&config, 11).unwrap();
        let one = Tensor4::from_vec((1, 3, 16, 16), (0..768).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let two = one.concat_batch(&one);
        let a = net.forward_infer(&one).unwrap();
        let b = net.forward_infer(&one).unwrap();
        assert_eq!(a, b);
        let batched = net.forward_infer(&two).unwrap();
        assert_eq!(batched.slice_batch(0).unwrap(), a);
        assert_eq!(batched.slice_batch(1).unwrap(), a);
    }

    #[test]
    fn zeroed_score_conv_gives_zero_logits() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let mut net = build_network::<f64>(&config, 11).unwrap();
        // the scoring conv is the last conv layer in the list
        let score_name = {
            let mut last = String::new();
            net.visit_params(&mut |p| {
                if p.name.starts_with("conv") && p.name.ends_with(".weight") {
                    last = p.name.clone();
                }
            });
            last.trim_end_matches(".weight").to_string()
        };
        net.visit_params_update(&mut |name, value, _| {
            if name.starts_with(&score_name) {
                value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let x = Tensor4::<f64>::zeros((1, 3, 16, 16)).unwrap();
        let logits = net.forward_infer(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_rejected() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let net = build_network::<f64>(&config, 11).unwrap();
        let x = Tensor4::<f64>::zeros((1, 3, 18, 18)).unwrap();
        assert!(matches!(net.forward_infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let config = NetworkConfig::toy(1.0 / 16.0, 8, true, true).unwrap();
        let net = build_network::<f32>(&config, 5).unwrap();
        let as64 = net.cast::<f64>().unwrap();
        let back = as64.cast::<f32>().unwrap();
        let mut a = Vec::new();
        net.visit_params(&mut |p| a.extend_from_slice(p.value));
        let mut b = Vec::new();
        back.visit_params(&mut |p| b.extend_from_slice(p.value));
        assert_eq!(a, b);
    }
}
