//! Training: SGD with momentum and weight decay, the step learning-rate
//! schedule, gradient accumulation over a span of mini-batches, synthetic
//! RGB-D scene generation and offline augmentation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::depth::{depth_to_label, multinomial_loss, softmax, BinSpec, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::DepthMap;
use crate::net::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 0.0004;

/// Momentum update on one flat parameter slice:
/// `v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v`.
pub fn sgd_update<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    for ((p, &g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p = *p - lr * *v;
    }
}

/// SGD state: one velocity buffer per named parameter.
pub struct Optimizer<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocities: HashMap<String, Vec<T>>,
    pub iterations: usize,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new() -> Self {
        Optimizer {
            momentum: T::from_f64(MOMENTUM),
            weight_decay: T::from_f64(WEIGHT_DECAY),
            velocities: HashMap::new(),
            iterations: 0,
        }
    }

    pub fn with_hyperparams(momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            velocities: HashMap::new(),
            iterations: 0,
        }
    }

    /// One update over every network parameter. Rejects non-finite gradients
    /// before touching any parameter, naming the offending one.
    pub fn step(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let mut bad: Option<String> = None;
        net.visit_params(&mut |p| {
            if bad.is_none() && !p.grad.iter().all(|g| g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
        }
        let (lr_t, momentum, weight_decay) = (T::from_f64(lr), self.momentum, self.weight_decay);
        let velocities = &mut self.velocities;
        net.visit_params_update(&mut |name, value, grad| {
            let v = velocities.entry(name.to_string()).or_insert_with(|| vec![T::zero(); value.len()]);
            sgd_update(value, grad, v, lr_t, momentum, weight_decay);
        });
        self.iterations += 1;
        Ok(())
    }
}

impl<T: Scalar> Default for Optimizer<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Step schedule: constant base rate, then multiplied by the decay factor
/// once per decay period.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub constant_iters: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base <= 0.0 {
            return Err(Error::Config(format!("base learning rate must be positive, got {}", self.base)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay period must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn lr_at(iteration: usize, schedule: &LrSchedule) -> f64 {
    if iteration < schedule.constant_iters {
        schedule.base
    } else {
        let periods = (iteration - schedule.constant_iters) / schedule.decay_period + 1;
        schedule.base * schedule.decay_factor.powi(periods as i32)
    }
}

/// Training run configuration (dataset and network are passed separately).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Effective optimizer steps.
    pub iterations: usize,
    pub batch_size: usize,
    /// Mini-batches averaged into one effective step.
    pub accumulation: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config(
                "iterations, batch size and accumulation span must be >= 1".into(),
            ));
        }
        self.schedule.validate()
    }
}

/// One training pair, image already in model precision, labels binned.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub image: Tensor4<T>,
    pub labels: LabelMap,
}

impl<T: Scalar> TrainSample<T> {
    pub fn from_pair(image: &Tensor4<f64>, depth: &DepthMap, bins: &BinSpec) -> Result<Self> {
        let (n, _, h, w) = image.shape();
        if n != 1 {
            return Err(Error::Shape("training pairs hold single images".into()));
        }
        if depth.shape() != (1, h, w) {
            return Err(Error::Shape(format!(
                "depth shape {:?} does not match image {}x{}",
                depth.shape(),
                h,
                w
            )));
        }
        Ok(TrainSample { image: image.cast(), labels: depth_to_label(depth, bins) })
    }
}

fn concat_labels(parts: &[&LabelMap]) -> Result<LabelMap> {
    let (_, h, w) = parts[0].shape();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for p in parts {
        if p.shape().1 != h || p.shape().2 != w {
            return Err(Error::Shape("label maps in a batch must share spatial dims".into()));
        }
        labels.extend_from_slice(p.labels());
        mask.extend_from_slice(p.mask());
    }
    let n: usize = parts.iter().map(|p| p.shape().0).sum();
    LabelMap::new((n, h, w), labels, mask)
}

/// One effective-step record of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    /// Append-only text log, one record per effective step.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{} {} {:.9}\n", r.iteration, r.lr, r.loss));
        }
        s
    }
}

/// Runs the training loop: per effective step, `accumulation` mini-batch
/// gradients are averaged into one SGD update. Fully reproducible from the
/// config seed. A non-finite loss or gradient aborts with the parameters
/// still at their last good values.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &[TrainSample<T>],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new();
    let mut history = TrainHistory::default();

    for step in 0..config.iterations {
        let lr = lr_at(step, &config.schedule);
        net.zero_grads();
        let mut loss_sum = 0.0f64;
        for _ in 0..config.accumulation {
            let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
            let mut image = data[picks[0]].image.clone();
            let mut labels: Vec<&LabelMap> = vec![&data[picks[0]].labels];
            for &i in &picks[1..] {
                image = image.concat_batch(&data[i].image);
                labels.push(&data[i].labels);
            }
            let labels = concat_labels(&labels)?;

            let tape = net.forward_train(&image)?;
            let scores = softmax(&tape.logits)?;
            let (loss, grad_logits) = multinomial_loss(&scores, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            net.backward(&tape, &grad_logits)?;
            loss_sum += loss;
        }
        net.scale_grads(T::from_f64(1.0 / config.accumulation as f64));
        optimizer.step(net, lr)?;
        history.records.push(HistoryRecord {
            iteration: step,
            lr,
            loss: loss_sum / config.accumulation as f64,
        });
    }
    Ok(history)
}

/// Synthetic RGB-D scene: axis-aligned rectangles over a background plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub objects: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Standard deviation of the additive image noise.
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("scene size must be >= 4, got {}", self.size)));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(Error::Config(format!(
                "scene depth range [{}, {}] invalid",
                self.depth_min, self.depth_max
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        Ok(())
    }
}

/// Renders the scene: albedo shaded by inverse depth plus noise on the image
/// channels; the depth map is exact and every depth lies inside the spec
/// range. Deterministic from the seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Tensor4<f64>, DepthMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let range = spec.depth_max - spec.depth_min;

    let shade = |albedo: f64, d: f64| albedo * (0.2 + 0.8 * spec.depth_min / d);

    let bg_depth = spec.depth_min + range * rng.gen_range(0.55..0.95);
    let bg_albedo: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];

    let mut depth = vec![bg_depth; s * s];
    let mut image = Tensor4::zeros((1, 3, s, s))?;
    for c in 0..3 {
        let v = shade(bg_albedo[c], bg_depth);
        for y in 0..s {
            for x in 0..s {
                image.set(0, c, y, x, v);
            }
        }
    }

    struct Rect {
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
        depth: f64,
        albedo: [f64; 3],
    }
    let mut rects = Vec::with_capacity(spec.objects);
    for _ in 0..spec.objects {
        let h = ((s as f64) * rng.gen_range(0.2..0.5)) as usize;
        let w = ((s as f64) * rng.gen_range(0.2..0.5)) as usize;
        let (h, w) = (h.max(2), w.max(2));
        let y0 = rng.gen_range(0..=(s - h));
        let x0 = rng.gen_range(0..=(s - w));
        rects.push(Rect {
            y0,
            x0,
            h,
            w,
            depth: spec.depth_min + range * rng.gen_range(0.05..0.9),
            albedo: [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)],
        });
    }
    // paint far to near so closer rectangles occlude
    rects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());
    for r in &rects {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                depth[y * s + x] = r.depth;
                for c in 0..3 {
                    image.set(0, c, y, x, shade(r.albedo[c], r.depth));
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise std");
        for v in image.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok((image, DepthMap::from_values((1, s, s), depth)?))
}

/// Mirrors image and depth jointly along the x axis.
pub fn flip_horizontal(image: &Tensor4<f64>, depth: &DepthMap) -> Result<(Tensor4<f64>, DepthMap)> {
    let (n, c, h, w) = image.shape();
    let mut img = Tensor4::zeros((n, c, h, w))?;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(b, ch, y, x, image.at(b, ch, y, w - 1 - x));
                }
            }
        }
    }
    let (dn, dh, dw) = depth.shape();
    let mut d = vec![0.0; dn * dh * dw];
    for b in 0..dn {
        for y in 0..dh {
            for x in 0..dw {
                let (v, ok) = depth.at(b, y, dw - 1 - x);
                d[(b * dh + y) * dw + x] = if ok { v } else { 0.0 };
            }
        }
    }
    Ok((img, DepthMap::from_values((dn, dh, dw), d)?))
}

/// Scales image channels; depth is never touched by color operations.
pub fn color_scale(image: &Tensor4<f64>, factor: f64) -> Result<Tensor4<f64>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Domain(format!("color scale must be positive, got {factor}")));
    }
    Ok(image.scale(factor))
}

/// Extracts aligned windows from image and depth.
pub fn crop(
    image: &Tensor4<f64>,
    depth: &DepthMap,
    y0: usize,
    x0: usize,
    height: usize,
    width: usize,
) -> Result<(Tensor4<f64>, DepthMap)> {
    let (n, c, h, w) = image.shape();
    if height == 0 || width == 0 || y0 + height > h || x0 + width > w {
        return Err(Error::Domain(format!(
            "crop [{y0}+{height}, {x0}+{width}] out of bounds for {h}x{w}"
        )));
    }
    let mut img = Tensor4::zeros((n, c, height, width))?;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..height {
                for x in 0..width {
                    img.set(b, ch, y, x, image.at(b, ch, y0 + y, x0 + x));
                }
            }
        }
    }
    let (dn, _, _) = depth.shape();
    let mut d = vec![0.0; dn * height * width];
    for b in 0..dn {
        for y in 0..height {
            for x in 0..width {
                let (v, ok) = depth.at(b, y0 + y, x0 + x);
                d[(b * height + y) * width + x] = if ok { v } else { 0.0 };
            }
        }
    }
    Ok((img, DepthMap::from_values((dn, height, width), d)?))
}
