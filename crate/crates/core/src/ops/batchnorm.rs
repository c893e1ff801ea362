//! Batch normalization with learned per-channel scale and shift.
//!
//! Train mode normalizes by batch statistics taken over (batch, height,
//! width) per channel and folds them into the running statistics by
//! exponential moving average; inference mode normalizes by the running
//! statistics alone.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Inference,
}

/// Learned parameters plus running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

/// Forward-pass values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Updated running statistics produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl<T: Scalar> BatchNorm<T> {
    /// Identity-initialized layer: gamma 1, beta 0, running stats (0, 1).
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_f64(BN_EPSILON),
            momentum: T::from_f64(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels applied to {}-channel input",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Train-mode forward. Returns the output, the backward cache and the
    /// running statistics after this batch; the caller decides when to
    /// commit the statistics via [`BatchNorm::apply_stats`].
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>, BnStats<T>)> {
        self.check(x)?;
        let (n, c, h, w) = x.shape();
        let count = n * h * w;
        if count < 2 {
            return Err(Error::Domain(format!(
                "batch norm needs at least 2 values per channel in train mode, got {count}"
            )));
        }
        let inv_count = T::one() / T::from_f64(count as f64);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                for y in 0..h {
                    acc += x.row(b, ch, y).iter().copied().sum();
                }
            }
            mean[ch] = acc * inv_count;
            let mut sq = T::zero();
            for b in 0..n {
                for y in 0..h {
                    for &v in x.row(b, ch, y) {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
            }
            var[ch] = sq * inv_count;
        }

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.epsilon).sqrt()).collect();

        let mut x_hat = Tensor4::zeros(x.shape())?;
        let mut out = Tensor4::zeros(x.shape())?;
        for b in 0..n {
            for ch in 0..c {
                let (m, istd, g, bt) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                for y in 0..h {
                    let src = x.row(b, ch, y);
                    let xh_start = x_hat.index(b, ch, y, 0);
                    for (i, &v) in src.iter().enumerate() {
                        let xh = (v - m) * istd;
                        x_hat.data_mut()[xh_start + i] = xh;
                        out.data_mut()[xh_start + i] = g * xh + bt;
                    }
                }
            }
        }

        let keep = self.momentum;
        let blend = T::one() - keep;
        let stats = BnStats {
            mean: self
                .running_mean
                .iter()
                .zip(&mean)
                .map(|(&rm, &m)| keep * rm + blend * m)
                .collect(),
            var: self
                .running_var
                .iter()
                .zip(&var)
                .map(|(&rv, &v)| keep * rv + blend * v)
                .collect(),
        };

        Ok((out, BnCache { x_hat, inv_std }, stats))
    }

    /// Inference-mode forward: per-channel affine map by running statistics.
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let (n, c, h, w) = x.shape();
        let mut out = Tensor4::zeros(x.shape())?;
        for ch in 0..c {
            let istd = T::one() / (self.running_var[ch] + self.epsilon).sqrt();
            let scale = self.gamma[ch] * istd;
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for b in 0..n {
                for y in 0..h {
                    let start = x.index(b, ch, y, 0);
                    for i in 0..w {
                        out.data_mut()[start + i] = x.data()[start + i] * scale + shift;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Backward through a train-mode forward, including the dependence of
    /// the batch statistics on the input.
    pub fn backward(&self, cache: &BnCache<T>, upstream: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        if upstream.shape() != cache.x_hat.shape() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} does not match cached {:?}",
                upstream.shape(),
                cache.x_hat.shape()
            )));
        }
        let (n, c, h, w) = upstream.shape();
        let count = T::from_f64((n * h * w) as f64);

        let mut grad_gamma = vec![T::zero(); c];
        let mut grad_beta = vec![T::zero(); c];
        for ch in 0..c {
            let mut dg = T::zero();
            let mut db = T::zero();
            for b in 0..n {
                for y in 0..h {
                    let start = upstream.index(b, ch, y, 0);
                    for i in 0..w {
                        let g = upstream.data()[start + i];
                        db += g;
                        dg += g * cache.x_hat.data()[start + i];
                    }
                }
            }
            grad_gamma[ch] = dg;
            grad_beta[ch] = db;
        }

        let mut grad_input = Tensor4::zeros(upstream.shape())?;
        for ch in 0..c {
            let scale = self.gamma[ch] * cache.inv_std[ch];
            let mean_g = grad_beta[ch] / count;
            let mean_gx = grad_gamma[ch] / count;
            for b in 0..n {
                for y in 0..h {
                    let start = upstream.index(b, ch, y, 0);
                    for i in 0..w {
                        let g = upstream.data()[start + i];
                        let xh = cache.x_hat.data()[start + i];
                        grad_input.data_mut()[start + i] = scale * (g - mean_g - xh * mean_gx);
                    }
                }
            }
        }
        Ok((grad_input, grad_gamma, grad_beta))
    }

    pub fn apply_stats(&mut self, stats: &BnStats<T>) {
        self.running_mean.copy_from_slice(&stats.mean);
        self.running_var.copy_from_slice(&stats.var);
    }
}

/// Operation-shaped entry point: normalizes `input` and, in train mode,
/// commits the running-statistics update to `state`.
pub fn batch_norm<T: Scalar>(input: &Tensor4<T>, state: &mut BatchNorm<T>, mode: BnMode) -> Result<Tensor4<T>> {
    match mode {
        BnMode::Train => {
            let (out, _, stats) = state.forward_train(input)?;
            state.apply_stats(&stats);
            Ok(out)
        }
        BnMode::Inference => state.forward_infer(input),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_input_passes_through_up_to_epsilon() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let y = batch_norm(&x, &mut bn, BnMode::Train).unwrap();
        let factor = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.5, -2.0];
        let x = Tensor4::from_vec((1, 2, 2, 1), vec![3.0, 7.0, -1.0, 4.0]).unwrap();
        let y = batch_norm(&x, &mut bn, BnMode::Train).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 0.5);
        assert_eq!(y.at(0, 0, 1, 0), 0.5);
        assert_eq!(y.at(0, 1, 0, 0), -2.0);
        assert_eq!(y.at(0, 1, 1, 0), -2.0);
    }

    #[test]
    fn hand_computed_normalization() {
        // mean 2.5, biased variance 1.25
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor4::from_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = batch_norm(&x, &mut bn, BnMode::Train).unwrap();
        let expect = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (o, e) in y.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-3, "{o} vs {e}");
        }
    }

    #[test]
    fn degenerate_statistics_rejected() {
        let mut bn = BatchNorm::<f64>::new(3);
        let x = Tensor4::zeros((1, 3, 1, 1)).unwrap();
        assert!(matches!(batch_norm(&x, &mut bn, BnMode::Train), Err(Error::Domain(_))));
    }

    #[test]
    fn train_updates_running_stats_and_inference_uses_them() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor4::from_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        batch_norm(&x, &mut bn, BnMode::Train).unwrap();
        // momentum 0.9: running_mean = 0.9*0 + 0.1*2.5, running_var = 0.9*1 + 0.1*1.25
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var[0] - 1.025).abs() < 1e-12);

        let y = batch_norm(&x, &mut bn, BnMode::Inference).unwrap();
        let istd = 1.0 / (1.025 + BN_EPSILON).sqrt();
        assert!((y.at(0, 0, 0, 0) - (1.0 - 0.25) * istd).abs() < 1e-12);
    }
}
