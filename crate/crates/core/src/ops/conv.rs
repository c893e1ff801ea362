//! Dilated 2-D convolution, forward and backward.
//!
//! The operator follows the discrete-support convention: the input is
//! extended by zeros, and the kernel tap `t` in `[-r, r]^2` reads the input
//! at `p - l*t` for output position `p`, so the dilation factor `l` spaces
//! the taps without adding parameters. `l = 1` is the ordinary discrete
//! convolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Geometry of a convolution layer.
///
/// The kernel side is `2*radius + 1`; the parameter count is independent of
/// the dilation. A "same-resolution" configuration has `padding = dilation *
/// radius` and `stride = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub radius: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        radius: usize,
        dilation: usize,
        stride: usize,
        padding: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if dilation < 1 || stride < 1 || in_channels < 1 || out_channels < 1 {
            return Err(Error::Config(format!(
                "conv spec requires dilation, stride and channel counts >= 1, \
                 got dilation {dilation}, stride {stride}, channels {in_channels}->{out_channels}"
            )));
        }
        Ok(ConvSpec { radius, dilation, stride, padding, in_channels, out_channels })
    }

    /// Same-resolution stride-1 configuration: padding = dilation * radius.
    pub fn same_resolution(radius: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(radius, dilation, 1, dilation * radius, in_channels, out_channels)
    }

    #[inline]
    pub fn kernel_side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Span of the dilated kernel in input pixels.
    #[inline]
    pub fn effective_side(&self) -> usize {
        self.dilation * (self.kernel_side() - 1) + 1
    }

    /// Learnable value count: weights plus one bias per output channel.
    pub fn param_count(&self) -> usize {
        let side = self.kernel_side();
        self.out_channels * (self.in_channels * side * side + 1)
    }

    /// Output spatial size for the given input size, per axis.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |size: usize| -> Result<usize> {
            let padded = size + 2 * self.padding;
            let eff = self.effective_side();
            if padded < eff {
                return Err(Error::Config(format!(
                    "effective kernel {eff} exceeds padded input {padded}"
                )));
            }
            Ok((padded - eff) / self.stride + 1)
        };
        Ok((out(h)?, out(w)?))
    }
}

/// Weights and bias of a convolution layer.
///
/// Weights are laid out (out_channels, in_channels, k, k). For ordinary
/// convolutions k is odd (`2r + 1`); transposed-convolution kernels reuse
/// this container with their own side length.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn zeros(spec: &ConvSpec) -> Result<Self> {
        let side = spec.kernel_side();
        Ok(ConvKernel {
            weights: Tensor4::zeros((spec.out_channels, spec.in_channels, side, side))?,
            bias: vec![T::zero(); spec.out_channels],
        })
    }

    /// Fan-in-scaled normal initialization, zero bias.
    pub fn init_fan_in(spec: &ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let side = spec.kernel_side();
        let fan_in = (spec.in_channels * side * side) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let volume = spec.out_channels * spec.in_channels * side * side;
        let data: Vec<T> = (0..volume).map(|_| T::from_f64(normal.sample(rng))).collect();
        Ok(ConvKernel {
            weights: Tensor4::from_vec((spec.out_channels, spec.in_channels, side, side), data)?,
            bias: vec![T::zero(); spec.out_channels],
        })
    }

    fn check(&self, spec: &ConvSpec) -> Result<()> {
        let side = spec.kernel_side();
        let expect = (spec.out_channels, spec.in_channels, side, side);
        if self.weights.shape() != expect {
            return Err(Error::Shape(format!(
                "kernel shape {:?} does not match spec {:?}",
                self.weights.shape(),
                expect
            )));
        }
        if self.bias.len() != spec.out_channels {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output channels",
                self.bias.len(),
                spec.out_channels
            )));
        }
        Ok(())
    }
}

/// Gradients returned by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

#[inline]
fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// Valid output range [lo, hi) such that `o*stride + off` lands in [0, size).
#[inline]
fn valid_range(off: i64, stride: i64, size: i64, out_size: i64) -> (usize, usize) {
    let lo = ceil_div(-off, stride).max(0);
    let hi = ceil_div(size - off, stride).min(out_size);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Dilated convolution over a zero-padded input, summed over input channels
/// and subsampled by the stride.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>, spec: &ConvSpec) -> Result<Tensor4<T>> {
    kernel.check(spec)?;
    let (n, c, h, w) = input.shape();
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let (oh, ow) = spec.out_size(h, w)?;
    let mut out = Tensor4::zeros((n, spec.out_channels, oh, ow))?;

    let side = spec.kernel_side();
    let l = spec.dilation as i64;
    let r = spec.radius as i64;
    let s = spec.stride as i64;
    let pad = spec.padding as i64;

    for b in 0..n {
        for oc in 0..spec.out_channels {
            let bias = kernel.bias[oc];
            for oy in 0..oh {
                for v in out.row_mut(b, oc, oy) {
                    *v = bias;
                }
            }
            for ci in 0..c {
                for uy in 0..side {
                    // tap t = u - r reads input at p - l*t
                    let iy_off = l * (2 * r - uy as i64) - pad;
                    for ux in 0..side {
                        let ix_off = l * (2 * r - ux as i64) - pad;
                        let wv = kernel.weights.at(oc, ci, uy, ux);
                        let (lo, hi) = valid_range(ix_off, s, w as i64, ow as i64);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as i64 * s + iy_off;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let in_start = input.index(b, ci, iy as usize, 0);
                            let in_row = &input.data()[in_start..in_start + w];
                            let out_row = out.row_mut(b, oc, oy);
                            if s == 1 {
                                let base = ix_off as isize;
                                for ox in lo..hi {
                                    out_row[ox] += wv * in_row[(ox as isize + base) as usize];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox as i64 * s + ix_off) as usize;
                                    out_row[ox] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d`]: partial derivatives of
/// `sum(upstream .* conv2d(input))` with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
    upstream: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    kernel.check(spec)?;
    let (n, c, h, w) = input.shape();
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let (oh, ow) = spec.out_size(h, w)?;
    if upstream.shape() != (n, spec.out_channels, oh, ow) {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match forward output {:?}",
            upstream.shape(),
            (n, spec.out_channels, oh, ow)
        )));
    }

    let mut grad_input = Tensor4::zeros(input.shape())?;
    let mut grad_weights = Tensor4::zeros(kernel.weights.shape())?;
    let mut grad_bias = vec![T::zero(); spec.out_channels];

    let side = spec.kernel_side();
    let l = spec.dilation as i64;
    let r = spec.radius as i64;
    let s = spec.stride as i64;
    let pad = spec.padding as i64;

    for b in 0..n {
        for oc in 0..spec.out_channels {
            let mut gb = T::zero();
            for oy in 0..oh {
                gb += upstream.row(b, oc, oy).iter().copied().sum();
            }
            grad_bias[oc] += gb;

            for ci in 0..c {
                for uy in 0..side {
                    let iy_off = l * (2 * r - uy as i64) - pad;
                    for ux in 0..side {
                        let ix_off = l * (2 * r - ux as i64) - pad;
                        let wv = kernel.weights.at(oc, ci, uy, ux);
                        let widx = kernel.weights.index(oc, ci, uy, ux);
                        let (lo, hi) = valid_range(ix_off, s, w as i64, ow as i64);
                        if lo >= hi {
                            continue;
                        }
                        let mut gw = T::zero();
                        for oy in 0..oh {
                            let iy = oy as i64 * s + iy_off;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let up_start = upstream.index(b, oc, oy, 0);
                            let in_start = input.index(b, ci, iy as usize, 0);
                            let gi_start = grad_input.index(b, ci, iy as usize, 0);
                            if s == 1 {
                                let base = ix_off as isize;
                                for ox in lo..hi {
                                    let g = upstream.data()[up_start + ox];
                                    let ix = (ox as isize + base) as usize;
                                    gw += g * input.data()[in_start + ix];
                                    grad_input.data_mut()[gi_start + ix] += g * wv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let g = upstream.data()[up_start + ox];
                                    let ix = (ox as i64 * s + ix_off) as usize;
                                    gw += g * input.data()[in_start + ix];
                                    grad_input.data_mut()[gi_start + ix] += g * wv;
                                }
                            }
                        }
                        grad_weights.data_mut()[widx] += gw;
                    }
                }
            }
        }
    }

    Ok(ConvGrads { input: grad_input, weights: grad_weights, bias: grad_bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel(spec: &ConvSpec) -> ConvKernel<f64> {
        // all zeros except the center tap of the single in/out channel pair
        let mut k = ConvKernel::zeros(spec).unwrap();
        let r = spec.radius;
        for c in 0..spec.out_channels.min(spec.in_channels) {
            let i = k.weights.index(c, c, r, r);
            k.weights.data_mut()[i] = 1.0;
        }
        k
    }

    #[test]
    fn identity_kernel_l1_preserves_input() {
        let spec = ConvSpec::same_resolution(1, 1, 1, 1).unwrap();
        let x = Tensor4::from_vec((1, 1, 3, 3), (0..9).map(|v| v as f64).collect()).unwrap();
        let y = conv2d(&x, &identity_kernel(&spec), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identity_kernel_under_dilation_preserves_input() {
        // dilation does not move the center tap
        let spec = ConvSpec::same_resolution(1, 2, 1, 1).unwrap();
        let x = Tensor4::from_vec((1, 1, 5, 4), (0..20).map(|v| (v as f64).sin()).collect()).unwrap();
        let y = conv2d(&x, &identity_kernel(&spec), &spec).unwrap();
        assert_eq!(y, x);
    }

    /// Independent oracle: literal evaluation of the dilated convolution sum
    /// over all (s, t) pairs of the padded grid with s + l*t = p.
    fn brute_force_dilated(input: &Tensor4<f64>, kernel: &ConvKernel<f64>, spec: &ConvSpec) -> Tensor4<f64> {
        let (n, c, h, w) = input.shape();
        let (oh, ow) = spec.out_size(h, w).unwrap();
        let l = spec.dilation as i64;
        let r = spec.radius as i64;
        let pad = spec.padding as i64;
        let stride = spec.stride as i64;
        let mut out = Tensor4::zeros((n, spec.out_channels, oh, ow)).unwrap();
        for b in 0..n {
            for oc in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        // evaluation point in padded coordinates
                        let py = oy as i64 * stride + l * r;
                        let px = ox as i64 * stride + l * r;
                        let mut acc = kernel.bias[oc];
                        for ci in 0..c {
                            for sy in 0..(h as i64 + 2 * pad) {
                                for sx in 0..(w as i64 + 2 * pad) {
                                    for ty in -r..=r {
                                        for tx in -r..=r {
                                            if sy + l * ty == py && sx + l * tx == px {
                                                let fy = sy - pad;
                                                let fx = sx - pad;
                                                let f = if fy >= 0 && fy < h as i64 && fx >= 0 && fx < w as i64 {
                                                    input.at(b, ci, fy as usize, fx as usize)
                                                } else {
                                                    0.0
                                                };
                                                let kv = kernel
                                                    .weights
                                                    .at(oc, ci, (ty + r) as usize, (tx + r) as usize);
                                                acc += f * kv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        out.set(b, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ramp_shift_matches_brute_force_and_shift_rule() {
        // ramp F(y, x) = 7y + x; single tap at t = (1, 0) shifts by (2, 0)
        let x = Tensor4::from_vec(
            (1, 1, 7, 7),
            (0..49).map(|i| (7 * (i / 7) + i % 7) as f64).collect(),
        )
        .unwrap();
        let spec = ConvSpec::same_resolution(1, 2, 1, 1).unwrap();
        let mut k = ConvKernel::zeros(&spec).unwrap();
        let i = k.weights.index(0, 0, 2, 1); // t = (1, 0) -> index (1 + r, 0 + r)
        k.weights.data_mut()[i] = 1.0;

        let got = conv2d(&x, &k, &spec).unwrap();
        let oracle = brute_force_dilated(&x, &k, &spec);
        assert_eq!(got, oracle);
        for y in 0..7 {
            for xx in 0..7 {
                let expect = if y >= 2 { x.at(0, 0, y - 2, xx) } else { 0.0 };
                assert_eq!(got.at(0, 0, y, xx), expect, "at ({y}, {xx})");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = ConvSpec::same_resolution(1, 2, 2, 3).unwrap();
        let x = Tensor4::from_vec((1, 2, 4, 4), (0..32).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = ConvKernel::init_fan_in(&spec, &mut rng).unwrap();
        let up = Tensor4::zeros((1, 3, 4, 4)).unwrap();
        let g = conv2d_backward(&x, &k, &spec, &up).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    use rand::SeedableRng;

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let spec = ConvSpec::same_resolution(1, 1, 1, 2).unwrap();
        let x = Tensor4::from_vec((2, 1, 3, 3), (0..18).map(|v| v as f64).collect()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = ConvKernel::init_fan_in(&spec, &mut rng).unwrap();
        let up = Tensor4::from_vec((2, 2, 3, 3), (0..36).map(|v| (v as f64) * 0.25).collect()).unwrap();
        let g = conv2d_backward(&x, &k, &spec, &up).unwrap();
        for oc in 0..2 {
            let mut expect = 0.0;
            for b in 0..2 {
                for y in 0..3 {
                    for xx in 0..3 {
                        expect += up.at(b, oc, y, xx);
                    }
                }
            }
            assert!((g.bias[oc] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_is_independent_of_dilation() {
        let counts: Vec<usize> = [1usize, 2, 4]
            .iter()
            .map(|&l| ConvSpec::same_resolution(1, l, 8, 16).unwrap().param_count())
            .collect();
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
        assert_eq!(counts[0], 16 * (8 * 9 + 1));
    }

    #[test]
    fn same_resolution_preserves_spatial_shape() {
        for &l in &[1usize, 2, 4] {
            let spec = ConvSpec::same_resolution(1, l, 1, 1).unwrap();
            assert_eq!(spec.out_size(13, 9).unwrap(), (13, 9));
        }
    }

    #[test]
    fn undersized_input_is_rejected() {
        let spec = ConvSpec::new(2, 4, 1, 0, 1, 1).unwrap();
        // effective side 17 > 5
        assert!(matches!(spec.out_size(5, 5), Err(Error::Config(_))));
    }

    #[test]
    fn linearity_with_zero_bias() {
        let spec = ConvSpec::new(1, 2, 2, 1, 2, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut k = ConvKernel::init_fan_in(&spec, &mut rng).unwrap();
        k.bias.iter_mut().for_each(|b| *b = 0.0);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut draw = |shape| {
            let t: Tensor4<f64> = Tensor4::zeros(shape).unwrap();
            t.map(|_| normal.sample(&mut rng))
        };
        let x = draw((1, 2, 6, 6));
        let y = draw((1, 2, 6, 6));
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &k, &spec).unwrap();
        let rhs = conv2d(&x, &k, &spec).unwrap().scale(a).add(&conv2d(&y, &k, &spec).unwrap().scale(b)).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            let denom = l.abs().max(r.abs()).max(1.0);
            assert!((l - r).abs() / denom < 1e-10);
        }
    }
}
