//! Transposed convolution for integer-factor upsampling.
//!
//! With stride equal to the factor `f`, kernel side `2f - f mod 2` and
//! symmetric cropping of `(side - f) / 2` per border, the output is exactly
//! `f` times the input size. Bilinear-initialized weights make each kernel
//! phase sum to one, so constant inputs are preserved exactly away from the
//! borders (border positions see a truncated tap set).

use crate::error::{Error, Result};
use crate::ops::conv::ConvKernel;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub fn deconv_kernel_side(factor: usize) -> usize {
    2 * factor - factor % 2
}

/// Symmetric crop that makes the output exactly `factor` times the input.
pub fn deconv_padding(factor: usize) -> usize {
    (deconv_kernel_side(factor) - factor) / 2
}

/// Interior margin (in output pixels) outside which every output position
/// sees the full tap set of each kernel phase.
pub fn deconv_border(factor: usize) -> usize {
    deconv_kernel_side(factor) - factor - deconv_padding(factor)
}

fn check_deconv<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>, factor: usize) -> Result<(usize, usize)> {
    if factor < 2 {
        return Err(Error::Config(format!("upsampling factor must be >= 2, got {factor}")));
    }
    let side = deconv_kernel_side(factor);
    let (oc, ic, kh, kw) = kernel.weights.shape();
    if kh != side || kw != side {
        return Err(Error::Shape(format!(
            "deconv kernel side {kh}x{kw} does not match factor {factor} (expect {side})"
        )));
    }
    if input.channels() != ic {
        return Err(Error::Shape(format!(
            "input has {} channels, deconv kernel expects {ic}",
            input.channels()
        )));
    }
    if kernel.bias.len() != oc {
        return Err(Error::Shape(format!(
            "deconv bias length {} does not match {} output channels",
            kernel.bias.len(),
            oc
        )));
    }
    Ok((oc, ic))
}

/// 1-D bilinear interpolation taps for the given factor; each phase
/// (residue class mod `factor`) sums to exactly one.
pub fn bilinear_taps(factor: usize) -> Vec<f64> {
    let side = deconv_kernel_side(factor);
    let center = (side - 1) as f64 / 2.0;
    (0..side).map(|i| 1.0 - (i as f64 - center).abs() / factor as f64).collect()
}

/// Transposed-convolution kernel initialized to per-channel bilinear
/// interpolation: channel-diagonal, zero bias.
pub fn bilinear_kernel<T: Scalar>(factor: usize, channels: usize) -> Result<ConvKernel<T>> {
    let side = deconv_kernel_side(factor);
    let taps = bilinear_taps(factor);
    let mut weights = Tensor4::zeros((channels, channels, side, side))?;
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                weights.set(c, c, y, x, T::from_f64(taps[y] * taps[x]));
            }
        }
    }
    Ok(ConvKernel { weights, bias: vec![T::zero(); channels] })
}

/// Upsamples by an integer factor via transposed convolution.
pub fn deconv_upsample<T: Scalar>(input: &Tensor4<T>, kernel: &ConvKernel<T>, factor: usize) -> Result<Tensor4<T>> {
    let (oc_n, ic_n) = check_deconv(input, kernel, factor)?;
    let (n, _, h, w) = input.shape();
    let (oh, ow) = (h * factor, w * factor);
    let side = deconv_kernel_side(factor);
    let pad = deconv_padding(factor) as i64;
    let f = factor as i64;

    let mut out = Tensor4::zeros((n, oc_n, oh, ow))?;
    for b in 0..n {
        for oc in 0..oc_n {
            let bias = kernel.bias[oc];
            for qy in 0..oh {
                for v in out.row_mut(b, oc, qy) {
                    *v = bias;
                }
            }
            for ci in 0..ic_n {
                for jy in 0..side {
                    let y_off = jy as i64 - pad;
                    let iy_lo = ((-y_off + f - 1).div_euclid(f)).max(0);
                    let iy_hi = ((oh as i64 - y_off + f - 1).div_euclid(f)).min(h as i64);
                    for jx in 0..side {
                        let x_off = jx as i64 - pad;
                        let wv = kernel.weights.at(oc, ci, jy, jx);
                        let ix_lo = ((-x_off + f - 1).div_euclid(f)).max(0) as usize;
                        let ix_hi = ((ow as i64 - x_off + f - 1).div_euclid(f)).min(w as i64) as usize;
                        if ix_lo >= ix_hi {
                            continue;
                        }
                        for iy in iy_lo..iy_hi {
                            let qy = (iy * f + y_off) as usize;
                            let in_start = input.index(b, ci, iy as usize, 0);
                            let out_start = out.index(b, oc, qy, 0);
                            for ix in ix_lo..ix_hi {
                                let qx = (ix as i64 * f + x_off) as usize;
                                out.data_mut()[out_start + qx] += wv * input.data()[in_start + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(upstream .* deconv_upsample(input))`.
pub fn deconv_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &ConvKernel<T>,
    factor: usize,
    upstream: &Tensor4<T>,
) -> Result<crate::ops::conv::ConvGrads<T>> {
    let (oc_n, ic_n) = check_deconv(input, kernel, factor)?;
    let (n, _, h, w) = input.shape();
    let (oh, ow) = (h * factor, w * factor);
    if upstream.shape() != (n, oc_n, oh, ow) {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match deconv output {:?}",
            upstream.shape(),
            (n, oc_n, oh, ow)
        )));
    }
    let side = deconv_kernel_side(factor);
    let pad = deconv_padding(factor) as i64;
    let f = factor as i64;

    let mut grad_input = Tensor4::zeros(input.shape())?;
    let mut grad_weights = Tensor4::zeros(kernel.weights.shape())?;
    let mut grad_bias = vec![T::zero(); oc_n];

    for b in 0..n {
        for oc in 0..oc_n {
            let mut gb = T::zero();
            for qy in 0..oh {
                gb += upstream.row(b, oc, qy).iter().copied().sum();
            }
            grad_bias[oc] += gb;

            for ci in 0..ic_n {
                for jy in 0..side {
                    let y_off = jy as i64 - pad;
                    let iy_lo = ((-y_off + f - 1).div_euclid(f)).max(0);
                    let iy_hi = ((oh as i64 - y_off + f - 1).div_euclid(f)).min(h as i64);
                    for jx in 0..side {
                        let x_off = jx as i64 - pad;
                        let wv = kernel.weights.at(oc, ci, jy, jx);
                        let widx = kernel.weights.index(oc, ci, jy, jx);
                        let ix_lo = ((-x_off + f - 1).div_euclid(f)).max(0) as usize;
                        let ix_hi = ((ow as i64 - x_off + f - 1).div_euclid(f)).min(w as i64) as usize;
                        if ix_lo >= ix_hi {
                            continue;
                        }
                        let mut gw = T::zero();
                        for iy in iy_lo..iy_hi {
                            let qy = (iy * f + y_off) as usize;
                            let in_start = input.index(b, ci, iy as usize, 0);
                            let gi_start = grad_input.index(b, ci, iy as usize, 0);
                            let up_start = upstream.index(b, oc, qy, 0);
                            for ix in ix_lo..ix_hi {
                                let qx = (ix as i64 * f + x_off) as usize;
                                let g = upstream.data()[up_start + qx];
                                gw += g * input.data()[in_start + ix];
                                grad_input.data_mut()[gi_start + ix] += g * wv;
                            }
                        }
                        grad_weights.data_mut()[widx] += gw;
                    }
                }
            }
        }
    }
    Ok(crate::ops::conv::ConvGrads { input: grad_input, weights: grad_weights, bias: grad_bias })
}
