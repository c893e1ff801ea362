//! Central finite-difference verification of every analytic backward pass.
//!
//! Each check builds a small randomized layer in standard (64-bit)
//! precision, takes the scalar objective `sum(U .* forward(...))` for a
//! fixed random weighting `U`, and compares the analytic gradients against
//! central differences with step 1e-5. The numeric side never calls the
//! backward code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth::{multinomial_loss, softmax, LabelMap};
use crate::error::{Error, Result};
use crate::net::{build_network, LayerConfig, LayerKind, NetworkConfig};
use crate::ops::batchnorm::BatchNorm;
use crate::ops::conv::{conv2d, conv2d_backward, ConvKernel, ConvSpec};
use crate::ops::deconv::{bilinear_kernel, deconv_backward, deconv_upsample};
use crate::ops::pool::{max_pool, max_pool_backward};
use crate::tensor::Tensor4;

/// Finite-difference step, standard precision.
pub const FD_STEP: f64 = 1e-5;
/// Per-layer relative-error threshold.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// End-to-end (sampled parameters through a full network) threshold.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Softmax + loss head threshold.
pub const HEAD_TOLERANCE: f64 = 1e-6;

/// Result of one layer check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub worst: f64,
    pub coord: usize,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

/// Worst relative disagreement and its coordinate. Near-zero pairs compare
/// absolutely so that roundoff in a vanishing gradient does not dominate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    let mut coord = 0usize;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        let err = if scale < 1e-6 { (a - n).abs() } else { (a - n).abs() / scale };
        if err > worst {
            worst = err;
            coord = i;
        }
    }
    (worst, coord)
}

/// Central finite differences of `loss` with respect to `x`.
pub fn fd_grad(x: &[f64], mut loss: impl FnMut(&[f64]) -> f64, step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe);
        probe[i] = orig - step;
        let down = loss(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

fn random_tensor(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let mut t = Tensor4::zeros(shape).unwrap();
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

fn weighted_sum(out: &Tensor4<f64>, weights: &Tensor4<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn check_conv(dilation: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let spec = ConvSpec::new(1, dilation, 1, dilation, 2, 3)?;
    let input = random_tensor((1, 2, 5, 5), rng);
    let mut kernel = ConvKernel::init_fan_in(&spec, rng)?;
    for b in &mut kernel.bias {
        *b = rng.gen_range(-0.5..0.5);
    }
    let (oh, ow) = spec.out_size(5, 5)?;
    let u = random_tensor((1, 3, oh, ow), rng);

    let grads = conv2d_backward(&input, &kernel, &spec, &u)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(grads.input.data());
    analytic.extend_from_slice(grads.weights.data());
    analytic.extend_from_slice(&grads.bias);

    let mut numeric = Vec::new();
    numeric.extend(fd_grad(input.data(), |x| {
        let xt = Tensor4::from_vec(input.shape(), x.to_vec()).unwrap();
        weighted_sum(&conv2d(&xt, &kernel, &spec).unwrap(), &u)
    }, FD_STEP));
    numeric.extend(fd_grad(kernel.weights.data(), |wv| {
        let k = ConvKernel {
            weights: Tensor4::from_vec(kernel.weights.shape(), wv.to_vec()).unwrap(),
            bias: kernel.bias.clone(),
        };
        weighted_sum(&conv2d(&input, &k, &spec).unwrap(), &u)
    }, FD_STEP));
    numeric.extend(fd_grad(&kernel.bias, |bv| {
        let k = ConvKernel { weights: kernel.weights.clone(), bias: bv.to_vec() };
        weighted_sum(&conv2d(&input, &k, &spec).unwrap(), &u)
    }, FD_STEP));

    let (worst, coord) = max_rel_err(&analytic, &numeric);
    Ok(CheckReport { name: format!("conv_l{dilation}"), worst, coord, threshold: LAYER_TOLERANCE })
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut bn = BatchNorm::<f64>::new(3);
    for g in &mut bn.gamma {
        *g = rng.gen_range(0.5..1.5);
    }
    for b in &mut bn.beta {
        *b = rng.gen_range(-0.5..0.5);
    }
    let input = random_tensor((2, 3, 4, 4), rng);
    let u = random_tensor((2, 3, 4, 4), rng);

    let (_, cache, _) = bn.forward_train(&input)?;
    let (g_input, g_gamma, g_beta) = bn.backward(&cache, &u)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(g_input.data());
    analytic.extend_from_slice(&g_gamma);
    analytic.extend_from_slice(&g_beta);

    let forward = |x: &Tensor4<f64>, bn: &BatchNorm<f64>| -> f64 {
        let (out, _, _) = bn.forward_train(x).unwrap();
        weighted_sum(&out, &u)
    };
    let mut numeric = Vec::new();
    numeric.extend(fd_grad(input.data(), |x| {
        forward(&Tensor4::from_vec(input.shape(), x.to_vec()).unwrap(), &bn)
    }, FD_STEP));
    numeric.extend(fd_grad(&bn.gamma.clone(), |gv| {
        let mut b = bn.clone();
        b.gamma = gv.to_vec();
        forward(&input, &b)
    }, FD_STEP));
    numeric.extend(fd_grad(&bn.beta.clone(), |bv| {
        let mut b = bn.clone();
        b.beta = bv.to_vec();
        forward(&input, &b)
    }, FD_STEP));

    let (worst, coord) = max_rel_err(&analytic, &numeric);
    Ok(CheckReport { name: "batchnorm".into(), worst, coord, threshold: LAYER_TOLERANCE })
}

fn check_pool(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let input = random_tensor((1, 2, 6, 6), rng);
    let u = random_tensor((1, 2, 3, 3), rng);
    let pooled = max_pool(&input, 2, 2)?;
    let analytic = max_pool_backward(input.shape(), &pooled.argmax, &u)?;
    let numeric = fd_grad(input.data(), |x| {
        let xt = Tensor4::from_vec(input.shape(), x.to_vec()).unwrap();
        weighted_sum(&max_pool(&xt, 2, 2).unwrap().output, &u)
    }, FD_STEP);
    let (worst, coord) = max_rel_err(analytic.data(), &numeric);
    Ok(CheckReport { name: "maxpool".into(), worst, coord, threshold: LAYER_TOLERANCE })
}

fn check_deconv(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let factor = 2;
    let input = random_tensor((1, 2, 3, 3), rng);
    let mut kernel = bilinear_kernel::<f64>(factor, 2)?;
    // jitter away from the bilinear start so the check is generic
    for w in kernel.weights.data_mut() {
        *w += rng.gen_range(-0.2..0.2);
    }
    for b in &mut kernel.bias {
        *b = rng.gen_range(-0.3..0.3);
    }
    let u = random_tensor((1, 2, 6, 6), rng);

    let grads = deconv_backward(&input, &kernel, factor, &u)?;
    let mut analytic = Vec::new();
    analytic.extend_from_slice(grads.input.data());
    analytic.extend_from_slice(grads.weights.data());
    analytic.extend_from_slice(&grads.bias);

    let mut numeric = Vec::new();
    numeric.extend(fd_grad(input.data(), |x| {
        let xt = Tensor4::from_vec(input.shape(), x.to_vec()).unwrap();
        weighted_sum(&deconv_upsample(&xt, &kernel, factor).unwrap(), &u)
    }, FD_STEP));
    numeric.extend(fd_grad(kernel.weights.data(), |wv| {
        let k = ConvKernel {
            weights: Tensor4::from_vec(kernel.weights.shape(), wv.to_vec()).unwrap(),
            bias: kernel.bias.clone(),
        };
        weighted_sum(&deconv_upsample(&input, &k, factor).unwrap(), &u)
    }, FD_STEP));
    numeric.extend(fd_grad(&kernel.bias, |bv| {
        let k = ConvKernel { weights: kernel.weights.clone(), bias: bv.to_vec() };
        weighted_sum(&deconv_upsample(&input, &k, factor).unwrap(), &u)
    }, FD_STEP));

    let (worst, coord) = max_rel_err(&analytic, &numeric);
    Ok(CheckReport { name: "deconv".into(), worst, coord, threshold: LAYER_TOLERANCE })
}

/// Full residual block (channel change, projection shortcut, dilation 2)
/// checked through the network API: every parameter plus the block input.
fn check_block(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let config = NetworkConfig {
        input_channels: 3,
        layers: vec![LayerConfig::plain(LayerKind::ResidualStage {
            out_channels: 4,
            blocks: 1,
            stride: 1,
            dilation: 2,
        })],
        bins: 4,
        sigma: 1.0,
    };
    let mut net = build_network::<f64>(&config, rng.gen())?;
    let input = random_tensor((2, 3, 6, 6), rng);
    let u = random_tensor((2, 4, 6, 6), rng);

    net.zero_grads();
    let tape = net.forward_train(&input)?;
    let grad_input = net.backward(&tape, &u)?;

    let mut analytic = Vec::new();
    net.visit_params(&mut |p| analytic.extend_from_slice(p.grad));
    analytic.extend_from_slice(grad_input.data());

    let mut numeric = Vec::new();
    let mut names = Vec::new();
    net.visit_params(&mut |p| names.push((p.name.clone(), p.value.len())));
    for (name, len) in &names {
        let mut current = vec![0.0; *len];
        net.visit_params_update(&mut |n, value, _| {
            if n == name {
                current.copy_from_slice(value);
            }
        });
        numeric.extend(fd_grad(&current, |vals| {
            net.visit_params_update(&mut |n, value, _| {
                if n == name {
                    value.copy_from_slice(vals);
                }
            });
            let tape = net.forward_train(&input).unwrap();
            weighted_sum(&tape.logits, &u)
        }, FD_STEP));
        // restore
        net.visit_params_update(&mut |n, value, _| {
            if n == name {
                value.copy_from_slice(&current);
            }
        });
    }
    numeric.extend(fd_grad(input.data(), |x| {
        let xt = Tensor4::from_vec(input.shape(), x.to_vec()).unwrap();
        let tape = net.forward_train(&xt).unwrap();
        weighted_sum(&tape.logits, &u)
    }, FD_STEP));

    let (worst, coord) = max_rel_err(&analytic, &numeric);
    Ok(CheckReport { name: "residual_block".into(), worst, coord, threshold: LAYER_TOLERANCE })
}

fn check_head(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let logits = random_tensor((1, 6, 3, 3), rng);
    let mask: Vec<bool> = (0..9).map(|i| i != 4).collect();
    let labels = LabelMap::new(
        (1, 3, 3),
        (0..9).map(|_| rng.gen_range(0..6)).collect(),
        mask,
    )?;
    let (_, analytic) = multinomial_loss(&softmax(&logits)?, &labels)?;
    let numeric = fd_grad(logits.data(), |x| {
        let lt = Tensor4::from_vec(logits.shape(), x.to_vec()).unwrap();
        multinomial_loss(&softmax(&lt).unwrap(), &labels).unwrap().0
    }, FD_STEP);
    let (worst, coord) = max_rel_err(analytic.data(), &numeric);
    Ok(CheckReport { name: "loss_head".into(), worst, coord, threshold: HEAD_TOLERANCE })
}

/// End-to-end check on a miniature skip-connected dilated network: the loss
/// gradient of 20 sampled parameters against central differences.
fn check_end_to_end(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let config = NetworkConfig {
        input_channels: 3,
        layers: vec![
            LayerConfig::plain(LayerKind::Conv(ConvSpec::new(3, 1, 2, 3, 3, 4)?)),
            LayerConfig::plain(LayerKind::BatchNorm),
            LayerConfig::captured(LayerKind::Relu, "A"),
            LayerConfig::captured(LayerKind::MaxPool { window: 2, stride: 2 }, "B"),
            LayerConfig::captured(
                LayerKind::ResidualStage { out_channels: 6, blocks: 1, stride: 1, dilation: 2 },
                "C",
            ),
            LayerConfig::plain(LayerKind::ConcatSkip { sources: vec!["A".into(), "B".into(), "C".into()] }),
            LayerConfig::plain(LayerKind::Conv(ConvSpec::new(0, 1, 1, 0, 14, 5)?)),
            LayerConfig::plain(LayerKind::Deconv { factor: 4 }),
        ],
        bins: 5,
        sigma: 1.0,
    };
    let mut net = build_network::<f64>(&config, rng.gen())?;
    let input = random_tensor((1, 3, 16, 16), rng);
    let labels = LabelMap::new(
        (1, 16, 16),
        (0..256).map(|_| rng.gen_range(0..5)).collect(),
        vec![true; 256],
    )?;

    net.zero_grads();
    let tape = net.forward_train(&input)?;
    let (_, grad_logits) = multinomial_loss(&softmax(&tape.logits)?, &labels)?;
    net.backward(&tape, &grad_logits)?;

    // sample 20 parameter coordinates across all tensors
    let mut flat: Vec<(String, usize)> = Vec::new();
    net.visit_params(&mut |p| {
        for i in 0..p.value.len() {
            flat.push((p.name.clone(), i));
        }
    });
    let mut picks = Vec::new();
    for _ in 0..20 {
        picks.push(flat[rng.gen_range(0..flat.len())].clone());
    }

    let mut analytic = Vec::with_capacity(20);
    let mut numeric = Vec::with_capacity(20);
    for (name, idx) in &picks {
        let mut a = 0.0;
        net.visit_params(&mut |p| {
            if &p.name == name {
                a = p.grad[*idx];
            }
        });
        analytic.push(a);

        let mut orig = 0.0;
        net.visit_params_update(&mut |n, value, _| {
            if n == name {
                orig = value[*idx];
            }
        });
        let mut eval = |v: f64| -> f64 {
            net.visit_params_update(&mut |n, value, _| {
                if n == name {
                    value[*idx] = v;
                }
            });
            let tape = net.forward_train(&input).unwrap();
            multinomial_loss(&softmax(&tape.logits).unwrap(), &labels).unwrap().0
        };
        let up = eval(orig + FD_STEP);
        let down = eval(orig - FD_STEP);
        eval(orig);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }

    let (worst, coord) = max_rel_err(&analytic, &numeric);
    Ok(CheckReport { name: "end_to_end".into(), worst, coord, threshold: END_TO_END_TOLERANCE })
}

/// Runs every layer check plus the end-to-end check, standard precision.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for l in [1, 2, 4] {
        reports.push(check_conv(l, &mut rng)?);
    }
    reports.push(check_batchnorm(&mut rng)?);
    reports.push(check_pool(&mut rng)?);
    reports.push(check_deconv(&mut rng)?);
    reports.push(check_block(&mut rng)?);
    reports.push(check_head(&mut rng)?);
    reports.push(check_end_to_end(&mut rng)?);
    Ok(reports)
}

/// Error naming the first failing layer and coordinate, if any.
pub fn suite_verdict(reports: &[CheckReport]) -> Result<()> {
    match reports.iter().find(|r| !r.passed()) {
        None => Ok(()),
        Some(r) => Err(Error::Numeric(format!(
            "gradient check failed for {} at coordinate {}: relative error {:.3e} exceeds {:.1e}",
            r.name, r.coord, r.worst, r.threshold
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let reports = run_suite(0).unwrap();
        assert_eq!(reports.len(), 9);
        for r in &reports {
            assert!(r.passed(), "{} worst {:.3e} at {}", r.name, r.worst, r.coord);
        }
        suite_verdict(&reports).unwrap();
        let kinds: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
        for expect in ["conv_l1", "conv_l2", "conv_l4", "batchnorm", "maxpool", "deconv", "residual_block", "loss_head", "end_to_end"] {
            assert!(kinds.contains(&expect), "missing {expect}");
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // negative control: a deliberately wrong analytic gradient must trip
        // the comparison and map to the numeric error class
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor((1, 1, 4, 4), &mut rng);
        let u = random_tensor((1, 1, 4, 4), &mut rng);
        let spec = ConvSpec::same_resolution(1, 1, 1, 1).unwrap();
        let kernel = ConvKernel::init_fan_in(&spec, &mut rng).unwrap();
        let grads = conv2d_backward(&input, &kernel, &spec, &u).unwrap();
        let mut corrupt = grads.input.data().to_vec();
        corrupt[3] += 0.5;
        let numeric = fd_grad(input.data(), |x| {
            let xt = Tensor4::from_vec(input.shape(), x.to_vec()).unwrap();
            weighted_sum(&conv2d(&xt, &kernel, &spec).unwrap(), &u)
        }, FD_STEP);
        let (worst, coord) = max_rel_err(&corrupt, &numeric);
        assert!(worst > LAYER_TOLERANCE);
        assert_eq!(coord, 3);
        let report = CheckReport { name: "conv_l1".into(), worst, coord, threshold: LAYER_TOLERANCE };
        let err = suite_verdict(&[report]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
