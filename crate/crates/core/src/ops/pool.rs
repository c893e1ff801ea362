//! Max pooling with recorded argmax indices for the backward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Output of [`max_pool`]: pooled values plus, per output element, the flat
/// index into the input of the selected maximum. Ties break to the first
/// occurrence in row-major scan order.
#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub output: Tensor4<T>,
    pub argmax: Vec<usize>,
}

pub fn pool_out_size(size: usize, window: usize, stride: usize) -> Result<usize> {
    if window < 1 || stride < 1 {
        return Err(Error::Config(format!(
            "pool window and stride must be >= 1, got window {window}, stride {stride}"
        )));
    }
    if window > size {
        return Err(Error::Config(format!("pool window {window} exceeds input size {size}")));
    }
    Ok((size - window) / stride + 1)
}

pub fn max_pool<T: Scalar>(input: &Tensor4<T>, window: usize, stride: usize) -> Result<PoolOutput<T>> {
    let (n, c, h, w) = input.shape();
    let oh = pool_out_size(h, window, stride)?;
    let ow = pool_out_size(w, window, stride)?;
    let mut output = Tensor4::zeros((n, c, oh, ow))?;
    let mut argmax = vec![0usize; output.len()];

    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = input.at(b, ch, y0, x0);
                    let mut best_idx = input.index(b, ch, y0, x0);
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = input.index(b, ch, y0 + ky, x0 + kx);
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = output.index(b, ch, oy, ox);
                    output.data_mut()[out_idx] = best;
                    argmax[out_idx] = best_idx;
                }
            }
        }
    }
    Ok(PoolOutput { output, argmax })
}

/// Routes the upstream gradient to the recorded argmax positions only.
pub fn max_pool_backward<T: Scalar>(
    input_shape: (usize, usize, usize, usize),
    argmax: &[usize],
    upstream: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "upstream has {} elements, argmax records {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor4::zeros(input_shape)?;
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        grad.data_mut()[idx] += g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor4::<f64>::filled((1, 2, 4, 4), 2.5).unwrap();
        for &(win, stride) in &[(2usize, 2usize), (3, 1), (4, 4)] {
            let out = max_pool(&x, win, stride).unwrap().output;
            assert!(out.data().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn single_window_takes_max() {
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = max_pool(&x, 2, 2).unwrap();
        assert_eq!(out.output.shape(), (1, 1, 1, 1));
        assert_eq!(out.output.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn matches_brute_force_window_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::from_vec((1, 1, 6, 6), (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = max_pool(&x, 2, 2).unwrap().output;
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        best = best.max(x.at(0, 0, 2 * oy + ky, 2 * ox + kx));
                    }
                }
                assert_eq!(out.at(0, 0, oy, ox), best);
            }
        }
    }

    #[test]
    fn oversized_window_rejected() {
        let x = Tensor4::<f64>::zeros((1, 1, 3, 3)).unwrap();
        assert!(matches!(max_pool(&x, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn backward_routes_to_argmax_only_and_conserves_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::from_vec((2, 2, 6, 6), (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let pooled = max_pool(&x, 2, 2).unwrap();
        let up = Tensor4::from_vec((2, 2, 3, 3), (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let grad = max_pool_backward(x.shape(), &pooled.argmax, &up).unwrap();

        let grad_sum: f64 = grad.data().iter().sum();
        let up_sum: f64 = up.data().iter().sum();
        assert!((grad_sum - up_sum).abs() < 1e-12);

        let argmax: std::collections::HashSet<usize> = pooled.argmax.iter().copied().collect();
        for (i, &g) in grad.data().iter().enumerate() {
            if !argmax.contains(&i) {
                assert_eq!(g, 0.0);
            }
        }
    }

    #[test]
    fn ties_break_to_first_in_scan_order() {
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let pooled = max_pool(&x, 2, 2).unwrap();
        assert_eq!(pooled.argmax[0], 0);
    }
}
