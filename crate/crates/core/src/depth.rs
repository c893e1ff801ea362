//! Log-space depth discretization and the classification head.
//!
//! Depth is discretized into `m` bins of equal width in log space. The head
//! is trained with softmax plus multinomial logistic loss over bin labels;
//! continuous depth is recovered either by the soft weighted sum
//! `d = exp(w . p)` over the log-space bin centers `w`, or by the hard rule
//! that takes the center of the argmax bin.

use crate::error::{Error, Result};
use crate::metrics::DepthMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Log-space-uniform discretization of a depth range into `m` bins.
///
/// `weights[j]` is the log-space center of bin `j` and `centers[j]` is
/// defined as `exp(weights[j])`, so a one-hot score vector recovers its bin
/// center exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    pub m: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Log-space bin width.
    pub delta: f64,
    /// m + 1 strictly increasing bin boundaries in meters.
    pub edges: Vec<f64>,
    /// m bin centers in meters (geometric centers of their bins).
    pub centers: Vec<f64>,
    /// m log-space bin centers, `log(d_min) + (j + 0.5) * delta`.
    pub weights: Vec<f64>,
}

impl BinSpec {
    pub fn new(d_min: f64, d_max: f64, m: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
            return Err(Error::Domain(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{d_min}, {d_max}]"
            )));
        }
        if m < 2 {
            return Err(Error::Domain(format!("bin count must be >= 2, got {m}")));
        }
        let log_min = d_min.ln();
        let delta = (d_max.ln() - log_min) / m as f64;
        let edges = (0..=m).map(|j| (log_min + j as f64 * delta).exp()).collect();
        let weights: Vec<f64> = (0..m).map(|j| log_min + (j as f64 + 0.5) * delta).collect();
        let centers = weights.iter().map(|&w| w.exp()).collect();
        Ok(BinSpec { m, d_min, d_max, delta, edges, centers, weights })
    }

    /// Bin index containing depth `d`, clamped to the end bins.
    pub fn label_of(&self, d: f64) -> u32 {
        let raw = (d.ln() - self.d_min.ln()) / self.delta;
        let idx = raw.floor();
        if idx < 0.0 {
            0
        } else if idx >= self.m as f64 {
            (self.m - 1) as u32
        } else {
            idx as u32
        }
    }
}

/// Per-pixel integer bin labels with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    shape: (usize, usize, usize),
    labels: Vec<u32>,
    mask: Vec<bool>,
}

impl LabelMap {
    pub fn new(shape: (usize, usize, usize), labels: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        let (n, h, w) = shape;
        let volume = n * h * w;
        if labels.len() != volume || mask.len() != volume {
            return Err(Error::Size(format!(
                "label/mask length {}/{} does not match shape {shape:?}",
                labels.len(),
                mask.len()
            )));
        }
        Ok(LabelMap { shape, labels, mask })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Assigns each valid depth its containing bin, clamping out-of-range depths
/// to the end bins. Invalid pixels stay masked out.
pub fn depth_to_label(depth: &DepthMap, bins: &BinSpec) -> LabelMap {
    let mut labels = vec![0u32; depth.len()];
    let mut mask = vec![false; depth.len()];
    for i in 0..depth.len() {
        if depth.mask()[i] {
            labels[i] = bins.label_of(depth.data()[i]);
            mask[i] = true;
        }
    }
    LabelMap { shape: depth.shape(), labels, mask }
}

/// Per-pixel probability vectors over the `m` bins: every channel vector is
/// non-negative and sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    probs: Tensor4<T>,
}

impl<T: Scalar> ScoreMap<T> {
    /// Wraps a probability tensor, validating the distribution invariants.
    pub fn new(probs: Tensor4<T>) -> Result<Self> {
        let (n, m, h, w) = probs.shape();
        if m < 2 {
            return Err(Error::Shape(format!("score map needs >= 2 channels, got {m}")));
        }
        let tol = 1e-6;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for c in 0..m {
                        let p = probs.at(b, c, y, x).to_f64_lossy();
                        if p < 0.0 {
                            return Err(Error::Domain(format!("negative score {p} at ({b},{c},{y},{x})")));
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > tol {
                        return Err(Error::Domain(format!("scores at ({b},{y},{x}) sum to {sum}")));
                    }
                }
            }
        }
        Ok(ScoreMap { probs })
    }

    pub fn probs(&self) -> &Tensor4<T> {
        &self.probs
    }

    pub fn bins(&self) -> usize {
        self.probs.channels()
    }

    pub fn into_probs(self) -> Tensor4<T> {
        self.probs
    }
}

/// Channel-wise softmax with max subtraction for overflow safety.
pub fn softmax<T: Scalar>(logits: &Tensor4<T>) -> Result<ScoreMap<T>> {
    let (n, m, h, w) = logits.shape();
    if m < 2 {
        return Err(Error::Shape(format!("softmax needs >= 2 channels, got {m}")));
    }
    let mut probs = Tensor4::zeros(logits.shape())?;
    let plane = h * w;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let base = logits.index(b, 0, y, x);
                let mut max = logits.data()[base];
                for c in 1..m {
                    let v = logits.data()[base + c * plane];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for c in 0..m {
                    let e = (logits.data()[base + c * plane] - max).exp();
                    probs.data_mut()[base + c * plane] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for c in 0..m {
                    probs.data_mut()[base + c * plane] *= inv;
                }
            }
        }
    }
    Ok(ScoreMap { probs })
}

/// Multinomial logistic loss averaged over valid pixels, plus its gradient
/// with respect to the pre-softmax logits: `(p - onehot(label)) / N` at
/// valid pixels and zero elsewhere.
pub fn multinomial_loss<T: Scalar>(scores: &ScoreMap<T>, labels: &LabelMap) -> Result<(f64, Tensor4<T>)> {
    let (n, m, h, w) = scores.probs.shape();
    if labels.shape() != (n, h, w) {
        return Err(Error::Shape(format!(
            "labels shape {:?} does not match scores {:?}",
            labels.shape(),
            scores.probs.shape()
        )));
    }
    let n_valid = labels.valid_count();
    if n_valid == 0 {
        return Err(Error::Domain("loss needs at least one valid pixel".into()));
    }
    let inv_n = T::from_f64(1.0 / n_valid as f64);
    let plane = h * w;
    let mut grad = Tensor4::zeros(scores.probs.shape())?;
    let mut loss = 0.0f64;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let pix = (b * h + y) * w + x;
                if !labels.mask()[pix] {
                    continue;
                }
                let k = labels.labels()[pix] as usize;
                if k >= m {
                    return Err(Error::Domain(format!("label {k} out of range for {m} bins")));
                }
                let base = scores.probs.index(b, 0, y, x);
                for c in 0..m {
                    let p = scores.probs.data()[base + c * plane];
                    let delta = if c == k { T::one() } else { T::zero() };
                    grad.data_mut()[base + c * plane] = (p - delta) * inv_n;
                }
                let pk = scores.probs.data()[base + k * plane].to_f64_lossy();
                loss -= pk.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok((loss / n_valid as f64, grad))
}

/// Continuous depth by the soft weighted sum `exp(w . p)` per pixel. The
/// result lies strictly within the range spanned by the bin centers.
pub fn soft_weight_sum<T: Scalar>(scores: &ScoreMap<T>, bins: &BinSpec) -> Result<DepthMap> {
    let (n, m, h, w) = scores.probs.shape();
    if m != bins.m {
        return Err(Error::Shape(format!("score map has {m} channels, bins expect {}", bins.m)));
    }
    let plane = h * w;
    let mut out = vec![0.0f64; n * plane];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let base = scores.probs.index(b, 0, y, x);
                let mut acc = 0.0f64;
                for c in 0..m {
                    acc += bins.weights[c] * scores.probs.data()[base + c * plane].to_f64_lossy();
                }
                out[(b * h + y) * w + x] = acc.exp();
            }
        }
    }
    DepthMap::from_values((n, h, w), out)
}

/// Continuous depth as the center of the most probable bin; argmax ties
/// break to the lowest index.
pub fn hard_threshold<T: Scalar>(scores: &ScoreMap<T>, bins: &BinSpec) -> Result<DepthMap> {
    let (n, m, h, w) = scores.probs.shape();
    if m != bins.m {
        return Err(Error::Shape(format!("score map has {m} channels, bins expect {}", bins.m)));
    }
    let plane = h * w;
    let mut out = vec![0.0f64; n * plane];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let base = scores.probs.index(b, 0, y, x);
                let mut best_c = 0usize;
                let mut best = scores.probs.data()[base];
                for c in 1..m {
                    let p = scores.probs.data()[base + c * plane];
                    if p > best {
                        best = p;
                        best_c = c;
                    }
                }
                out[(b * h + y) * w + x] = bins.centers[best_c];
            }
        }
    }
    DepthMap::from_values((n, h, w), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bin_spec_closed_form() {
        let e = std::f64::consts::E;
        let b = BinSpec::new(1.0, e * e, 2).unwrap();
        for (got, expect) in b.edges.iter().zip([1.0, e, e * e]) {
            assert!((got - expect).abs() < 1e-12);
        }
        for (got, expect) in b.centers.iter().zip([0.5f64.exp(), 1.5f64.exp()]) {
            assert!((got - expect).abs() < 1e-12);
        }
        for (got, expect) in b.weights.iter().zip([0.5, 1.5]) {
            assert!((got - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_equivariance_of_bins() {
        let a = BinSpec::new(0.8, 4.0, 7).unwrap();
        let s = 2.5;
        let b = BinSpec::new(0.8 * s, 4.0 * s, 7).unwrap();
        for (ea, eb) in a.edges.iter().zip(&b.edges) {
            assert!((ea * s - eb).abs() / eb < 1e-12);
        }
        for (ca, cb) in a.centers.iter().zip(&b.centers) {
            assert!((ca * s - cb).abs() / cb < 1e-12);
        }
    }

    #[test]
    fn default_range_two_hundred_bins() {
        let b = BinSpec::new(0.7, 10.0, 200).unwrap();
        assert!((b.delta - (10.0f64.ln() - 0.7f64.ln()) / 200.0).abs() < 1e-15);
        assert!((b.delta - 0.013303).abs() < 1e-6);
        assert_eq!(b.edges.len(), 201);
        for w in b.edges.windows(2) {
            assert!(w[0] < w[1]);
        }
        // log-space widths all equal delta
        for w in b.edges.windows(2) {
            assert!((w[1].ln() - w[0].ln() - b.delta).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_bin_specs_rejected() {
        assert!(BinSpec::new(0.0, 1.0, 10).is_err());
        assert!(BinSpec::new(2.0, 1.0, 10).is_err());
        assert!(BinSpec::new(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn centers_round_trip_to_their_bin() {
        for &m in &[2usize, 50, 200] {
            let b = BinSpec::new(0.7, 10.0, m).unwrap();
            for (j, &c) in b.centers.iter().enumerate() {
                assert_eq!(b.label_of(c), j as u32, "m {m} bin {j}");
            }
        }
    }

    #[test]
    fn label_clamping_and_masking() {
        let e2 = BinSpec::new(1.0, std::f64::consts::E.powi(2), 2).unwrap();
        assert_eq!(e2.label_of(1.0), 0);
        assert_eq!(e2.label_of(std::f64::consts::E.powi(2)), 1);
        assert_eq!(e2.label_of(2.0), 0); // ln 2 < 1
        assert_eq!(e2.label_of(0.01), 0);
        assert_eq!(e2.label_of(1000.0), 1);

        let depth = DepthMap::from_values((1, 1, 3), vec![2.0, -1.0, 0.0]).unwrap();
        let labels = depth_to_label(&depth, &e2);
        assert_eq!(labels.mask(), &[true, false, false]);
        assert_eq!(labels.labels()[0], 0);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let logits = Tensor4::<f64>::filled((1, 4, 2, 2), 3.25).unwrap();
        let s = softmax(&logits).unwrap();
        for &p in s.probs().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }

        let big = Tensor4::<f64>::from_vec((1, 2, 1, 1), vec![5.0, 1005.0]).unwrap();
        let s = softmax(&big).unwrap();
        assert!(s.probs().at(0, 0, 0, 0) < 1e-300);
        assert!((s.probs().at(0, 1, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        let logits = Tensor4::from_vec((1, 2, 1, 1), vec![0.0, 3.0f64.ln()]).unwrap();
        let s = softmax(&logits).unwrap();
        assert!((s.probs().at(0, 0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((s.probs().at(0, 1, 0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = Tensor4::<f64>::from_vec((1, 3, 1, 2), vec![0.3, -1.0, 2.0, 0.7, 0.0, -0.5]).unwrap();
        let shifted = logits.map(|v| v + 123.456);
        let a = softmax(&logits).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.probs().data().iter().zip(b.probs().data()) {
            assert!((x - y).abs() / x.abs().max(1e-300) < 1e-12);
        }
    }

    fn onehot(m: usize, k: usize) -> ScoreMap<f64> {
        let mut probs = Tensor4::zeros((1, m, 1, 1)).unwrap();
        probs.set(0, k, 0, 0, 1.0);
        ScoreMap::new(probs).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let s = onehot(4, 2);
        let labels = LabelMap::new((1, 1, 1), vec![2], vec![true]).unwrap();
        let (loss, grad) = multinomial_loss(&s, &labels).unwrap();
        assert_eq!(loss, 0.0);
        // gradient is p - onehot = 0 at the perfect prediction
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_scores_lose_ln_m() {
        for &m in &[2usize, 50, 200] {
            let probs = Tensor4::<f64>::filled((1, m, 2, 2), 1.0 / m as f64).unwrap();
            let s = ScoreMap::new(probs).unwrap();
            let labels = LabelMap::new((1, 2, 2), vec![0, 1, 2 % m as u32, 1], vec![true; 4]).unwrap();
            let (loss, grad) = multinomial_loss(&s, &labels).unwrap();
            assert!((loss - (m as f64).ln()).abs() < 1e-9, "m {m}: {loss}");
            // softmax Jacobian property: per-pixel channel sums of the gradient vanish
            let (_, _, h, w) = s.probs().shape();
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    for c in 0..m {
                        sum += grad.at(0, c, y, x);
                    }
                    assert!(sum.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_without_valid_pixels_rejected() {
        let s = onehot(3, 0);
        let labels = LabelMap::new((1, 1, 1), vec![0], vec![false]).unwrap();
        assert!(matches!(multinomial_loss(&s, &labels), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences_through_softmax() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut logits = Tensor4::<f64>::zeros((1, 5, 2, 3)).unwrap();
        for v in logits.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let labels = LabelMap::new(
            (1, 2, 3),
            (0..6).map(|_| rng.gen_range(0..5)).collect(),
            vec![true, true, false, true, true, true],
        )
        .unwrap();

        let loss_of = |lg: &Tensor4<f64>| multinomial_loss(&softmax(lg).unwrap(), &labels).unwrap().0;
        let (_, grad) = multinomial_loss(&softmax(&logits).unwrap(), &labels).unwrap();

        let h = 1e-5;
        for i in 0..logits.len() {
            let orig = logits.data()[i];
            logits.data_mut()[i] = orig + h;
            let up = loss_of(&logits);
            logits.data_mut()[i] = orig - h;
            let down = loss_of(&logits);
            logits.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom < 1e-6, "coord {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn soft_weight_sum_on_onehot_returns_centers_exactly() {
        for &m in &[2usize, 50, 200] {
            let bins = BinSpec::new(0.7, 10.0, m).unwrap();
            for j in 0..m {
                let mut probs = Tensor4::<f64>::zeros((1, m, 1, 1)).unwrap();
                probs.set(0, j, 0, 0, 1.0);
                let s = ScoreMap::new(probs).unwrap();
                let d = soft_weight_sum(&s, &bins).unwrap();
                assert_eq!(d.data()[0], bins.centers[j], "m {m} bin {j}");
                let hard = hard_threshold(&s, &bins).unwrap();
                assert_eq!(hard.data()[0], bins.centers[j]);
            }
        }
    }

    #[test]
    fn soft_weight_sum_hand_example() {
        let e2 = BinSpec::new(1.0, std::f64::consts::E.powi(2), 2).unwrap();
        let probs = Tensor4::from_vec((1, 2, 1, 1), vec![0.5, 0.5]).unwrap();
        let s = ScoreMap::new(probs).unwrap();
        let d = soft_weight_sum(&s, &e2).unwrap();
        assert!((d.data()[0] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn symmetric_scores_recover_center_bin() {
        let bins = BinSpec::new(0.7, 10.0, 9).unwrap();
        let j = 4;
        let mut probs = Tensor4::<f64>::zeros((1, 9, 1, 1)).unwrap();
        probs.set(0, j, 0, 0, 0.4);
        for t in 1..=2 {
            probs.set(0, j - t, 0, 0, 0.15);
            probs.set(0, j + t, 0, 0, 0.15);
        }
        let s = ScoreMap::new(probs).unwrap();
        let d = soft_weight_sum(&s, &bins).unwrap();
        assert!((d.data()[0] - bins.centers[j]).abs() / bins.centers[j] < 1e-10);
    }

    #[test]
    fn log_of_soft_sum_is_linear_in_scores() {
        let bins = BinSpec::new(0.7, 10.0, 6).unwrap();
        let p = ScoreMap::new(Tensor4::from_vec((1, 6, 1, 1), vec![0.1, 0.2, 0.3, 0.2, 0.1, 0.1]).unwrap()).unwrap();
        let q = ScoreMap::new(Tensor4::from_vec((1, 6, 1, 1), vec![0.3, 0.1, 0.1, 0.1, 0.2, 0.2]).unwrap()).unwrap();
        let alpha = 0.35;
        let mixed: Vec<f64> = p
            .probs()
            .data()
            .iter()
            .zip(q.probs().data())
            .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let mix = ScoreMap::new(Tensor4::from_vec((1, 6, 1, 1), mixed).unwrap()).unwrap();
        let dp = soft_weight_sum(&p, &bins).unwrap().data()[0].ln();
        let dq = soft_weight_sum(&q, &bins).unwrap().data()[0].ln();
        let dm = soft_weight_sum(&mix, &bins).unwrap().data()[0].ln();
        assert!((dm - (alpha * dp + (1.0 - alpha) * dq)).abs() < 1e-12);
    }

    #[test]
    fn hard_threshold_argmax_and_ties() {
        let bins = BinSpec::new(0.7, 10.0, 3).unwrap();
        let s = ScoreMap::new(Tensor4::from_vec((1, 3, 1, 1), vec![0.4, 0.35, 0.25]).unwrap()).unwrap();
        assert_eq!(hard_threshold(&s, &bins).unwrap().data()[0], bins.centers[0]);
        let u = ScoreMap::new(Tensor4::<f64>::filled((1, 3, 1, 1), 1.0 / 3.0).unwrap()).unwrap();
        assert_eq!(hard_threshold(&u, &bins).unwrap().data()[0], bins.centers[0]);
    }

    #[test]
    fn soft_output_stays_within_center_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let bins = BinSpec::new(0.7, 10.0, 12).unwrap();
        let mut logits = Tensor4::<f64>::zeros((2, 12, 3, 3)).unwrap();
        for v in logits.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        let d = soft_weight_sum(&softmax(&logits).unwrap(), &bins).unwrap();
        for &v in d.data() {
            assert!(v >= bins.centers[0] && v <= bins.centers[11]);
        }
    }
}
