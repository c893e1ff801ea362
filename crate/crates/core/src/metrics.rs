//! Depth evaluation: threshold accuracies, relative/log/rms errors, bin-label
//! pixel accuracy and confusion statistics.
//!
//! All metric arithmetic runs in 64-bit precision regardless of the model
//! precision, with fixed-order reductions.

use crate::depth::{depth_to_label, BinSpec, LabelMap};
use crate::error::{Error, Result};

/// Per-pixel depth in meters with a validity mask. Valid pixels are strictly
/// positive; non-positive or non-finite values are invalid by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    shape: (usize, usize, usize),
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl DepthMap {
    /// Builds a map, masking out non-positive and non-finite values.
    pub fn from_values(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (n, h, w) = shape;
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Size(format!("depth map dims must be >= 1, got {shape:?}")));
        }
        if data.len() != n * h * w {
            return Err(Error::Size(format!(
                "depth data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        let mask = data.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Ok(DepthMap { shape, data, mask })
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> (f64, bool) {
        let (_, h, w) = self.shape;
        let i = (n * h + y) * w + x;
        (self.data[i], self.mask[i])
    }
}

/// The evaluation record: threshold accuracies at 1.25^k, mean relative
/// error, mean absolute log10 error, root mean squared error, bin-label
/// pixel accuracy and the valid-pixel count.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub pixel_acc: f64,
    pub n_valid: usize,
}

impl MetricsReport {
    /// Fixed key-value text form, one metric per line, locale-independent.
    pub fn to_text(&self) -> String {
        format!(
            "delta1={:.9}\ndelta2={:.9}\ndelta3={:.9}\nrel={:.9}\nlog10={:.9}\nrms={:.9}\npixel_acc={:.9}\nn_valid={}\n",
            self.delta1, self.delta2, self.delta3, self.rel, self.log10, self.rms, self.pixel_acc, self.n_valid
        )
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Computes all metrics over the intersection of the two validity masks.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, bins: &BinSpec) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut n_valid = 0usize;
    let mut hits = [0usize; 3];
    let mut rel_sum = 0.0;
    let mut log_sum = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..pred.len() {
        if !(pred.mask()[i] && gt.mask()[i]) {
            continue;
        }
        let (dp, dg) = (pred.data()[i], gt.data()[i]);
        n_valid += 1;
        let ratio = (dp / dg).max(dg / dp);
        let mut thr = 1.25;
        for hit in &mut hits {
            if ratio < thr {
                *hit += 1;
            }
            thr *= 1.25;
        }
        rel_sum += (dp - dg).abs() / dg;
        log_sum += (dp.log10() - dg.log10()).abs();
        sq_sum += (dp - dg) * (dp - dg);
    }
    if n_valid == 0 {
        return Err(Error::Domain("no jointly valid pixels to evaluate".into()));
    }

    let pred_labels = depth_to_label(pred, bins);
    let gt_labels = depth_to_label(gt, bins);
    let mut agree = 0usize;
    for i in 0..pred_labels.len() {
        if pred_labels.mask()[i] && gt_labels.mask()[i] && pred_labels.labels()[i] == gt_labels.labels()[i] {
            agree += 1;
        }
    }

    let nf = n_valid as f64;
    Ok(MetricsReport {
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        rel: rel_sum / nf,
        log10: log_sum / nf,
        rms: (sq_sum / nf).sqrt(),
        pixel_acc: agree as f64 / nf,
        n_valid,
    })
}

/// m x m counts; rows are ground-truth bins, columns predicted bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    m: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn bins(&self) -> usize {
        self.m
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.m + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Regroups bins by an integer factor, summing super-cells.
    pub fn coarsen(&self, factor: usize) -> Result<ConfusionMatrix> {
        if factor == 0 || self.m % factor != 0 {
            return Err(Error::Config(format!(
                "coarsening factor {factor} does not divide {} bins",
                self.m
            )));
        }
        let m2 = self.m / factor;
        let mut counts = vec![0u64; m2 * m2];
        for g in 0..self.m {
            for p in 0..self.m {
                counts[(g / factor) * m2 + p / factor] += self.at(g, p);
            }
        }
        Ok(ConfusionMatrix { m: m2, counts })
    }
}

/// Tallies (ground truth, prediction) label pairs over jointly valid pixels.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, m: usize) -> Result<ConfusionMatrix> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "label map shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut counts = vec![0u64; m * m];
    for i in 0..pred.len() {
        if !(pred.mask()[i] && gt.mask()[i]) {
            continue;
        }
        let (p, g) = (pred.labels()[i] as usize, gt.labels()[i] as usize);
        if p >= m || g >= m {
            return Err(Error::Domain(format!(
                "label out of range: gt {g}, pred {p}, m {m}"
            )));
        }
        counts[g * m + p] += 1;
    }
    Ok(ConfusionMatrix { m, counts })
}

/// Fraction of the total count within `band` bins of the diagonal.
pub fn band_mass(cm: &ConfusionMatrix, band: usize) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    let mut near = 0u64;
    for g in 0..cm.bins() {
        for p in 0..cm.bins() {
            if g.abs_diff(p) <= band {
                near += cm.at(g, p);
            }
        }
    }
    near as f64 / total as f64
}
