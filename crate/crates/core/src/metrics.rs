//! Evaluation metrics: error summaries, per-height-bin box statistics and
//! frequency attenuation profiles.

use alloc::{vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::datamodel::{percentile_sorted, MIN_VEGETATION_HEIGHT};
use crate::error::{Error, Result};

fn check_lengths(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Shape {
            context: "metric inputs",
            expected: target.len(),
            found: if pred.len() != target.len() { pred.len() } else { valid.len() },
        });
    }
    Ok(())
}

/// Mergeable sufficient statistics of errors `e = pred - target`.
/// Target spread is tracked with a running mean / M2 so partial results from
/// different patches combine without cancellation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub count: u64,
    pub sum_err: f64,
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub sum_rel: f64,
    pub mean_target: f64,
    pub m2_target: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.count += 1;
        self.sum_err += e;
        self.sum_abs += e.abs();
        self.sum_sq += e * e;
        self.sum_rel += e.abs() / target;
        let delta = target - self.mean_target;
        self.mean_target += delta / self.count as f64;
        self.m2_target += delta * (target - self.mean_target);
    }

    pub fn extend(&mut self, pred: &[f64], target: &[f64], valid: &[bool]) -> Result<()> {
        check_lengths(pred, target, valid)?;
        for i in 0..pred.len() {
            if valid[i] {
                self.push(pred[i], target[i]);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean_target - self.mean_target;
        self.mean_target += delta * nb / n;
        self.m2_target += other.m2_target + delta * delta * na * nb / n;
        self.count += other.count;
        self.sum_err += other.sum_err;
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.sum_rel += other.sum_rel;
    }

    pub fn finish(&self) -> Result<BasicMetrics> {
        if self.count < 2 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        Ok(BasicMetrics {
            count: self.count,
            mae: self.sum_abs / n,
            rmse: libm::sqrt(self.sum_sq / n),
            r2: (self.m2_target > 0.0).then(|| 1.0 - self.sum_sq / self.m2_target),
            rmae: self.sum_rel / n,
            bias: self.sum_err / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub count: u64,
    pub mae: f64,
    pub rmse: f64,
    /// Absent when the target has zero variance.
    pub r2: Option<f64>,
    /// Mean of `|e| / y`.
    pub rmae: f64,
    pub bias: f64,
}

pub fn basic_metrics(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<BasicMetrics> {
    let mut acc = MetricAccumulator::default();
    acc.extend(pred, target, valid)?;
    acc.finish()
}

/// Lower edges of the reporting height bins; the last bin is open-ended.
pub const HEIGHT_BIN_EDGES: [f64; 7] = [MIN_VEGETATION_HEIGHT, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

impl BoxStats {
    /// Quartiles by linear interpolation; whiskers are the most extreme
    /// samples within 1.5 IQR of the box.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = percentile_sorted(&s, 25.0);
        let median = percentile_sorted(&s, 50.0);
        let q3 = percentile_sorted(&s, 75.0);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_lo = s.iter().copied().find(|&v| v >= lo_fence).unwrap_or(q1);
        let whisker_hi = s.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(q3);
        Some(Self {
            median,
            q1,
            q3,
            whisker_lo,
            whisker_hi,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightBin {
    pub lower: f64,
    /// `None` for the open top bin.
    pub upper: Option<f64>,
    pub count: usize,
    pub fraction: f64,
    pub stats: Option<BoxStats>,
}

impl HeightBin {
    pub fn label(&self) -> alloc::string::String {
        match self.upper {
            Some(u) => alloc::format!("{}-{}", self.lower, u),
            None => alloc::format!(">{}", self.lower),
        }
    }
}

fn bin_index(target: f64) -> Option<usize> {
    if !(target >= HEIGHT_BIN_EDGES[0]) {
        return None;
    }
    Some(HEIGHT_BIN_EDGES.iter().rposition(|&e| target >= e).unwrap_or(0))
}

/// Collects errors per target-height bin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BinAccumulator {
    pub errors: Vec<Vec<f64>>,
}

impl BinAccumulator {
    pub fn new() -> Self {
        Self {
            errors: vec![Vec::new(); HEIGHT_BIN_EDGES.len()],
        }
    }

    pub fn extend(&mut self, pred: &[f64], target: &[f64], valid: &[bool]) -> Result<()> {
        check_lengths(pred, target, valid)?;
        if self.errors.len() != HEIGHT_BIN_EDGES.len() {
            self.errors = vec![Vec::new(); HEIGHT_BIN_EDGES.len()];
        }
        for i in 0..pred.len() {
            if valid[i] {
                if let Some(b) = bin_index(target[i]) {
                    self.errors[b].push(pred[i] - target[i]);
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BinAccumulator) {
        if self.errors.len() != HEIGHT_BIN_EDGES.len() {
            self.errors = vec![Vec::new(); HEIGHT_BIN_EDGES.len()];
        }
        for (a, b) in self.errors.iter_mut().zip(&other.errors) {
            a.extend_from_slice(b);
        }
    }

    pub fn finish(&self) -> Vec<HeightBin> {
        let total: usize = self.errors.iter().map(Vec::len).sum();
        (0..HEIGHT_BIN_EDGES.len())
            .map(|b| {
                let e = self.errors.get(b).map(Vec::as_slice).unwrap_or(&[]);
                HeightBin {
                    lower: HEIGHT_BIN_EDGES[b],
                    upper: HEIGHT_BIN_EDGES.get(b + 1).copied(),
                    count: e.len(),
                    fraction: if total == 0 { 0.0 } else { e.len() as f64 / total as f64 },
                    stats: BoxStats::from_samples(e),
                }
            })
            .collect()
    }
}

pub fn bin_errors(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<Vec<HeightBin>> {
    let mut acc = BinAccumulator::new();
    acc.extend(pred, target, valid)?;
    Ok(acc.finish())
}

/// 2-D DFT magnitudes of a square image, row-major, via separable
/// row / column transforms with a precomputed twiddle table.
pub fn dft2_magnitude(img: &[f64], n: usize) -> Result<Vec<f64>> {
    if img.len() != n * n {
        return Err(Error::Shape {
            context: "dft input",
            expected: n * n,
            found: img.len(),
        });
    }
    let (cos_t, sin_t): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|k| {
            let a = -2.0 * core::f64::consts::PI * k as f64 / n as f64;
            (libm::cos(a), libm::sin(a))
        })
        .unzip();
    // rows: real input
    let mut re = vec![0.0; n * n];
    let mut im = vec![0.0; n * n];
    for r in 0..n {
        let row = &img[r * n..(r + 1) * n];
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for (x, &v) in row.iter().enumerate() {
                let t = (k * x) % n;
                sr += v * cos_t[t];
                si += v * sin_t[t];
            }
            re[r * n + k] = sr;
            im[r * n + k] = si;
        }
    }
    // columns: complex input
    let mut mag = vec![0.0; n * n];
    let mut col_re = vec![0.0; n];
    let mut col_im = vec![0.0; n];
    for c in 0..n {
        for y in 0..n {
            col_re[y] = re[y * n + c];
            col_im[y] = im[y * n + c];
        }
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..n {
                let t = (k * y) % n;
                sr += col_re[y] * cos_t[t] - col_im[y] * sin_t[t];
                si += col_re[y] * sin_t[t] + col_im[y] * cos_t[t];
            }
            mag[k * n + c] = libm::sqrt(sr * sr + si * si);
        }
    }
    Ok(mag)
}

pub const FAP_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FapProfile {
    /// Annulus centers in normalized frequency `f / f_Nyquist`.
    pub freq: Vec<f64>,
    /// `log10(m_k / m_0)`, where `m_k` is the mean DFT magnitude of annulus `k`.
    pub values: Vec<f64>,
}

/// Frequency attenuation profile with the default number of annuli.
pub fn fap(img: &[f64], height: usize, width: usize) -> Result<FapProfile> {
    fap_with_bins(img, height, width, FAP_BINS)
}

/// Radial profile of DFT magnitudes. The DC term and the corners beyond the
/// Nyquist radius are left out; the remaining frequencies `0 < f <= 1` are
/// split into equal-width annuli whose mean magnitudes are expressed as
/// `log10` ratios to the lowest annulus.
pub fn fap_with_bins(img: &[f64], height: usize, width: usize, bins: usize) -> Result<FapProfile> {
    if height != width {
        return Err(Error::NonSquare { height, width });
    }
    let n = height;
    if n < 8 {
        return Err(Error::InvalidArgument(alloc::format!("FAP needs a side of at least 8, got {n}")));
    }
    let nb = bins.min(n / 2).max(1);
    let mag = dft2_magnitude(img, n)?;
    let half = (n / 2) as f64;
    let signed = |k: usize| -> f64 {
        if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let mut sum = vec![0.0f64; nb];
    let mut cnt = vec![0usize; nb];
    for u in 0..n {
        for v in 0..n {
            if u == 0 && v == 0 {
                continue;
            }
            let rho = libm::sqrt(signed(u) * signed(u) + signed(v) * signed(v)) / half;
            if rho > 1.0 + 1e-12 {
                continue;
            }
            let idx = (libm::ceil(rho * nb as f64 - 1e-9) as usize).clamp(1, nb) - 1;
            sum[idx] += mag[u * n + v];
            cnt[idx] += 1;
        }
    }
    let means: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    let anchor = means[0];
    if !(anchor > 0.0) {
        return Err(Error::InvalidArgument("image has no non-constant low-frequency content".into()));
    }
    Ok(FapProfile {
        freq: (0..nb).map(|k| (k as f64 + 0.5) / nb as f64).collect(),
        values: means.iter().map(|&m| libm::log10(m.max(f64::MIN_POSITIVE) / anchor)).collect(),
    })
}
