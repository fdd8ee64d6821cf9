//! Two-sample distances and mixture-specific quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Condition;
use crate::ndcore::Tensor;

/// Kernel values are accumulated as integers in units of 2^-62 so that the
/// sum is independent of summation order.
const FIXED_SCALE: f64 = (1u64 << 62) as f64;

/// Points used to estimate the median-distance bandwidth.
const BANDWIDTH_POINTS: usize = 2000;

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::invalid(format!("{op} needs nonempty sample sets")));
    }
    Ok(())
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn sorted_rows(t: &Tensor) -> Vec<&[f64]> {
    let mut rows: Vec<&[f64]> = t.data().chunks_exact(t.cols()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

/// Median pairwise distance over `a ∪ b`, estimated on an evenly strided
/// subset of the lexicographically sorted union (order-independent).
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "median_bandwidth")?;
    let union = Tensor::vstack(&[a, b])?;
    let rows = sorted_rows(&union);
    let stride = rows.len().div_ceil(BANDWIDTH_POINTS).max(1);
    let pick: Vec<&[f64]> = rows.iter().step_by(stride).copied().collect();
    let mut d = Vec::with_capacity(pick.len() * pick.len() / 2);
    for i in 0..pick.len() {
        for j in 0..i {
            d.push(sq_dist(pick[i], pick[j]));
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let h = m.sqrt();
    Ok(if h > 0.0 { h } else { 1.0 })
}

fn kernel_sum(a: &[&[f64]], b: &[&[f64]], inv_two_h2: f64, symmetric: bool) -> i128 {
    let fixed = |d2: f64| ((-d2 * inv_two_h2).exp() * FIXED_SCALE).round() as i128;
    let mut total: i128 = 0;
    if symmetric {
        for i in 0..a.len() {
            let mut row: i128 = 0;
            for j in 0..i {
                row += fixed(sq_dist(a[i], a[j]));
            }
            total += 2 * row + fixed(0.0);
        }
    } else {
        for u in a {
            for v in b {
                total += fixed(sq_dist(u, v));
            }
        }
    }
    total
}

/// Biased (V-statistic) squared MMD with an RBF kernel. `bandwidth = None`
/// uses [`median_bandwidth`]. Exactly invariant to row order.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    check_pair(a, b, "mmd_rbf")?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth must be positive, got {h}"))),
        None => median_bandwidth(a, b)?,
    };
    let inv = 1.0 / (2.0 * h * h);
    let ra: Vec<&[f64]> = a.data().chunks_exact(a.cols()).collect();
    let rb: Vec<&[f64]> = b.data().chunks_exact(b.cols()).collect();
    let (n, m) = (ra.len() as f64, rb.len() as f64);
    let kxx = kernel_sum(&ra, &ra, inv, true) as f64 / FIXED_SCALE / (n * n);
    let kyy = kernel_sum(&rb, &rb, inv, true) as f64 / FIXED_SCALE / (m * m);
    let kxy = kernel_sum(&ra, &rb, inv, false) as f64 / FIXED_SCALE / (n * m);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic).
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "energy_distance")?;
    let ra: Vec<&[f64]> = a.data().chunks_exact(a.cols()).collect();
    let rb: Vec<&[f64]> = b.data().chunks_exact(b.cols()).collect();
    let mean = |x: &[&[f64]], y: &[&[f64]]| {
        let s: f64 = x.iter().map(|u| y.iter().map(|v| sq_dist(u, v).sqrt()).sum::<f64>()).sum();
        s / (x.len() * y.len()) as f64
    };
    Ok(2.0 * mean(&ra, &rb) - mean(&ra, &ra) - mean(&rb, &rb))
}

/// Fraction of centers that attract at least `min_fraction` of the samples
/// within `assign_radius`.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], assign_radius: f64, min_fraction: f64) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::invalid("mode_coverage needs at least one center"));
    }
    if samples.rank() != 2 || samples.cols() != 2 {
        return Err(Error::shape("mode_coverage", samples.shape(), &[2]));
    }
    let n = samples.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let r2 = assign_radius * assign_radius;
    let covered = centers
        .iter()
        .filter(|c| {
            let hits = samples
                .data()
                .chunks_exact(2)
                .filter(|p| sq_dist(p, &c[..]) <= r2)
                .count();
            hits as f64 >= min_fraction * n as f64
        })
        .count();
    Ok(covered as f64 / centers.len() as f64)
}

fn nearest(p: &[f64], centers: &[[f64; 2]]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Fraction of samples whose nearest center is their conditioning class.
pub fn conditional_accuracy(samples: &Tensor, cond: &[Condition], centers: &[[f64; 2]]) -> Result<f64> {
    if samples.rank() != 2 || samples.cols() != 2 || samples.rows() != cond.len() {
        return Err(Error::shape("conditional_accuracy", samples.shape(), &[cond.len(), 2]));
    }
    if centers.is_empty() {
        return Err(Error::invalid("conditional_accuracy needs at least one center"));
    }
    if cond.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, c) in samples.data().chunks_exact(2).zip(cond) {
        let k = c
            .class()
            .ok_or_else(|| Error::invalid("conditional_accuracy needs class conditions, found null"))?;
        if nearest(p, centers) == k {
            hits += 1;
        }
    }
    Ok(hits as f64 / cond.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub generator: String,
    pub seed: u64,
    pub n_samples: usize,
    pub mmd2: f64,
    pub energy_distance: f64,
    pub mode_coverage: f64,
    pub conditional_accuracy: f64,
}

impl MetricReport {
    pub const HEADER: [&'static str; 7] = [
        "generator",
        "seed",
        "n_samples",
        "mmd2",
        "energy_distance",
        "mode_coverage",
        "conditional_accuracy",
    ];

    pub fn cells(&self) -> Vec<String> {
        use crate::io::fmt_f64;
        vec![
            self.generator.clone(),
            self.seed.to_string(),
            self.n_samples.to_string(),
            fmt_f64(self.mmd2),
            fmt_f64(self.energy_distance),
            fmt_f64(self.mode_coverage),
            fmt_f64(self.conditional_accuracy),
        ]
    }
}

/// Everything needed to score a sample set against ground truth.
#[derive(Clone, Debug)]
pub struct Reference {
    pub data: Tensor,
    pub centers: Vec<[f64; 2]>,
    pub assign_radius: f64,
    pub min_fraction: f64,
    pub conditional: bool,
}

impl Reference {
    pub fn report(&self, generator: &str, seed: u64, samples: &Tensor, cond: &[Condition]) -> Result<MetricReport> {
        let conditional_accuracy = if self.conditional {
            conditional_accuracy(samples, cond, &self.centers)?
        } else {
            f64::NAN
        };
        Ok(MetricReport {
            generator: generator.to_string(),
            seed,
            n_samples: samples.rows(),
            mmd2: mmd_rbf(samples, &self.data, None)?,
            energy_distance: energy_distance(samples, &self.data)?,
            mode_coverage: mode_coverage(samples, &self.centers, self.assign_radius, self.min_fraction)?,
            conditional_accuracy,
        })
    }
}

/// Median of a nonempty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
