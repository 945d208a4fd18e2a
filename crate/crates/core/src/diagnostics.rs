//! Distribution summaries of noise estimates and structure of guidance masks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceState, StepMasks};

pub const KDE_GRID_POINTS: usize = 512;
pub const HISTOGRAM_BINS: usize = 64;
/// Grid padding beyond the data range, in bandwidths.
pub const KDE_PADDING: f64 = 4.0;

const KERNEL_CUTOFF: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl Kde {
    /// Trapezoid-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub histogram: Histogram,
    pub kde: Kde,
}

/// Silverman's rule, `1.06 σ n^{-1/5}`.
pub fn silverman_bandwidth(std_dev: f64, n: usize) -> f64 {
    1.06 * std_dev * (n as f64).powf(-0.2)
}

/// Sample moments, a histogram and a Gaussian KDE of `values`.
///
/// Moments are population (divide-by-`n`) moments. Skewness and kurtosis of a
/// constant input are reported as zero. The KDE bandwidth defaults to
/// Silverman's rule; a degenerate spread falls back to `1e-3 · max(1, |mean|)`.
pub fn distribution_report(values: &[f64], bandwidth: Option<f64>) -> Result<DistributionReport> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "distribution report needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "distribution report input must be finite".into(),
        ));
    }
    if let Some(h) = bandwidth {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Domain(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);

    let h = bandwidth.unwrap_or_else(|| {
        let h = silverman_bandwidth(m2.sqrt(), values.len());
        if h > 0.0 {
            h
        } else {
            1e-3 * mean.abs().max(1.0)
        }
    });

    Ok(DistributionReport {
        count: values.len(),
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        histogram: histogram(&sorted, lo, hi),
        kde: kde(&sorted, lo, hi, h),
    })
}

fn histogram(sorted: &[f64], lo: f64, hi: f64) -> Histogram {
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| lo + width * i as f64)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for v in sorted {
        let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

fn kde(sorted: &[f64], lo: f64, hi: f64, h: f64) -> Kde {
    let start = lo - KDE_PADDING * h;
    let step = (hi - lo + 2.0 * KDE_PADDING * h) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| start + step * i as f64)
        .collect();
    let mut first = 0;
    let density = grid
        .iter()
        .map(|&x| {
            // Kernel contributions beyond 8h are below 1e-14 and skipped.
            while first < sorted.len() && sorted[first] < x - KERNEL_CUTOFF * h {
                first += 1;
            }
            let sum: f64 = sorted[first..]
                .iter()
                .take_while(|&&v| v <= x + KERNEL_CUTOFF * h)
                .map(|&v| {
                    let u = (x - v) / h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            sum * norm
        })
        .collect();
    Kde {
        bandwidth: h,
        grid,
        density,
    }
}

impl DistributionReport {
    /// One row per KDE grid point: `x,density`.
    pub fn write_kde_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "density"])?;
        for (x, d) in self.kde.grid.iter().zip(&self.kde.density) {
            w.write_record([x.to_string(), d.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per histogram bin: `lower,upper,count`.
    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lower", "upper", "count"])?;
        for (e, c) in self.histogram.edges.windows(2).zip(&self.histogram.counts) {
            w.write_record([e[0].to_string(), e[1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub first: usize,
    pub second: usize,
    pub mean_jaccard: f64,
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    /// Nonzero mask entries over all steps and concepts.
    pub nonzero_fraction: f64,
    /// `[step][concept]` nonzero fraction.
    pub per_step_series: Vec<Vec<f64>>,
    pub support_overlap: Vec<PairOverlap>,
}

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64
}

/// Sparsity and pairwise overlap of recorded per-step concept masks.
pub fn mask_report(steps: &[StepMasks]) -> Result<MaskReport> {
    if steps.is_empty() {
        return Err(Error::Domain("no recorded masks".into()));
    }
    let concepts = steps[0].len();
    if let Some(bad) = steps.iter().position(|s| s.len() != concepts) {
        return Err(Error::LengthMismatch {
            what: "masks per step",
            expected: concepts,
            got: steps[bad].len(),
        });
    }
    let (mut on, mut total) = (0usize, 0usize);
    for m in steps.iter().flatten() {
        on += m.iter().filter(|&&b| b).count();
        total += m.len();
    }
    let per_step_series = steps
        .iter()
        .map(|s| s.iter().map(|m| fraction(m)).collect())
        .collect();
    let mut support_overlap = Vec::new();
    for first in 0..concepts {
        for second in first + 1..concepts {
            let per_step: Vec<f64> = steps
                .iter()
                .map(|s| jaccard(&s[first], &s[second]))
                .collect();
            support_overlap.push(PairOverlap {
                first,
                second,
                mean_jaccard: per_step.iter().sum::<f64>() / per_step.len() as f64,
                per_step,
            });
        }
    }
    Ok(MaskReport {
        nonzero_fraction: if total == 0 {
            0.0
        } else {
            on as f64 / total as f64
        },
        per_step_series,
        support_overlap,
    })
}

/// [`mask_report`] over the masks a run recorded.
pub fn mask_report_for(state: &GuidanceState) -> Result<MaskReport> {
    let masks = state
        .mask_log()
        .ok_or_else(|| Error::Domain("run did not record masks".into()))?;
    mask_report(masks)
}

impl MaskReport {
    /// One row per step: `step,concept_0,…,concept_{k−1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let concepts = self.per_step_series.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((0..concepts).map(|i| format!("concept_{i}")));
        w.write_record(&header)?;
        for (t, row) in self.per_step_series.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
