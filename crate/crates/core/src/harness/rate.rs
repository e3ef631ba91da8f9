//! Power-law rate fits and horizontal-shift gain estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::RunRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    #[default]
    Median,
}

/// OLS fit of `log(risk)` on `log(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr_slope: f64,
    pub points_used: usize,
}

/// Per-`n` aggregated risk over successful trials, in increasing `n`.
pub fn aggregate(records: &[RunRecord], aggregation: Aggregation) -> Vec<(usize, f64)> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.failed()) {
        by_n.entry(r.n).or_default().push(r.risk_exact);
    }
    by_n.into_iter()
        .map(|(n, mut v)| {
            let value = match aggregation {
                Aggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
                Aggregation::Median => {
                    v.sort_by(f64::total_cmp);
                    let m = v.len() / 2;
                    if v.len() % 2 == 1 {
                        v[m]
                    } else {
                        0.5 * (v[m - 1] + v[m])
                    }
                }
            };
            (n, value)
        })
        .collect()
}

pub(crate) fn ols(points: &[(f64, f64)]) -> RateFit {
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let stderr_slope = if points.len() > 2 {
        (ssr / (m - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    RateFit {
        slope,
        intercept,
        stderr_slope,
        points_used: points.len(),
    }
}

fn log_curve(records: &[RunRecord], aggregation: Aggregation) -> Result<Vec<(f64, f64)>> {
    let agg = aggregate(records, aggregation);
    if agg.len() < 3 {
        return Err(Error::config(format!(
            "rate fit needs at least 3 distinct n values with successful trials (got {})",
            agg.len()
        )));
    }
    agg.iter()
        .map(|&(n, r)| {
            if r > 0.0 && r.is_finite() {
                Ok(((n as f64).ln(), r.ln()))
            } else {
                Err(Error::numerical(format!("aggregated risk {r} at n = {n} has no logarithm")))
            }
        })
        .collect()
}

pub fn fit_rate(records: &[RunRecord], aggregation: Aggregation) -> Result<RateFit> {
    Ok(ols(&log_curve(records, aggregation)?))
}

/// Paired-curve comparison of an invariant and a trivial experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    /// `ĝ` such that `risk_inv(n) ≈ risk_triv(ĝ·n)`.
    pub gain: f64,
    pub overlap_points: usize,
    pub invariant: RateFit,
    pub trivial: RateFit,
    /// `|slope_inv| − |slope_triv|`.
    pub slope_difference: f64,
    pub invariant_curve: Vec<(usize, f64)>,
    pub trivial_curve: Vec<(usize, f64)>,
}

fn interpolate(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let first = curve.first()?.0;
    let last = curve.last()?.0;
    if x < first - 1e-12 || x > last + 1e-12 {
        return None;
    }
    let i = curve.partition_point(|p| p.0 < x).clamp(1, curve.len() - 1);
    let (x0, y0) = curve[i - 1];
    let (x1, y1) = curve[i];
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

/// Least-squares horizontal shift `u` (in log n) with `inv(x) ≈ triv(x + u)`,
/// using piecewise-linear interpolation of the trivial curve. Returns the
/// shift and the number of overlapping points.
pub fn horizontal_shift(inv: &[(f64, f64)], triv: &[(f64, f64)]) -> Result<(f64, usize)> {
    let span = triv.last().map_or(0.0, |p| p.0) - triv.first().map_or(0.0, |p| p.0);
    let total = span + inv.last().map_or(0.0, |p| p.0) - inv.first().map_or(0.0, |p| p.0);
    let cost = |u: f64| -> Option<(f64, usize)> {
        let mut sum = 0.0;
        let mut k = 0;
        for &(x, y) in inv {
            if let Some(t) = interpolate(triv, x + u) {
                sum += (y - t).powi(2);
                k += 1;
            }
        }
        (k >= 3).then(|| (sum / k as f64, k))
    };
    let steps = 4000;
    let mut best: Option<(f64, f64, usize)> = None;
    for i in 0..=steps {
        let u = -total + 2.0 * total * i as f64 / steps as f64;
        if let Some((c, k)) = cost(u) {
            if best.is_none_or(|b| c < b.1) {
                best = Some((u, c, k));
            }
        }
    }
    let (mut u, _, _) = best.ok_or_else(|| Error::numerical("risk curves share fewer than 3 points at every shift"))?;
    // Golden-section refinement around the grid optimum.
    let h = 2.0 * total / steps as f64;
    let (mut a, mut b) = (u - h, u + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let c_at = |u: f64| cost(u).map_or(f64::INFINITY, |c| c.0);
    for _ in 0..60 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if c_at(c) < c_at(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let refined = 0.5 * (a + b);
    if c_at(refined) <= c_at(u) {
        u = refined;
    }
    let k = cost(u).map_or(0, |c| c.1);
    Ok((u, k))
}

pub fn gain_report(invariant: &[RunRecord], trivial: &[RunRecord], aggregation: Aggregation) -> Result<GainReport> {
    let inv = log_curve(invariant, aggregation)?;
    let triv = log_curve(trivial, aggregation)?;
    let (u, overlap) = horizontal_shift(&inv, &triv)?;
    let fi = ols(&inv);
    let ft = ols(&triv);
    Ok(GainReport {
        gain: u.exp(),
        overlap_points: overlap,
        invariant: fi,
        trivial: ft,
        slope_difference: fi.slope.abs() - ft.slope.abs(),
        invariant_curve: aggregate(invariant, aggregation),
        trivial_curve: aggregate(trivial, aggregation),
    })
}
