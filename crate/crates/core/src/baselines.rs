//! Periodogram baselines: Lomb-Scargle, its mean over records, the
//! periodogram of the stacked series, and peak picking.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Record, RecordSet};

/// Hard cap on the number of baseline grid points.
pub const MAX_GRID_POINTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodogramMethod {
    LombScargle,
    Mean,
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodogramEstimate {
    pub grid: Vec<f64>,
    pub power: Vec<f64>,
    pub method: PeriodogramMethod,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::arg("empty frequency grid"));
    }
    if let Some(w) = grid.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::arg(format!(
            "grid frequency {w} is not positive; Lomb-Scargle is undefined at 0"
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("grid must be strictly increasing"));
    }
    Ok(())
}

/// Lomb-Scargle power at one frequency. Values are used as given.
fn ls_power(times: &[f64], values: &[f64], omega: f64) -> f64 {
    let (mut s2, mut c2) = (0.0, 0.0);
    for &t in times {
        let (s, c) = (2.0 * omega * t).sin_cos();
        s2 += s;
        c2 += c;
    }
    let tau = s2.atan2(c2) / (2.0 * omega);
    let (mut yc, mut ys, mut cc, mut ss) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in times.iter().zip(values) {
        let (s, c) = (omega * (t - tau)).sin_cos();
        yc += y * c;
        ys += y * s;
        cc += c * c;
        ss += s * s;
    }
    let term = |num: f64, den: f64| if den > 1e-12 * times.len() as f64 { num * num / den } else { 0.0 };
    0.5 * (term(yc, cc) + term(ys, ss))
}

fn ls_series(times: &[f64], values: &[f64], grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&w| ls_power(times, values, w)).collect()
}

/// Classical Lomb-Scargle periodogram with the per-frequency offset that
/// makes it invariant to a shift of the time axis. The record is not
/// centred here.
pub fn lomb_scargle(record: &Record, grid: &[f64]) -> Result<PeriodogramEstimate> {
    check_grid(grid)?;
    Ok(PeriodogramEstimate {
        grid: grid.to_vec(),
        power: ls_series(record.times(), record.values(), grid),
        method: PeriodogramMethod::LombScargle,
    })
}

/// Pointwise mean of the periodograms of the standardized records.
pub fn mean_periodogram(records: &RecordSet, grid: &[f64]) -> Result<PeriodogramEstimate> {
    check_grid(grid)?;
    let mut power = vec![0.0; grid.len()];
    for r in records.iter() {
        let r = r.standardized();
        for (acc, p) in power.iter_mut().zip(ls_series(r.times(), r.values(), grid)) {
            *acc += p;
        }
    }
    let m = records.len() as f64;
    power.iter_mut().for_each(|p| *p /= m);
    Ok(PeriodogramEstimate {
        grid: grid.to_vec(),
        power,
        method: PeriodogramMethod::Mean,
    })
}

/// Periodogram of all standardized records merged into one time-sorted
/// series. Repeated times across records are kept.
pub fn stacked_periodogram(records: &RecordSet, grid: &[f64]) -> Result<PeriodogramEstimate> {
    check_grid(grid)?;
    let mut pairs: Vec<(f64, f64)> = records
        .iter()
        .flat_map(|r| {
            let r = r.standardized();
            r.times().iter().copied().zip(r.values().iter().copied()).collect::<Vec<_>>()
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (times, values): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(PeriodogramEstimate {
        grid: grid.to_vec(),
        power: ls_series(&times, &values, grid),
        method: PeriodogramMethod::Stacked,
    })
}

/// Uniform grid on `(0, omega_max]`, four points per Rayleigh resolution
/// cell `2 pi / T` of the longest record, at most [`MAX_GRID_POINTS`] points.
pub fn baseline_grid(records: &RecordSet, omega_max: f64) -> Result<Vec<f64>> {
    let span = records.max_span();
    if !(omega_max > 0.0) || !(span > 0.0) {
        return Err(Error::arg("baseline grid needs positive omega_max and record span"));
    }
    let mut step = 2.0 * PI / (4.0 * span);
    let mut n = (omega_max / step).floor() as usize;
    if n > MAX_GRID_POINTS {
        n = MAX_GRID_POINTS;
        step = omega_max / n as f64;
    }
    if n == 0 {
        return Err(Error::arg("omega_max is below the first grid step"));
    }
    Ok((1..=n).map(|i| i as f64 * step).collect())
}

/// The `k` largest strict local maxima, in ascending frequency.
pub fn pick_peaks(est: &PeriodogramEstimate, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::arg("need k >= 1"));
    }
    let p = &est.power;
    let mut maxima: Vec<usize> = (1..p.len().saturating_sub(1))
        .filter(|&i| p[i] > p[i - 1] && p[i] > p[i + 1])
        .collect();
    if maxima.len() < k {
        return Err(Error::TooFewPeaks {
            requested: k,
            found: maxima.iter().map(|&i| est.grid[i]).collect(),
        });
    }
    maxima.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut out: Vec<f64> = maxima[..k].iter().map(|&i| est.grid[i]).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}
