//! Synthetic ice-core-like records.
//!
//! Sampling patterns are modelled as a homogeneous Poisson process up to a
//! change point followed by a nonhomogeneous one whose rate is a binned
//! empirical estimate. Missampling is Gaussian with a per-sample standard
//! deviation chosen so neighbouring samples rarely swap order.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::signal::{evaluate_signal, noise_var_for_mean_snr, MissamplingField, Record, RecordSet, SinusoidModel};

const TAIL_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub pattern_id: String,
    /// Number of samples in the homogeneous head.
    pub change_index: usize,
    pub t_first: f64,
    pub t_change: f64,
    pub t_end: f64,
    /// Head rate (samples per kyr).
    pub gamma: f64,
    /// Tail bin edges (`tail_rates.len() + 1` entries, from `t_change`).
    pub tail_edges: Vec<f64>,
    pub tail_rates: Vec<f64>,
    /// No change point was detected; the whole pattern is the head.
    pub homogeneous: bool,
}

impl IntensityModel {
    /// Rate of the fitted process at time `t`.
    pub fn rate(&self, t: f64) -> f64 {
        if t <= self.t_change || self.homogeneous {
            return self.gamma;
        }
        let j = self.tail_edges.partition_point(|&e| e < t).saturating_sub(1);
        self.tail_rates[j.min(self.tail_rates.len() - 1)]
    }
}

fn check_pattern(times: &[f64], min: usize) -> Result<()> {
    if times.len() < min {
        return Err(Error::arg(format!("pattern needs at least {min} samples, got {}", times.len())));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("pattern times must be finite and strictly increasing"));
    }
    Ok(())
}

/// ML head rate over the first `c` samples.
pub fn head_rate(times: &[f64], c: usize) -> f64 {
    (c - 1) as f64 / (times[c - 1] - times[0])
}

/// Fits a homogeneous-then-binned intensity to a sampling pattern.
///
/// The change index maximises the two-rate profile likelihood. It is kept
/// only when the tail rate falls outside the head-rate confidence interval
/// `gamma +- z sqrt(gamma / c)`; otherwise the model is homogeneous.
pub fn fit_intensity(pattern_id: &str, times: &[f64], z: f64) -> Result<IntensityModel> {
    check_pattern(times, 10)?;
    let n = times.len();
    let t1 = times[0];
    let tn = times[n - 1];
    let homogeneous = IntensityModel {
        pattern_id: pattern_id.to_string(),
        change_index: n,
        t_first: t1,
        t_change: tn,
        t_end: tn,
        gamma: head_rate(times, n),
        tail_edges: vec![tn],
        tail_rates: vec![],
        homogeneous: true,
    };
    let min_seg = 5;
    let mut best: Option<(usize, f64)> = None;
    for c in min_seg..=(n - min_seg) {
        let head = head_rate(times, c);
        let tail = (n - c) as f64 / (tn - times[c - 1]);
        let ll = (c - 1) as f64 * (head.ln() - 1.0) + (n - c) as f64 * (tail.ln() - 1.0);
        if best.is_none_or(|(_, b)| ll > b) {
            best = Some((c, ll));
        }
    }
    let Some((c, _)) = best else {
        return Ok(homogeneous);
    };
    let gamma = head_rate(times, c);
    let tail = (n - c) as f64 / (tn - times[c - 1]);
    let half = z * (gamma / c as f64).sqrt();
    if (tail - gamma).abs() <= half {
        return Ok(homogeneous);
    }
    let t_change = times[c - 1];
    let tail_times = &times[c..];
    let bins = TAIL_BINS.min(tail_times.len());
    let mut edges = vec![t_change];
    for j in 1..bins {
        let idx = j * tail_times.len() / bins;
        // edge between consecutive samples so each bin holds its share
        edges.push(0.5 * (tail_times[idx - 1] + tail_times[idx]));
    }
    edges.push(tn);
    let rates = edges
        .windows(2)
        .map(|w| {
            let count = tail_times.iter().filter(|&&t| t > w[0] && t <= w[1]).count();
            count as f64 / (w[1] - w[0])
        })
        .collect();
    Ok(IntensityModel {
        pattern_id: pattern_id.to_string(),
        change_index: c,
        t_first: t1,
        t_change,
        t_end: tn,
        gamma,
        tail_edges: edges,
        tail_rates: rates,
        homogeneous: false,
    })
}

/// Draws a fresh sampling pattern from a fitted intensity.
pub fn sample_pattern<R: Rng + ?Sized>(model: &IntensityModel, rng: &mut R) -> Vec<f64> {
    let c = model.change_index;
    let mut times: Vec<f64> = (0..c)
        .map(|_| model.t_first + rng.random::<f64>() * (model.t_change - model.t_first))
        .collect();
    if !model.homogeneous {
        let max_rate = model.tail_rates.iter().copied().fold(0.0, f64::max);
        if max_rate > 0.0 {
            let mut t = model.t_change;
            loop {
                let u: f64 = rng.random();
                t += -(1.0 - u).ln() / max_rate;
                if t > model.t_end {
                    break;
                }
                if rng.random::<f64>() * max_rate <= model.rate(t) {
                    times.push(t);
                }
            }
        }
    }
    times.sort_by(f64::total_cmp);
    for i in 1..times.len() {
        if times[i] <= times[i - 1] {
            times[i] = times[i - 1] + 1e-9;
        }
    }
    times
}

/// Per-sample missampling standard deviation, `d_i / (sqrt 2 z)` with `d_i`
/// the smaller adjacent gap and `z` the `1 - swap_cap` normal quantile.
pub fn missampling_std(times: &[f64], swap_cap: f64) -> Result<Vec<f64>> {
    if !(swap_cap > 0.0 && swap_cap < 0.5) {
        return Err(Error::arg("swap cap must lie in (0, 0.5)"));
    }
    check_pattern(times, 2)?;
    let z = StdNormal::standard().inverse_cdf(1.0 - swap_cap);
    let n = times.len();
    Ok((0..n)
        .map(|i| {
            let left = if i > 0 { times[i] - times[i - 1] } else { f64::INFINITY };
            let right = if i + 1 < n { times[i + 1] - times[i] } else { f64::INFINITY };
            left.min(right) / (2f64.sqrt() * z)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub periods: Vec<f64>,
    pub base_amplitudes: Vec<f64>,
    /// Amplitude jitter standard deviation as a fraction of the base value.
    pub amplitude_jitter: f64,
    /// Phases are drawn uniformly on `[0, phase_max]`.
    pub phase_max: f64,
    pub swap_cap: f64,
    pub records: usize,
    pub missampling: bool,
    /// Normal quantile for the change-point confidence interval.
    pub change_point_z: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            periods: vec![100.0, 41.0, 23.0, 19.0],
            base_amplitudes: vec![1.0, 0.8, 0.6, 0.6],
            amplitude_jitter: 0.1,
            phase_max: PI / 5.0,
            swap_cap: 0.01,
            records: 3,
            missampling: false,
            change_point_z: 2.576,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.len() != self.base_amplitudes.len() {
            return Err(Error::arg("periods and base amplitudes must be non-empty and equal in length"));
        }
        if self.periods.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::arg("periods must be positive"));
        }
        if self.base_amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::arg("base amplitudes must be non-negative"));
        }
        if !(self.swap_cap > 0.0 && self.swap_cap < 0.5) {
            return Err(Error::arg("swap cap must lie in (0, 0.5)"));
        }
        if self.records == 0 {
            return Err(Error::arg("need at least one record"));
        }
        if !(self.amplitude_jitter >= 0.0) || !(self.phase_max >= 0.0) {
            return Err(Error::arg("jitter and phase range must be non-negative"));
        }
        Ok(())
    }

    /// Frequencies sorted ascending with their base amplitudes.
    pub fn components(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pairs: Vec<(f64, f64)> = self
            .periods
            .iter()
            .map(|p| 2.0 * PI / p)
            .zip(self.base_amplitudes.iter().copied())
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesized {
    pub records: RecordSet,
    pub truth: SinusoidModel,
    pub missampling: MissamplingField,
    pub noise_var: f64,
}

/// Draws one multi-record data set at the requested SNR.
///
/// The noise variance is shared by all records and set from the
/// record-averaged signal power of the drawn truth.
pub fn synthesize<R: Rng + ?Sized>(
    config: &SimConfig,
    patterns: &[IntensityModel],
    snr_db: f64,
    rng: &mut R,
) -> Result<Synthesized> {
    config.validate()?;
    if patterns.is_empty() {
        return Err(Error::arg("no sampling patterns supplied"));
    }
    let (omegas, base) = config.components();
    let m = config.records;
    let mut amplitudes = Vec::with_capacity(m);
    let mut phases = Vec::with_capacity(m);
    let mut all_times = Vec::with_capacity(m);
    let mut offsets = Vec::with_capacity(m);
    for r in 0..m {
        let times = sample_pattern(&patterns[r % patterns.len()], rng);
        let amps: Vec<f64> = base
            .iter()
            .map(|&b| {
                let jitter = Normal::new(0.0, config.amplitude_jitter * b).expect("finite std");
                (b + jitter.sample(rng)).max(0.0)
            })
            .collect();
        let ph: Vec<f64> = base.iter().map(|_| rng.random::<f64>() * config.phase_max).collect();
        let delta = if config.missampling {
            missampling_std(&times, config.swap_cap)?
                .into_iter()
                .map(|s| s * sample_std_normal(rng))
                .collect()
        } else {
            vec![0.0; times.len()]
        };
        amplitudes.push(amps);
        phases.push(ph);
        all_times.push(times);
        offsets.push(delta);
    }
    let truth = SinusoidModel::new(omegas, amplitudes, phases)?;
    let noise_var = noise_var_for_mean_snr(&truth, snr_db)?;
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::arg(e.to_string()))?;
    let mut recs = Vec::with_capacity(m);
    for (r, (times, delta)) in all_times.into_iter().zip(&offsets).enumerate() {
        let clean = evaluate_signal(&truth, r, &times, Some(delta))?;
        let values = clean.into_iter().map(|s| s + noise.sample(rng)).collect();
        recs.push(Record::new(format!("core{}", r + 1), times, values)?);
    }
    Ok(Synthesized {
        records: RecordSet::new(recs)?,
        truth,
        missampling: MissamplingField::new(offsets),
        noise_var,
    })
}

fn sample_std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Independent generator for `(stream, index)` derived from one seed.
pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha20Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) ^ index);
    rng
}

/// Deterministic stand-ins for three ice-core sampling patterns: dense,
/// regular sampling in the recent part and gaps that widen with age.
pub fn reference_patterns() -> Vec<(String, Vec<f64>)> {
    [
        ("vostok_like", 420.0, 110.0, 0.25, 0.8, 11u64),
        ("taylor_dome_like", 300.0, 60.0, 0.3, 1.5, 23),
        ("dome_f_like", 340.0, 80.0, 0.25, 0.7, 37),
    ]
    .into_iter()
    .map(|(id, end, knee, s0, s1, seed)| (id.to_string(), graded_pattern(end, knee, s0, s1, seed)))
    .collect()
}

fn graded_pattern(end: f64, knee: f64, s0: f64, s1: f64, seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = vec![t];
    loop {
        let base = if t < knee { s0 } else { s0 + (s1 - s0) * (t - knee) / (end - knee) };
        t += base * (0.7 + 0.6 * rng.random::<f64>());
        if t > end {
            break;
        }
        out.push(t);
    }
    out
}

/// Intensity models fitted to the built-in reference patterns.
pub fn reference_models(z: f64) -> Result<Vec<IntensityModel>> {
    reference_patterns()
        .iter()
        .map(|(id, t)| fit_intensity(id, t, z))
        .collect()
}
