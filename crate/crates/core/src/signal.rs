//! Records, sinusoidal models and elementary signal evaluation.
//!
//! Time is in kyr and frequencies are angular (rad/kyr) everywhere inside
//! the crate. Conversion to cyclic frequency or period happens only when
//! reporting.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One irregularly sampled real series with its nominal sampling instants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Record {
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if times.len() != values.len() {
            return Err(Error::arg(format!(
                "record {id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::arg(format!("record {id}: needs at least 2 samples")));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::arg(format!(
                "record {id}: sampling time {t} is negative or non-finite"
            )));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::arg(format!(
                "record {id}: times not strictly increasing at index {}",
                w + 1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg(format!("record {id}: non-finite value")));
        }
        Ok(Self { id, times, values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population standard deviation of the values.
    pub fn std_dev(&self) -> f64 {
        let mu = self.mean();
        let var =
            self.values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / self.values.len() as f64;
        var.sqrt()
    }

    /// Zero-mean, unit-variance copy. A constant record is only centred.
    pub fn standardized(&self) -> Record {
        let mu = self.mean();
        let sd = self.std_dev();
        let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        Record {
            id: self.id.clone(),
            times: self.times.clone(),
            values: self.values.iter().map(|v| (v - mu) * scale).collect(),
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Record> {
        Record::new(self.id.clone(), self.times.clone(), values)
    }
}

/// A non-empty collection of records with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    records: Vec<Record>,
}

impl RecordSet {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::arg("record set must contain at least one record"));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::arg(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.records.iter().map(Record::len).sum()
    }

    pub fn standardized(&self) -> RecordSet {
        RecordSet {
            records: self.records.iter().map(Record::standardized).collect(),
        }
    }

    /// Longest time span over all records.
    pub fn max_span(&self) -> f64 {
        self.records.iter().map(Record::span).fold(0.0, f64::max)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Record> {
        self.records.iter()
    }
}

impl<'a> IntoIterator for &'a RecordSet {
    type Item = &'a Record;
    type IntoIter = std::slice::Iter<'a, Record>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_phase(phi: f64) -> f64 {
    let mut p = phi % (2.0 * PI);
    if p <= -PI {
        p += 2.0 * PI;
    } else if p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// K shared frequencies with per-record amplitudes and phases.
///
/// `amplitudes[m][k]` and `phases[m][k]` belong to record `m` and
/// component `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidModel {
    omegas: Vec<f64>,
    amplitudes: Vec<Vec<f64>>,
    phases: Vec<Vec<f64>>,
}

impl SinusoidModel {
    pub fn new(omegas: Vec<f64>, amplitudes: Vec<Vec<f64>>, phases: Vec<Vec<f64>>) -> Result<Self> {
        let k = omegas.len();
        if k == 0 {
            return Err(Error::arg("model needs at least one frequency"));
        }
        if omegas.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::arg("frequencies must be finite and positive"));
        }
        if omegas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("frequencies must be strictly increasing"));
        }
        if amplitudes.is_empty() || amplitudes.len() != phases.len() {
            return Err(Error::arg("amplitude and phase tables need one row per record"));
        }
        for (a, p) in amplitudes.iter().zip(&phases) {
            if a.len() != k || p.len() != k {
                return Err(Error::arg("amplitude/phase rows must have one entry per frequency"));
            }
            if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::arg("amplitudes must be finite and non-negative"));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::arg("phases must be finite"));
            }
        }
        let phases = phases
            .into_iter()
            .map(|row| row.into_iter().map(wrap_phase).collect())
            .collect();
        Ok(Self {
            omegas,
            amplitudes,
            phases,
        })
    }

    /// Same amplitudes and phases for every one of `records` records.
    pub fn shared(omegas: Vec<f64>, amplitudes: Vec<f64>, phases: Vec<f64>, records: usize) -> Result<Self> {
        Self::new(omegas, vec![amplitudes; records], vec![phases; records])
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn amplitudes(&self) -> &[Vec<f64>] {
        &self.amplitudes
    }

    pub fn phases(&self) -> &[Vec<f64>] {
        &self.phases
    }

    pub fn n_components(&self) -> usize {
        self.omegas.len()
    }

    pub fn n_records(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn periods(&self) -> Vec<f64> {
        self.omegas.iter().map(|w| 2.0 * PI / w).collect()
    }

    /// Parameter vector ordered `[omega | rho(1..M) | phi(1..M)]`.
    pub fn to_theta(&self) -> Vec<f64> {
        let mut theta = self.omegas.clone();
        for row in &self.amplitudes {
            theta.extend_from_slice(row);
        }
        for row in &self.phases {
            theta.extend_from_slice(row);
        }
        theta
    }

    /// Inverse of [`to_theta`](Self::to_theta). Does not re-validate ordering,
    /// so intermediate optimizer iterates may be represented.
    pub fn from_theta(theta: &[f64], k: usize, m: usize) -> Self {
        assert_eq!(theta.len(), k + 2 * k * m, "theta has wrong length");
        let omegas = theta[..k].to_vec();
        let amplitudes = (0..m)
            .map(|r| theta[k + r * k..k + (r + 1) * k].to_vec())
            .collect();
        let off = k + k * m;
        let phases = (0..m)
            .map(|r| theta[off + r * k..off + (r + 1) * k].iter().map(|p| wrap_phase(*p)).collect())
            .collect();
        Self {
            omegas,
            amplitudes,
            phases,
        }
    }
}

/// Per-record sampling-time errors aligned with the record times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissamplingField {
    offsets: Vec<Vec<f64>>,
}

impl MissamplingField {
    pub fn new(offsets: Vec<Vec<f64>>) -> Self {
        Self { offsets }
    }

    pub fn zeros(records: &RecordSet) -> Self {
        Self {
            offsets: records.iter().map(|r| vec![0.0; r.len()]).collect(),
        }
    }

    /// Checks that the field has the same shape as the record times.
    pub fn check_shape(&self, records: &RecordSet) -> Result<()> {
        if self.offsets.len() != records.len() {
            return Err(Error::arg("missampling field has wrong record count"));
        }
        for (o, r) in self.offsets.iter().zip(records) {
            if o.len() != r.len() {
                return Err(Error::arg(format!(
                    "missampling for record {} has {} entries, expected {}",
                    r.id(),
                    o.len(),
                    r.len()
                )));
            }
        }
        Ok(())
    }

    pub fn offsets(&self) -> &[Vec<f64>] {
        &self.offsets
    }

    pub fn record(&self, m: usize) -> &[f64] {
        &self.offsets[m]
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.iter().flatten().all(|d| *d == 0.0)
    }
}

/// Evaluates the model for record `record_index` at `times`.
///
/// With `missampling` the sinusoids are evaluated at the perturbed instants
/// `t + delta`; without it this is the misspecified mean at the nominal
/// instants.
pub fn evaluate_signal(
    model: &SinusoidModel,
    record_index: usize,
    times: &[f64],
    missampling: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if record_index >= model.n_records() {
        return Err(Error::arg(format!(
            "record index {record_index} out of range for {} records",
            model.n_records()
        )));
    }
    if let Some(d) = missampling {
        if d.len() != times.len() {
            return Err(Error::arg(format!(
                "missampling has {} entries for {} times",
                d.len(),
                times.len()
            )));
        }
    }
    let amps = &model.amplitudes[record_index];
    let phases = &model.phases[record_index];
    let out = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let t = match missampling {
                Some(d) => t + d[i],
                None => t,
            };
            model
                .omegas
                .iter()
                .zip(amps)
                .zip(phases)
                .map(|((w, a), p)| a * (w * t + p).cos())
                .sum()
        })
        .collect();
    Ok(out)
}

fn component_power(model: &SinusoidModel, record_index: usize) -> Result<f64> {
    let amps = model
        .amplitudes
        .get(record_index)
        .ok_or_else(|| Error::arg(format!("record index {record_index} out of range")))?;
    Ok(amps.iter().map(|a| a * a).sum())
}

/// SNR of record `record_index` in dB: `10 log10(sum rho^2 / (2 sigma^2))`.
pub fn snr_db(model: &SinusoidModel, record_index: usize, noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(Error::arg("noise variance must be positive"));
    }
    let p = component_power(model, record_index)?;
    Ok(10.0 * (p / (2.0 * noise_var)).log10())
}

/// Noise variance that gives record `record_index` the requested SNR.
pub fn noise_var_for_snr(model: &SinusoidModel, record_index: usize, snr_db: f64) -> Result<f64> {
    let p = component_power(model, record_index)?;
    noise_var_from_power(p, snr_db)
}

/// Noise variance giving the requested SNR on the record-averaged signal power.
pub fn noise_var_for_mean_snr(model: &SinusoidModel, snr_db: f64) -> Result<f64> {
    let m = model.n_records();
    let mut p = 0.0;
    for r in 0..m {
        p += component_power(model, r)?;
    }
    noise_var_from_power(p / m as f64, snr_db)
}

fn noise_var_from_power(power: f64, snr_db: f64) -> Result<f64> {
    if !(power > 0.0) {
        return Err(Error::arg("model has no component with positive amplitude"));
    }
    if !snr_db.is_finite() {
        return Err(Error::arg("SNR must be finite"));
    }
    Ok(power / (2.0 * 10f64.powf(snr_db / 10.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn milankovitch(records: usize) -> SinusoidModel {
        let omegas = [100.0, 41.0, 23.0, 19.0].iter().map(|p| 2.0 * PI / p).collect();
        SinusoidModel::shared(omegas, vec![1.0, 0.8, 0.6, 0.6], vec![0.0; 4], records).unwrap()
    }

    #[test]
    fn cosine_at_origin_is_one() {
        let m = SinusoidModel::shared(vec![2.0 * PI], vec![1.0], vec![0.0], 1).unwrap();
        let s = evaluate_signal(&m, 0, &[0.0], Some(&[0.0])).unwrap();
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn missampling_that_cancels_time_gives_phase_only() {
        let m = SinusoidModel::shared(vec![0.37], vec![1.0], vec![0.0], 1).unwrap();
        let t = [0.0, 1.5, 7.0, 123.4];
        let d: Vec<f64> = t.iter().map(|x| -x).collect();
        for v in evaluate_signal(&m, 0, &t, Some(&d)).unwrap() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_resummation() {
        // Independent evaluation with compensated summation.
        let m = SinusoidModel::new(
            vec![0.05, 0.21, 0.9],
            vec![vec![1.3, 0.2, 0.7]],
            vec![vec![0.4, -2.0, 3.0]],
        )
        .unwrap();
        let t = [0.3, 17.0, 44.4, 101.9, 399.0];
        let got = evaluate_signal(&m, 0, &t, None).unwrap();
        for (i, &ti) in t.iter().enumerate() {
            let mut sum = 0.0f64;
            let mut c = 0.0f64;
            for k in 0..3 {
                let term = m.amplitudes()[0][k] * (m.omegas()[k] * ti + m.phases()[0][k]).cos();
                let y = term - c;
                let s = sum + y;
                c = (s - sum) - y;
                sum = s;
            }
            assert!((got[i] - sum).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let m = milankovitch(1);
        assert!(evaluate_signal(&m, 0, &[1.0, 2.0], Some(&[0.0])).is_err());
        assert!(evaluate_signal(&m, 1, &[1.0], None).is_err());
    }

    #[test]
    fn snr_examples() {
        let m = milankovitch(1);
        assert!(snr_db(&m, 0, 1.18).unwrap().abs() < 1e-12);
        assert!((snr_db(&m, 0, 1.0).unwrap() - 10.0 * 1.18f64.log10()).abs() < 1e-12);
        assert!((snr_db(&m, 0, 1.0).unwrap() - 0.719).abs() < 1e-3);
        let single = SinusoidModel::shared(vec![1.0], vec![2f64.sqrt()], vec![0.0], 1).unwrap();
        assert!(snr_db(&single, 0, 1.0).unwrap().abs() < 1e-12);
        assert!(snr_db(&single, 0, 0.0).is_err());
        assert!(snr_db(&single, 0, -1.0).is_err());
    }

    #[test]
    fn noise_var_examples() {
        let single = SinusoidModel::shared(vec![1.0], vec![2f64.sqrt()], vec![0.0], 1).unwrap();
        assert!((noise_var_for_snr(&single, 0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((noise_var_for_snr(&milankovitch(1), 0, 0.0).unwrap() - 1.18).abs() < 1e-12);
        let zero = SinusoidModel::shared(vec![1.0], vec![0.0], vec![0.0], 1).unwrap();
        assert!(noise_var_for_snr(&zero, 0, 0.0).is_err());
    }

    #[test]
    fn phases_are_wrapped() {
        let m = SinusoidModel::shared(vec![1.0, 2.0], vec![1.0, 1.0], vec![3.0 * PI, -PI], 1).unwrap();
        assert!((m.phases()[0][0] - PI).abs() < 1e-12);
        assert!((m.phases()[0][1] - PI).abs() < 1e-12);
    }

    #[test]
    fn record_invariants() {
        assert!(Record::new("a", vec![0.0], vec![1.0]).is_err());
        assert!(Record::new("a", vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(Record::new("a", vec![-1.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(Record::new("a", vec![0.0, 1.0], vec![1.0]).is_err());
        let r = Record::new("a", vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        assert!(RecordSet::new(vec![r.clone(), r]).is_err());
        assert!(RecordSet::new(vec![]).is_err());
    }

    #[test]
    fn standardization() {
        let r = Record::new("a", vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let s = r.standardized();
        assert!(s.mean().abs() < 1e-15);
        assert!((s.std_dev() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn theta_round_trip() {
        let m = milankovitch(3);
        let back = SinusoidModel::from_theta(&m.to_theta(), 4, 3);
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn amplitude_linearity(rho in 0.01f64..3.0, w in 0.01f64..1.0, phi in -3.0f64..3.0,
                               t in proptest::collection::vec(0.0f64..500.0, 1..8)) {
            let a = SinusoidModel::shared(vec![w, w + 0.5], vec![rho, 0.7], vec![phi, 0.1], 1).unwrap();
            let b = SinusoidModel::shared(vec![w, w + 0.5], vec![2.0 * rho, 0.7], vec![phi, 0.1], 1).unwrap();
            let only = SinusoidModel::shared(vec![w, w + 0.5], vec![0.0, 0.7], vec![phi, 0.1], 1).unwrap();
            let sa = evaluate_signal(&a, 0, &t, None).unwrap();
            let sb = evaluate_signal(&b, 0, &t, None).unwrap();
            let s0 = evaluate_signal(&only, 0, &t, None).unwrap();
            for i in 0..t.len() {
                let ca = sa[i] - s0[i];
                let cb = sb[i] - s0[i];
                prop_assert!((cb - 2.0 * ca).abs() <= 1e-12 * (1.0 + cb.abs()));
            }
        }

        #[test]
        fn zero_missampling_is_bitwise_identical(w in 0.01f64..1.0, phi in -3.0f64..3.0,
                                                 t in proptest::collection::vec(0.0f64..500.0, 1..8)) {
            let m = SinusoidModel::shared(vec![w], vec![1.0], vec![phi], 1).unwrap();
            let zeros = vec![0.0; t.len()];
            let a = evaluate_signal(&m, 0, &t, None).unwrap();
            let b = evaluate_signal(&m, 0, &t, Some(&zeros)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn snr_inverse_round_trip(amps in proptest::collection::vec(0.01f64..5.0, 1..5), snr in -20.0f64..60.0) {
            let k = amps.len();
            let omegas = (1..=k).map(|i| i as f64 * 0.1).collect();
            let m = SinusoidModel::shared(omegas, amps, vec![0.0; k], 1).unwrap();
            let v = noise_var_for_snr(&m, 0, snr).unwrap();
            prop_assert!((snr_db(&m, 0, v).unwrap() - snr).abs() < 1e-12);
        }
    }
}
