//! Integrated wideband dictionaries and real narrowband matrices.
//!
//! Only non-negative frequencies are materialised. For a real series the
//! negative-frequency half of a wideband dictionary is the elementwise
//! conjugate of the positive half, so a reconstruction is `2 Re(D beta)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Record, RecordSet};

/// Ordered, disjoint frequency bands `[start_c, end_c]` in rad/kyr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandGrid {
    starts: Vec<f64>,
    ends: Vec<f64>,
}

impl BandGrid {
    pub fn new(starts: Vec<f64>, ends: Vec<f64>) -> Result<Self> {
        if starts.len() != ends.len() {
            return Err(Error::arg("band starts and ends differ in length"));
        }
        if starts.is_empty() {
            return Err(Error::arg("band grid is empty"));
        }
        for (c, (&s, &e)) in starts.iter().zip(&ends).enumerate() {
            if !(s.is_finite() && e.is_finite()) || s < 0.0 {
                return Err(Error::arg(format!("band {c} has invalid edges [{s}, {e}]")));
            }
            if e <= s {
                return Err(Error::arg(format!("band {c} has zero or negative width")));
            }
            if c > 0 && s < ends[c - 1] {
                return Err(Error::arg(format!("band {c} overlaps or precedes band {}", c - 1)));
            }
        }
        Ok(Self { starts, ends })
    }

    /// `count` equal bands covering `[0, omega_max]`.
    pub fn uniform(omega_max: f64, count: usize) -> Result<Self> {
        if !(omega_max > 0.0) || count == 0 {
            return Err(Error::arg("uniform grid needs omega_max > 0 and count >= 1"));
        }
        let delta = omega_max / count as f64;
        let starts = (0..count).map(|c| c as f64 * delta).collect();
        let mut ends: Vec<f64> = (1..=count).map(|c| c as f64 * delta).collect();
        ends[count - 1] = omega_max;
        Self::new(starts, ends)
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn ends(&self) -> &[f64] {
        &self.ends
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn width(&self, c: usize) -> f64 {
        self.ends[c] - self.starts[c]
    }

    pub fn center(&self, c: usize) -> f64 {
        0.5 * (self.starts[c] + self.ends[c])
    }

    pub fn total_width(&self) -> f64 {
        (0..self.len()).map(|c| self.width(c)).sum()
    }

    pub fn contains(&self, c: usize, omega: f64) -> bool {
        omega >= self.starts[c] && omega <= self.ends[c]
    }

    /// Index of the band holding `omega`, if any.
    pub fn locate(&self, omega: f64) -> Option<usize> {
        (0..self.len()).find(|&c| self.contains(c, omega))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<BandGrid> {
        let starts = indices.iter().map(|&c| self.starts[c]).collect();
        let ends = indices.iter().map(|&c| self.ends[c]).collect();
        BandGrid::new(starts, ends)
    }

    /// Merges touching bands from `indices` into contiguous regions.
    pub fn merge_adjacent(&self, indices: &[usize]) -> Result<BandGrid> {
        let mut starts: Vec<f64> = Vec::new();
        let mut ends: Vec<f64> = Vec::new();
        for &c in indices {
            let (s, e) = (self.starts[c], self.ends[c]);
            match ends.last_mut() {
                Some(last) if (s - *last).abs() <= 1e-12 * e.max(1.0) => *last = e,
                _ => {
                    starts.push(s);
                    ends.push(e);
                }
            }
        }
        BandGrid::new(starts, ends)
    }
}

/// Splits each active band of `parent` into `subbands` equal-width pieces.
pub fn refine_grid(parent: &BandGrid, active: &[usize], subbands: usize) -> Result<BandGrid> {
    if active.is_empty() {
        return Err(Error::NoActiveBands);
    }
    if subbands < 2 {
        return Err(Error::arg("need at least 2 sub-bands per band"));
    }
    let mut active = active.to_vec();
    active.sort_unstable();
    active.dedup();
    let mut starts = Vec::with_capacity(active.len() * subbands);
    let mut ends = Vec::with_capacity(active.len() * subbands);
    for &c in &active {
        if c >= parent.len() {
            return Err(Error::arg(format!("active band {c} out of range")));
        }
        let s = parent.starts[c];
        let e = parent.ends[c];
        let step = (e - s) / subbands as f64;
        for j in 0..subbands {
            starts.push(s + j as f64 * step);
            ends.push(if j + 1 == subbands { e } else { s + (j + 1) as f64 * step });
        }
    }
    BandGrid::new(starts, ends)
}

/// Band integral of `exp(i w t)` over `[start, end]`, evaluated in the
/// product form `exp(i wc t) * 2 sin(width t / 2) / t`, which is exact and
/// avoids cancellation for small `t`.
pub fn band_integral(start: f64, end: f64, t: f64) -> Complex64 {
    let width = end - start;
    let half = 0.5 * width * t;
    let amp = if t == 0.0 {
        width
    } else if half.abs() < 1e-4 {
        // sin(x)/x series; avoids 0/0 and keeps full precision
        let x2 = half * half;
        width * (1.0 - x2 / 6.0 + x2 * x2 / 120.0)
    } else {
        2.0 * half.sin() / t
    };
    let center = 0.5 * (start + end);
    Complex64::from_polar(amp, center * t)
}

/// Complex `N_m x C` wideband dictionary of one record.
#[derive(Debug, Clone)]
pub struct WidebandDictionary {
    record_id: String,
    grid: BandGrid,
    matrix: DMatrix<Complex64>,
}

impl WidebandDictionary {
    pub fn for_record(record: &Record, grid: &BandGrid) -> Self {
        let n = record.len();
        let c = grid.len();
        let matrix = DMatrix::from_fn(n, c, |i, j| {
            band_integral(grid.starts[j], grid.ends[j], record.times()[i])
        });
        Self {
            record_id: record.id().to_string(),
            grid: grid.clone(),
            matrix,
        }
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn grid(&self) -> &BandGrid {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        self.matrix.column_iter().map(|c| c.norm()).collect()
    }

    /// Copy with every column scaled to unit Euclidean norm, and the
    /// scales that were applied.
    pub fn normalized(&self) -> (WidebandDictionary, Vec<f64>) {
        let norms = self.column_norms();
        let mut matrix = self.matrix.clone();
        for (j, &nrm) in norms.iter().enumerate() {
            if nrm > 0.0 {
                matrix.column_mut(j).unscale_mut(nrm);
            }
        }
        (
            WidebandDictionary {
                record_id: self.record_id.clone(),
                grid: self.grid.clone(),
                matrix,
            },
            norms,
        )
    }

    /// Copy with the column means removed (profiles out an intercept).
    pub fn centered(&self) -> WidebandDictionary {
        let mut matrix = self.matrix.clone();
        for mut col in matrix.column_iter_mut() {
            let mean = col.sum() / Complex64::new(col.len() as f64, 0.0);
            col.add_scalar_mut(-mean);
        }
        WidebandDictionary {
            record_id: self.record_id.clone(),
            grid: self.grid.clone(),
            matrix,
        }
    }

    /// Real reconstruction `2 Re(D beta)`.
    pub fn reconstruct(&self, beta: &[Complex64]) -> DVector<f64> {
        assert_eq!(beta.len(), self.ncols());
        let b = DVector::from_column_slice(beta);
        (&self.matrix * b).map(|z| 2.0 * z.re)
    }

    /// Real design matrix `[2 Re D, -2 Im D]` acting on `[Re beta; Im beta]`.
    pub fn real_design(&self) -> DMatrix<f64> {
        let (n, c) = self.matrix.shape();
        DMatrix::from_fn(n, 2 * c, |i, j| {
            if j < c {
                2.0 * self.matrix[(i, j)].re
            } else {
                -2.0 * self.matrix[(i, j - c)].im
            }
        })
    }
}

pub fn build_wideband(records: &RecordSet, grid: &BandGrid) -> Vec<WidebandDictionary> {
    records
        .iter()
        .map(|r| WidebandDictionary::for_record(r, grid))
        .collect()
}

/// Real `N_m x 2K` matrix with columns `[cos(w_1 t), sin(w_1 t), ...]`.
#[derive(Debug, Clone)]
pub struct NarrowbandMatrix {
    record_id: String,
    omegas: Vec<f64>,
    matrix: DMatrix<f64>,
}

impl NarrowbandMatrix {
    pub fn for_times(record_id: &str, times: &[f64], omegas: &[f64]) -> Result<Self> {
        check_narrowband_omegas(omegas)?;
        Ok(Self::build_unchecked(record_id, times, omegas))
    }

    pub(crate) fn build_unchecked(record_id: &str, times: &[f64], omegas: &[f64]) -> Self {
        let k = omegas.len();
        let mut matrix = DMatrix::zeros(times.len(), 2 * k);
        for (j, &w) in omegas.iter().enumerate() {
            for (i, &t) in times.iter().enumerate() {
                let (s, c) = (w * t).sin_cos();
                matrix[(i, 2 * j)] = c;
                matrix[(i, 2 * j + 1)] = s;
            }
        }
        Self {
            record_id: record_id.to_string(),
            omegas: omegas.to_vec(),
            matrix,
        }
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

fn check_narrowband_omegas(omegas: &[f64]) -> Result<()> {
    if omegas.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::arg("narrowband frequencies must be finite and positive"));
    }
    let mut sorted = omegas.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::arg("duplicate narrowband frequency"));
    }
    Ok(())
}

pub fn build_narrowband(records: &RecordSet, omegas: &[f64]) -> Result<Vec<NarrowbandMatrix>> {
    check_narrowband_omegas(omegas)?;
    Ok(records
        .iter()
        .map(|r| NarrowbandMatrix::build_unchecked(r.id(), r.times(), omegas))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Adaptive Simpson quadrature of a complex integrand.
    fn adaptive_simpson(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64, tol: f64) -> Complex64 {
        fn simpson(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64) -> Complex64 {
            let m = 0.5 * (a + b);
            (f(a) + f(m) * 4.0 + f(b)) * ((b - a) / 6.0)
        }
        fn recurse(f: &dyn Fn(f64) -> Complex64, a: f64, b: f64, whole: Complex64, tol: f64, depth: u32) -> Complex64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            let diff = left + right - whole;
            if depth == 0 || diff.norm() <= 15.0 * tol {
                return left + right + diff / 15.0;
            }
            recurse(f, a, m, left, tol / 2.0, depth - 1) + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
        recurse(f, a, b, simpson(f, a, b), tol, 40)
    }

    fn record(times: Vec<f64>) -> Record {
        let n = times.len();
        Record::new("r", times, vec![0.0; n]).unwrap()
    }

    #[test]
    fn entry_at_time_zero_is_band_width() {
        let d = WidebandDictionary::for_record(&record(vec![0.0, 1.0]), &BandGrid::new(vec![0.1], vec![0.3]).unwrap());
        let z = d.matrix()[(0, 0)];
        assert!((z.re - 0.2).abs() < 1e-15 && z.im == 0.0);
    }

    #[test]
    fn zero_width_band_rejected() {
        assert!(BandGrid::new(vec![0.1], vec![0.1]).is_err());
        assert!(BandGrid::new(vec![0.0, 0.1], vec![0.2, 0.3]).is_err());
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let cases = [(0.0, 0.049, 3.7), (0.11, 0.13, 250.0), (0.3, 0.7, 0.001), (0.05, 0.0501, 412.3), (0.2, 0.9, 57.0)];
        for (s, e, t) in cases {
            let f = |w: f64| Complex64::from_polar(1.0, w * t);
            let q = adaptive_simpson(&f, s, e, 1e-15);
            let c = band_integral(s, e, t);
            assert!((q - c).norm() <= 1e-10 * q.norm().max(1e-300), "s={s} e={e} t={t}: {q} vs {c}");
            // and against the raw difference form
            if t > 1.0 {
                let raw = (Complex64::from_polar(1.0, e * t) - Complex64::from_polar(1.0, s * t)) / Complex64::new(0.0, t);
                assert!((raw - c).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn narrow_band_tends_to_phasor() {
        let t = 137.0;
        let wc = 0.3;
        let width = 1e-6;
        let z = band_integral(wc - width / 2.0, wc + width / 2.0, t) / width;
        let p = Complex64::from_polar(1.0, wc * t);
        assert!((z - p).norm() / p.norm() < 1e-4);
    }

    #[test]
    fn narrowband_examples() {
        let nb = NarrowbandMatrix::for_times("r", &[0.0], &[0.7]).unwrap();
        assert_eq!(nb.matrix().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        let nb = NarrowbandMatrix::for_times("r", &[0.0, 1.0, 2.0], &[PI]).unwrap();
        let want_c = [1.0, -1.0, 1.0];
        for i in 0..3 {
            assert!((nb.matrix()[(i, 0)] - want_c[i]).abs() < 1e-12);
            assert!(nb.matrix()[(i, 1)].abs() < 1e-12);
        }
        assert!(NarrowbandMatrix::for_times("r", &[0.0], &[0.2, 0.2]).is_err());
        assert!(NarrowbandMatrix::for_times("r", &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn refine_examples() {
        let g = BandGrid::new(vec![0.0], vec![1.0]).unwrap();
        let r = refine_grid(&g, &[0], 4).unwrap();
        assert_eq!(r.starts(), &[0.0, 0.25, 0.5, 0.75]);
        assert_eq!(r.ends(), &[0.25, 0.5, 0.75, 1.0]);

        let g = BandGrid::uniform(1.0, 5).unwrap();
        let r = refine_grid(&g, &[3, 1], 3).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.starts()[0] >= g.starts()[1] && r.ends()[2] <= g.ends()[1] + 1e-15);
        assert!(r.starts()[3] >= g.starts()[3]);

        assert!(matches!(refine_grid(&g, &[], 4), Err(Error::NoActiveBands)));
        assert!(refine_grid(&g, &[0], 1).is_err());
    }

    #[test]
    fn merge_adjacent_bands() {
        let g = BandGrid::uniform(1.0, 8).unwrap();
        let m = g.merge_adjacent(&[1, 2, 3, 6]).unwrap();
        assert_eq!(m.len(), 2);
        assert!((m.starts()[0] - 0.125).abs() < 1e-15 && (m.ends()[0] - 0.5).abs() < 1e-15);
        assert!((m.starts()[1] - 0.75).abs() < 1e-15 && (m.ends()[1] - 0.875).abs() < 1e-15);
    }

    #[test]
    fn conjugate_symmetric_expansion_is_real() {
        // Explicit +/- band expansion: D_- is the conjugate of D_+ and the
        // coefficients on the mirrored bands are conjugated, so the sum is real.
        let rec = record(vec![0.0, 3.3, 10.0, 41.5, 77.0]);
        let g = BandGrid::uniform(0.8, 4).unwrap();
        let d = WidebandDictionary::for_record(&rec, &g);
        let beta: Vec<Complex64> = (0..4).map(|c| Complex64::new(0.3 * c as f64 - 0.2, 0.1 + 0.05 * c as f64)).collect();
        for i in 0..rec.len() {
            let mut full = Complex64::new(0.0, 0.0);
            for c in 0..4 {
                let t = rec.times()[i];
                let pos = band_integral(g.starts()[c], g.ends()[c], t);
                let neg = band_integral(-g.ends()[c], -g.starts()[c], t);
                full += pos * beta[c] + neg * beta[c].conj();
            }
            assert!(full.im.abs() < 1e-10);
            assert!((full.re - d.reconstruct(&beta)[i]).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn refinement_conserves_width(n in 1usize..10, cz in 2usize..8, mask in proptest::collection::vec(any::<bool>(), 10)) {
            let g = BandGrid::uniform(0.785, n).unwrap();
            let active: Vec<usize> = (0..n).filter(|&c| mask[c]).collect();
            prop_assume!(!active.is_empty());
            let r = refine_grid(&g, &active, cz).unwrap();
            let parent_width: f64 = active.iter().map(|&c| g.width(c)).sum();
            prop_assert_eq!(r.len(), active.len() * cz);
            prop_assert!((r.total_width() - parent_width).abs() < 1e-12);
        }

        #[test]
        fn narrowband_matches_trig(ws in proptest::collection::btree_set(1u32..1000, 1..4), ts in proptest::collection::vec(0.0f64..400.0, 1..6)) {
            let omegas: Vec<f64> = ws.iter().map(|w| *w as f64 * 1e-3).collect();
            let nb = NarrowbandMatrix::for_times("r", &ts, &omegas).unwrap();
            for (i, t) in ts.iter().enumerate() {
                for (k, w) in omegas.iter().enumerate() {
                    prop_assert!((nb.matrix()[(i, 2 * k)] - (w * t).cos()).abs() < 1e-15);
                    prop_assert!((nb.matrix()[(i, 2 * k + 1)] - (w * t).sin()).abs() < 1e-15);
                }
            }
        }
    }
}
