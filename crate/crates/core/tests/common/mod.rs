//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use glosa_core::dictionary::{build_wideband, BandGrid, WidebandDictionary};
use glosa_core::signal::{Record, RecordSet};
use glosa_core::solver::PenaltyConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct TinyInstance {
    pub records: RecordSet,
    pub dicts: Vec<WidebandDictionary>,
    pub penalties: PenaltyConfig,
}

/// `M = 2` records of 16 random samples on 4 bands over `(0, 1]`.
pub fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let records = (0..2)
        .map(|m| {
            let mut t = 0.0;
            let times: Vec<f64> = (0..16)
                .map(|_| {
                    t += rng.random_range(0.3..1.7);
                    t
                })
                .collect();
            let values = times
                .iter()
                .map(|t| (0.4 * t + m as f64).cos() + 0.3 * rng.random_range(-1.0..1.0))
                .collect();
            Record::new(format!("r{m}"), times, values).unwrap()
        })
        .collect();
    let records = RecordSet::new(records).unwrap();
    let grid = BandGrid::uniform(1.0, 4).unwrap();
    let dicts = build_wideband(&records, &grid);
    let penalties = PenaltyConfig::new(
        vec![rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
        rng.random_range(0.5..4.0),
        vec![1.0, 0.8, 1.0, 0.6],
    )
    .unwrap();
    TinyInstance {
        records,
        dicts,
        penalties,
    }
}

/// Objective with `alpha` minimised out:
/// `sum |y - X b|^2 + sum zeta q max(|beta| - phi, 0) + lambda sum phi`.
fn reduced_objective(x: &[DMatrix<f64>], y: &[DVector<f64>], p: &PenaltyConfig, b: &[DVector<f64>], phi: &[f64]) -> f64 {
    let c = phi.len();
    let mut f = p.lambda * phi.iter().sum::<f64>();
    for m in 0..x.len() {
        f += (&y[m] - &x[m] * &b[m]).norm_squared();
        for k in 0..c {
            let mag = b[m][k].hypot(b[m][k + c]);
            f += p.zeta[m] * p.q[k] * (mag - phi[k]).max(0.0);
        }
    }
    f
}

/// Best objective value found by projected subgradient descent with
/// normalised, diminishing steps.
pub fn subgradient_oracle(inst: &TinyInstance, iterations: usize) -> f64 {
    let x: Vec<DMatrix<f64>> = inst.dicts.iter().map(|d| d.real_design()).collect();
    let y: Vec<DVector<f64>> = inst
        .records
        .iter()
        .map(|r| DVector::from_column_slice(r.values()))
        .collect();
    let p = &inst.penalties;
    let c = inst.dicts[0].ncols();
    let mut b: Vec<DVector<f64>> = x.iter().map(|xm| DVector::zeros(xm.ncols())).collect();
    let mut phi = vec![0.0; c];
    let mut best = reduced_objective(&x, &y, p, &b, &phi);
    let scale = y.iter().map(|v| v.norm()).sum::<f64>();
    for k in 0..iterations {
        let mut gb: Vec<DVector<f64>> = Vec::with_capacity(x.len());
        let mut gphi = vec![p.lambda; c];
        for m in 0..x.len() {
            let mut g = x[m].tr_mul(&(&x[m] * &b[m] - &y[m])) * 2.0;
            for j in 0..c {
                let mag = b[m][j].hypot(b[m][j + c]);
                if mag > phi[j] {
                    let w = p.zeta[m] * p.q[j];
                    if mag > 0.0 {
                        g[j] += w * b[m][j] / mag;
                        g[j + c] += w * b[m][j + c] / mag;
                    }
                    gphi[j] -= w;
                }
            }
            gb.push(g);
        }
        let norm = (gb.iter().map(|g| g.norm_squared()).sum::<f64>() + gphi.iter().map(|g| g * g).sum::<f64>()).sqrt();
        if norm == 0.0 {
            break;
        }
        let step = 0.05 * scale / ((k + 1) as f64).sqrt() / norm;
        for m in 0..x.len() {
            b[m] -= &gb[m] * step;
        }
        for j in 0..c {
            phi[j] = (phi[j] - step * gphi[j]).max(0.0);
        }
        best = best.min(reduced_objective(&x, &y, p, &b, &phi));
    }
    best
}
