//! Convex joint estimation of a shared non-negative spectrum.
//!
//! For records `m = 1..M` with real data `y_m` and wideband dictionaries
//! `D_m` over a common band grid, [`solve_joint`] minimises
//!
//! ```text
//! sum_m |y_m - 2 Re(D_m beta_m)|^2
//!   + sum_m zeta_m |q o (phi - alpha_m)|_1 + lambda |phi|_1
//! subject to alpha_m >= |beta_m|, phi >= 0
//! ```
//!
//! with an operator-splitting scheme. The splitting puts `(beta, alpha, phi)`
//! in one block and a copy `(beta', alpha')` constrained to the product of
//! 3-dimensional second-order cones `{|beta'_mc| <= alpha'_mc}` in the other.
//! Every sub-step is closed form:
//!
//! * `beta_m`: a ridge-regularised least-squares solve with a cached Cholesky
//!   factor per record;
//! * `(alpha_.c, phi_c)`: for each band, the joint proximal step reduces to
//!   a 1-D monotone piecewise-linear root in `phi` (breakpoints at
//!   `v_m +- zeta_m q_c / rho`), after which each `alpha_mc` is a shrinkage
//!   toward `phi_c`;
//! * `(beta', alpha')`: Euclidean projection onto the cone.
//!
//! The returned point is always the cone copy, so `alpha >= |beta|` holds
//! exactly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dictionary::WidebandDictionary;
use crate::error::{Error, Result};
use crate::signal::RecordSet;

/// Penalty weights for one band grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub zeta: Vec<f64>,
    pub lambda: f64,
    pub q: Vec<f64>,
}

impl PenaltyConfig {
    pub fn new(zeta: Vec<f64>, lambda: f64, q: Vec<f64>) -> Result<Self> {
        let p = Self { zeta, lambda, q };
        p.check()?;
        Ok(p)
    }

    /// `lambda = 15`, `zeta_m = 10`, `q = 1`.
    pub fn defaults(records: usize, bands: usize) -> Self {
        Self {
            zeta: vec![10.0; records],
            lambda: 15.0,
            q: vec![1.0; bands],
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::arg("lambda must be finite and non-negative"));
        }
        if self.zeta.iter().any(|z| !(*z >= 0.0) || !z.is_finite()) {
            return Err(Error::arg("zeta entries must be finite and non-negative"));
        }
        if self.q.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::arg("q entries must lie in [0, 1]"));
        }
        Ok(())
    }

    fn check_dims(&self, records: usize, bands: usize) -> Result<()> {
        self.check()?;
        if self.zeta.len() != records {
            return Err(Error::arg(format!(
                "zeta has {} entries for {records} records",
                self.zeta.len()
            )));
        }
        if self.q.len() != bands {
            return Err(Error::arg(format!("q has {} entries for {bands} bands", self.q.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Relative objective change allowed across `objective_window` iterations.
    pub objective_rtol: f64,
    pub objective_window: usize,
    /// Initial penalty parameter; `None` picks one from the data scale.
    pub rho: Option<f64>,
    /// Residual-balancing interval (iterations).
    pub adapt_interval: usize,
    pub relaxation: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            eps_abs: 1e-12,
            eps_rel: 1e-8,
            objective_rtol: 1e-10,
            objective_window: 50,
            rho: None,
            adapt_interval: 50,
            relaxation: 1.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub data_fit: f64,
    pub coupling: f64,
    pub sparsity: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.data_fit + self.coupling + self.sparsity
    }
}

/// A candidate point of the joint program.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPoint {
    pub betas: Vec<Vec<Complex64>>,
    pub alphas: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

impl JointPoint {
    pub fn zeros(records: usize, bands: usize) -> Self {
        Self {
            betas: vec![vec![Complex64::new(0.0, 0.0); bands]; records],
            alphas: vec![vec![0.0; bands]; records],
            phi: vec![0.0; bands],
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointSolution {
    pub betas: Vec<Vec<Complex64>>,
    pub alphas: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    pub objective: f64,
    pub terms: ObjectiveTerms,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
}

impl JointSolution {
    pub fn point(&self) -> JointPoint {
        JointPoint {
            betas: self.betas.clone(),
            alphas: self.alphas.clone(),
            phi: self.phi.clone(),
        }
    }

    /// Largest violation of `alpha >= |beta|` (zero when feasible).
    pub fn max_cone_violation(&self) -> f64 {
        cone_violation(&self.betas, &self.alphas)
    }
}

fn cone_violation(betas: &[Vec<Complex64>], alphas: &[Vec<f64>]) -> f64 {
    betas
        .iter()
        .zip(alphas)
        .flat_map(|(b, a)| b.iter().zip(a).map(|(b, a)| (b.norm() - a).max(0.0)))
        .fold(0.0, f64::max)
}

/// Band power with the negative half mirrored: `2 phi_c^2`.
pub fn band_power(solution: &JointSolution) -> Vec<f64> {
    solution.phi.iter().map(|p| 2.0 * p * p).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub value: f64,
    pub terms: ObjectiveTerms,
    /// Largest amount by which `alpha` had to be raised to reach `|beta|`.
    pub cone_infeasibility: f64,
    /// Largest negative `phi` entry that was clipped to zero.
    pub phi_infeasibility: f64,
}

fn check_inputs(records: &RecordSet, dictionaries: &[WidebandDictionary]) -> Result<usize> {
    if dictionaries.len() != records.len() {
        return Err(Error::arg(format!(
            "{} dictionaries for {} records",
            dictionaries.len(),
            records.len()
        )));
    }
    let grid = dictionaries[0].grid();
    for (d, r) in dictionaries.iter().zip(records) {
        if d.grid() != grid {
            return Err(Error::arg("dictionaries are not built on a common band grid"));
        }
        if d.nrows() != r.len() {
            return Err(Error::arg(format!(
                "dictionary for {} has {} rows, record has {} samples",
                d.record_id(),
                d.nrows(),
                r.len()
            )));
        }
    }
    Ok(grid.len())
}

/// Exact objective value of `point`. An infeasible point is evaluated after
/// raising `alpha` to `|beta|` and clipping `phi` at zero.
pub fn objective(
    records: &RecordSet,
    dictionaries: &[WidebandDictionary],
    penalties: &PenaltyConfig,
    point: &JointPoint,
) -> Result<ObjectiveReport> {
    let bands = check_inputs(records, dictionaries)?;
    penalties.check_dims(records.len(), bands)?;
    let m = records.len();
    if point.betas.len() != m || point.alphas.len() != m || point.phi.len() != bands {
        return Err(Error::arg("point shape does not match records/bands"));
    }
    let mut terms = ObjectiveTerms::default();
    let mut cone_inf: f64 = 0.0;
    let mut phi_inf: f64 = 0.0;
    let phi: Vec<f64> = point
        .phi
        .iter()
        .map(|&p| {
            phi_inf = phi_inf.max(-p);
            p.max(0.0)
        })
        .collect();
    for (r, ((rec, dict), (beta, alpha))) in records
        .iter()
        .zip(dictionaries)
        .zip(point.betas.iter().zip(&point.alphas))
        .enumerate()
    {
        if beta.len() != bands || alpha.len() != bands {
            return Err(Error::arg("point shape does not match records/bands"));
        }
        let recon = dict.reconstruct(beta);
        terms.data_fit += rec
            .values()
            .iter()
            .zip(recon.iter())
            .map(|(y, s)| (y - s) * (y - s))
            .sum::<f64>();
        for c in 0..bands {
            let mag = beta[c].norm();
            let a = if alpha[c] < mag {
                cone_inf = cone_inf.max(mag - alpha[c]);
                mag
            } else {
                alpha[c]
            };
            terms.coupling += penalties.zeta[r] * penalties.q[c] * (phi[c] - a).abs();
        }
    }
    terms.sparsity = penalties.lambda * phi.iter().sum::<f64>();
    Ok(ObjectiveReport {
        value: terms.total(),
        terms,
        cone_infeasibility: cone_inf,
        phi_infeasibility: phi_inf.max(0.0),
    })
}

/// Joint proximal step for one band.
///
/// Minimises `lambda phi + sum_m w_m |phi - a_m| + rho/2 sum_m (a_m - v_m)^2`
/// over `phi >= 0` and free `a_m`; writes the `a_m` into `alpha` and returns
/// `phi`.
pub(crate) fn band_prox(v: &[f64], w: &[f64], lambda: f64, rho: f64, alpha: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
    // Derivative of the partially minimised objective in phi; nondecreasing.
    let slope = |phi: f64| -> f64 {
        lambda
            - v.iter()
                .zip(w)
                .map(|(&vm, &wm)| (rho * (vm - phi)).clamp(-wm, wm))
                .sum::<f64>()
    };
    let mut phi = 0.0;
    let g0 = slope(0.0);
    if g0 < 0.0 {
        scratch.clear();
        for (&vm, &wm) in v.iter().zip(w) {
            for b in [vm - wm / rho, vm + wm / rho] {
                if b > 0.0 {
                    scratch.push(b);
                }
            }
        }
        scratch.sort_by(f64::total_cmp);
        let (mut p0, mut s0) = (0.0, g0);
        phi = f64::NAN;
        for &p1 in scratch.iter() {
            let s1 = slope(p1);
            if s1 >= 0.0 {
                phi = if s1 == s0 { p1 } else { p0 + (p1 - p0) * (-s0) / (s1 - s0) };
                break;
            }
            p0 = p1;
            s0 = s1;
        }
        if phi.is_nan() {
            // slope beyond the last breakpoint is lambda + sum w >= 0
            phi = p0;
        }
    }
    for ((a, &vm), &wm) in alpha.iter_mut().zip(v).zip(w) {
        let d = vm - phi;
        let t = wm / rho;
        *a = phi + d.signum() * (d.abs() - t).max(0.0);
    }
    phi
}

/// Projection onto `{(t, x, y) : hypot(x, y) <= t}`.
#[inline]
pub(crate) fn project_cone(t: f64, x: f64, y: f64) -> (f64, f64, f64) {
    let n = x.hypot(y);
    if n <= t {
        (t, x, y)
    } else if n <= -t {
        (0.0, 0.0, 0.0)
    } else {
        let s = 0.5 * (n + t);
        let k = s / n;
        (s, x * k, y * k)
    }
}

struct RecordSystem {
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    y: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl RecordSystem {
    fn new(dict: &WidebandDictionary, y: &[f64], rho: f64) -> Result<Self> {
        let design = dict.real_design();
        let y = DVector::from_column_slice(y);
        let gram = design.tr_mul(&design) * 2.0;
        let rhs = design.tr_mul(&y) * 2.0;
        let factor = Self::factor(&gram, rho)?;
        Ok(Self {
            design,
            gram,
            rhs,
            y,
            factor,
        })
    }

    fn factor(gram: &DMatrix<f64>, rho: f64) -> Result<Cholesky<f64, Dyn>> {
        let n = gram.nrows();
        let mut k = gram.clone();
        for i in 0..n {
            k[(i, i)] += rho;
        }
        Cholesky::new(k).ok_or_else(|| Error::arg("normal matrix not positive definite"))
    }

    fn refactor(&mut self, rho: f64) -> Result<()> {
        self.factor = Self::factor(&self.gram, rho)?;
        Ok(())
    }

    fn data_fit(&self, x: &DVector<f64>) -> f64 {
        (&self.y - &self.design * x).norm_squared()
    }
}

/// Packs complex coefficients as `[re..., im...]`.
#[cfg(test)]
fn pack(beta: &[Complex64]) -> DVector<f64> {
    let c = beta.len();
    DVector::from_fn(2 * c, |i, _| if i < c { beta[i].re } else { beta[i - c].im })
}

fn unpack(x: &DVector<f64>) -> Vec<Complex64> {
    let c = x.len() / 2;
    (0..c).map(|i| Complex64::new(x[i], x[c + i])).collect()
}

pub fn solve_joint(
    records: &RecordSet,
    dictionaries: &[WidebandDictionary],
    penalties: &PenaltyConfig,
    settings: &SolverSettings,
) -> Result<JointSolution> {
    let bands = check_inputs(records, dictionaries)?;
    let m = records.len();
    penalties.check_dims(m, bands)?;
    if !(settings.relaxation > 0.0 && settings.relaxation < 2.0) {
        return Err(Error::arg("relaxation must lie in (0, 2)"));
    }

    let mut rho = match settings.rho {
        Some(r) if r > 0.0 => r,
        Some(_) => return Err(Error::arg("rho must be positive")),
        None => {
            // mean diagonal of the normal matrices
            let mut tr = 0.0;
            for d in dictionaries {
                let x = d.real_design();
                tr += x.iter().map(|v| v * v).sum::<f64>() * 2.0 / (2 * bands) as f64;
            }
            (tr / m as f64).max(1e-8)
        }
    };

    let mut systems = Vec::with_capacity(m);
    for (d, r) in dictionaries.iter().zip(records) {
        systems.push(RecordSystem::new(d, r.values(), rho)?);
    }

    let n2 = 2 * bands;
    let relax = settings.relaxation;
    // block A
    let mut x: Vec<DVector<f64>> = vec![DVector::zeros(n2); m];
    let mut a: Vec<Vec<f64>> = vec![vec![0.0; bands]; m];
    let mut phi = vec![0.0; bands];
    // block B (cone copy)
    let mut zx: Vec<DVector<f64>> = vec![DVector::zeros(n2); m];
    let mut za: Vec<Vec<f64>> = vec![vec![0.0; bands]; m];
    // scaled duals
    let mut ux: Vec<DVector<f64>> = vec![DVector::zeros(n2); m];
    let mut ua: Vec<Vec<f64>> = vec![vec![0.0; bands]; m];

    let weights: Vec<Vec<f64>> = (0..bands)
        .map(|c| penalties.zeta.iter().map(|z| z * penalties.q[c]).collect())
        .collect();
    let mut v = vec![0.0; m];
    let mut a_band = vec![0.0; m];
    let mut scratch = Vec::with_capacity(2 * m);
    let n_total = (m * (n2 + bands)) as f64;

    let mut prev_objective: Option<f64> = None;
    let mut last = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;
    let mut converged = false;

    let evaluate = |zx: &[DVector<f64>], za: &[Vec<f64>], phi: &[f64], systems: &[RecordSystem]| {
        let mut t = ObjectiveTerms::default();
        for (r, s) in systems.iter().enumerate() {
            t.data_fit += s.data_fit(&zx[r]);
            for c in 0..bands {
                t.coupling += penalties.zeta[r] * penalties.q[c] * (phi[c] - za[r][c]).abs();
            }
        }
        t.sparsity = penalties.lambda * phi.iter().sum::<f64>();
        t
    };

    for it in 1..=settings.max_iter {
        iterations = it;
        // beta step
        for r in 0..m {
            let rhs = &systems[r].rhs + (&zx[r] - &ux[r]) * rho;
            x[r] = systems[r].factor.solve(&rhs);
        }
        // (alpha, phi) step, band by band
        for c in 0..bands {
            for r in 0..m {
                v[r] = za[r][c] - ua[r][c];
            }
            phi[c] = band_prox(&v, &weights[c], penalties.lambda, rho, &mut a_band, &mut scratch);
            for r in 0..m {
                a[r][c] = a_band[r];
            }
        }
        // cone projection with over-relaxation
        let mut prim_sq = 0.0;
        let mut dual_sq = 0.0;
        let mut norm_a_sq = 0.0;
        let mut norm_b_sq = 0.0;
        let mut norm_u_sq = 0.0;
        for r in 0..m {
            for c in 0..bands {
                let xr = relax * x[r][c] + (1.0 - relax) * zx[r][c];
                let xi = relax * x[r][bands + c] + (1.0 - relax) * zx[r][bands + c];
                let ar = relax * a[r][c] + (1.0 - relax) * za[r][c];
                let (t, pr, pi) = project_cone(ar + ua[r][c], xr + ux[r][c], xi + ux[r][bands + c]);
                let (old_t, old_r, old_i) = (za[r][c], zx[r][c], zx[r][bands + c]);
                za[r][c] = t;
                zx[r][c] = pr;
                zx[r][bands + c] = pi;
                ux[r][c] += xr - pr;
                ux[r][bands + c] += xi - pi;
                ua[r][c] += ar - t;

                let d0 = x[r][c] - pr;
                let d1 = x[r][bands + c] - pi;
                let d2 = a[r][c] - t;
                prim_sq += d0 * d0 + d1 * d1 + d2 * d2;
                let e0 = pr - old_r;
                let e1 = pi - old_i;
                let e2 = t - old_t;
                dual_sq += e0 * e0 + e1 * e1 + e2 * e2;
                norm_a_sq += x[r][c].powi(2) + x[r][bands + c].powi(2) + a[r][c].powi(2);
                norm_b_sq += pr * pr + pi * pi + t * t;
                norm_u_sq += ux[r][c].powi(2) + ux[r][bands + c].powi(2) + ua[r][c].powi(2);
            }
        }
        let prim = prim_sq.sqrt();
        let dual = rho * dual_sq.sqrt();
        last = (prim, dual);
        let eps_pri = settings.eps_abs * n_total.sqrt() + settings.eps_rel * norm_a_sq.sqrt().max(norm_b_sq.sqrt());
        let eps_dual = settings.eps_abs * n_total.sqrt() + settings.eps_rel * rho * norm_u_sq.sqrt();

        if it % settings.objective_window == 0 {
            let obj = evaluate(&zx, &za, &phi, &systems).total();
            let stalled = prev_objective
                .map(|p| (obj - p).abs() <= settings.objective_rtol * obj.abs().max(f64::MIN_POSITIVE))
                .unwrap_or(false);
            prev_objective = Some(obj);
            if stalled && prim <= eps_pri && dual <= eps_dual {
                converged = true;
                break;
            }
        }

        if settings.adapt_interval > 0 && it % settings.adapt_interval == 0 {
            let rel_prim = prim / norm_a_sq.sqrt().max(norm_b_sq.sqrt()).max(f64::MIN_POSITIVE);
            let rel_dual = dual / (rho * norm_u_sq.sqrt()).max(f64::MIN_POSITIVE);
            let scale = if rel_prim > 10.0 * rel_dual {
                2.0
            } else if rel_dual > 10.0 * rel_prim {
                0.5
            } else {
                1.0
            };
            if scale != 1.0 {
                rho *= scale;
                for r in 0..m {
                    ux[r] /= scale;
                    for u in ua[r].iter_mut() {
                        *u /= scale;
                    }
                    systems[r].refactor(rho)?;
                }
            }
        }
    }

    let terms = evaluate(&zx, &za, &phi, &systems);
    let solution = JointSolution {
        betas: zx.iter().map(unpack).collect(),
        alphas: za,
        phi,
        objective: terms.total(),
        terms,
        iterations,
        primal_residual: last.0,
        dual_residual: last.1,
        converged,
    };
    if converged {
        Ok(solution)
    } else {
        Err(Error::NotConverged {
            iterations,
            primal_residual: last.0,
            dual_residual: last.1,
            best: Box::new(solution),
        })
    }
}
