//! Misspecified Cramer-Rao machinery.
//!
//! The estimator assumes observations `mu_t(theta) + noise` at the nominal
//! instants while the data were generated at `t + delta_t`. The quantities
//! here are conditional on one realisation of the missampling field.
//!
//! Parameters are ordered `[omega | rho(1..M) | phi(1..M)]`, matching
//! [`SinusoidModel::to_theta`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{evaluate_signal, wrap_phase, MissamplingField, RecordSet, SinusoidModel};

/// Sampling instants of every record.
pub fn record_times(records: &RecordSet) -> Vec<Vec<f64>> {
    records.iter().map(|r| r.times().to_vec()).collect()
}

fn check_times(times: &[Vec<f64>], model: &SinusoidModel, delta: Option<&MissamplingField>) -> Result<()> {
    if times.len() != model.n_records() {
        return Err(Error::arg(format!(
            "{} time vectors for a model with {} records",
            times.len(),
            model.n_records()
        )));
    }
    if let Some(d) = delta {
        if d.offsets().len() != times.len() || d.offsets().iter().zip(times).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::arg("missampling field does not match the sampling times"));
        }
    }
    Ok(())
}

fn total_len(times: &[Vec<f64>]) -> usize {
    times.iter().map(Vec::len).sum()
}

/// True noise-free signal at the perturbed instants.
fn true_signal(times: &[Vec<f64>], truth: &SinusoidModel, delta: &MissamplingField) -> Result<Vec<Vec<f64>>> {
    times
        .iter()
        .enumerate()
        .map(|(m, t)| evaluate_signal(truth, m, t, Some(delta.record(m))))
        .collect()
}

fn waveform_error_ss(times: &[Vec<f64>], signal: &[Vec<f64>], candidate: &SinusoidModel) -> Result<f64> {
    let mut ss = 0.0;
    for (m, t) in times.iter().enumerate() {
        let mu = evaluate_signal(candidate, m, t, None)?;
        ss += signal[m].iter().zip(&mu).map(|(s, u)| (s - u) * (s - u)).sum::<f64>();
    }
    Ok(ss)
}

/// `sum (s - mu(candidate))^2` over all records.
pub fn waveform_error(
    times: &[Vec<f64>],
    truth: &SinusoidModel,
    delta: &MissamplingField,
    candidate: &SinusoidModel,
) -> Result<f64> {
    check_times(times, truth, Some(delta))?;
    check_times(times, candidate, None)?;
    let s = true_signal(times, truth, delta)?;
    waveform_error_ss(times, &s, candidate)
}

/// Kullback-Leibler divergence from the true density to the assumed one.
pub fn kld(
    times: &[Vec<f64>],
    truth: &SinusoidModel,
    delta: &MissamplingField,
    noise_var: f64,
    candidate: &SinusoidModel,
    sigma_eps_sq: f64,
) -> Result<f64> {
    if !(noise_var > 0.0 && sigma_eps_sq > 0.0) {
        return Err(Error::arg("variances must be positive"));
    }
    let err = waveform_error(times, truth, delta, candidate)?;
    Ok(kld_from_error(err, total_len(times), noise_var, sigma_eps_sq))
}

pub fn kld_from_error(waveform_error: f64, n: usize, noise_var: f64, sigma_eps_sq: f64) -> f64 {
    let n = n as f64;
    let r = noise_var / sigma_eps_sq;
    0.5 * (n * (sigma_eps_sq / noise_var).ln() + n * (r - 1.0) + waveform_error / sigma_eps_sq)
}

/// Pseudo-true noise variance `sigma^2 + waveform_error / N`.
pub fn sigma_eps_sq(waveform_error: f64, n: usize, noise_var: f64) -> Result<f64> {
    if !(waveform_error >= 0.0) || !(noise_var >= 0.0) || n == 0 {
        return Err(Error::arg("need non-negative inputs and N > 0"));
    }
    Ok(noise_var + waveform_error / n as f64)
}

/// Index helpers for the parameter layout.
#[derive(Debug, Clone, Copy)]
pub struct ThetaLayout {
    pub k: usize,
    pub m: usize,
}

impl ThetaLayout {
    pub fn of(model: &SinusoidModel) -> Self {
        Self {
            k: model.n_components(),
            m: model.n_records(),
        }
    }
    pub fn len(&self) -> usize {
        self.k + 2 * self.k * self.m
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn omega(&self, k: usize) -> usize {
        k
    }
    pub fn rho(&self, m: usize, k: usize) -> usize {
        self.k + m * self.k + k
    }
    pub fn phi(&self, m: usize, k: usize) -> usize {
        self.k + self.k * self.m + m * self.k + k
    }
    pub fn name(&self, i: usize) -> String {
        if i < self.k {
            format!("omega[{i}]")
        } else if i < self.k + self.k * self.m {
            let j = i - self.k;
            format!("rho[{}][{}]", j / self.k, j % self.k)
        } else {
            let j = i - self.k - self.k * self.m;
            format!("phi[{}][{}]", j / self.k, j % self.k)
        }
    }
}

/// Nonzero entries of the gradient of `mu_t` for record `m`, as
/// `(index, value)` triples per component: `d/d omega`, `d/d rho`, `d/d phi`.
fn gradient_entries(model: &SinusoidModel, lay: ThetaLayout, m: usize, t: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    for k in 0..lay.k {
        let w = model.omegas()[k];
        let rho = model.amplitudes()[m][k];
        let (s, c) = (w * t + model.phases()[m][k]).sin_cos();
        out.push((lay.omega(k), -rho * t * s));
        out.push((lay.rho(m, k), c));
        out.push((lay.phi(m, k), -rho * s));
    }
}

/// Dense gradient of `mu_t` for record `m`.
pub fn mean_gradient(model: &SinusoidModel, m: usize, t: f64) -> Vec<f64> {
    let lay = ThetaLayout::of(model);
    let mut g = vec![0.0; lay.len()];
    let mut e = Vec::new();
    gradient_entries(model, lay, m, t, &mut e);
    for (i, v) in e {
        g[i] = v;
    }
    g
}

/// Dense Hessian of `mu_t` for record `m`.
pub fn mean_hessian(model: &SinusoidModel, m: usize, t: f64) -> DMatrix<f64> {
    let lay = ThetaLayout::of(model);
    let mut h = DMatrix::zeros(lay.len(), lay.len());
    add_hessian(model, lay, m, t, 1.0, &mut h);
    h
}

/// `h += scale * hessian(mu_t)`.
fn add_hessian(model: &SinusoidModel, lay: ThetaLayout, m: usize, t: f64, scale: f64, h: &mut DMatrix<f64>) {
    for k in 0..lay.k {
        let w = model.omegas()[k];
        let rho = model.amplitudes()[m][k];
        let (s, c) = (w * t + model.phases()[m][k]).sin_cos();
        let (iw, ir, ip) = (lay.omega(k), lay.rho(m, k), lay.phi(m, k));
        let entries = [
            (iw, iw, -rho * t * t * c),
            (iw, ir, -t * s),
            (iw, ip, -rho * t * c),
            (ir, ip, -s),
            (ip, ip, -rho * c),
        ];
        for (a, b, v) in entries {
            h[(a, b)] += scale * v;
            if a != b {
                h[(b, a)] += scale * v;
            }
        }
    }
}

/// `sum_t grad mu_t grad mu_t^T`.
fn gradient_gram(times: &[Vec<f64>], model: &SinusoidModel) -> DMatrix<f64> {
    let lay = ThetaLayout::of(model);
    let mut g = DMatrix::zeros(lay.len(), lay.len());
    let mut e = Vec::with_capacity(3 * lay.k);
    for (m, ts) in times.iter().enumerate() {
        for &t in ts {
            gradient_entries(model, lay, m, t, &mut e);
            for &(i, vi) in &e {
                for &(j, vj) in &e {
                    g[(i, j)] += vi * vj;
                }
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTrue {
    pub model: SinusoidModel,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Parameters of the assumed model closest, in least squares, to the
/// missampled signal. Damped Gauss-Newton started at the true parameters.
pub fn pseudo_true(times: &[Vec<f64>], truth: &SinusoidModel, delta: &MissamplingField) -> Result<PseudoTrue> {
    check_times(times, truth, Some(delta))?;
    let lay = ThetaLayout::of(truth);
    let n = total_len(times);
    let signal = true_signal(times, truth, delta)?;
    let tol = 1e-10 * n as f64;

    let residual_and_jacobian = |theta: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let model = SinusoidModel::from_theta(theta, lay.k, lay.m);
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, lay.len());
        let mut e = Vec::with_capacity(3 * lay.k);
        let mut row = 0;
        for (m, ts) in times.iter().enumerate() {
            let mu = evaluate_signal(&model, m, ts, None).expect("shape checked");
            for (i, &t) in ts.iter().enumerate() {
                r[row] = signal[m][i] - mu[i];
                gradient_entries(&model, lay, m, t, &mut e);
                for &(c, v) in &e {
                    j[(row, c)] = v;
                }
                row += 1;
            }
        }
        (r, j)
    };

    let mut theta = truth.to_theta();
    let (mut r, mut jac) = residual_and_jacobian(&theta);
    let mut f = r.norm_squared();
    let mut grad = jac.tr_mul(&r) * -2.0;
    let mut damping = 1e-3;
    let mut iterations = 0;
    while grad.norm() > tol && iterations < 500 {
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&r);
        let mut accepted = false;
        for _ in 0..40 {
            let mut lhs = jtj.clone();
            for i in 0..lay.len() {
                lhs[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let (rc, jc) = residual_and_jacobian(&cand);
            let fc = rc.norm_squared();
            if fc <= f {
                theta = cand;
                r = rc;
                jac = jc;
                f = fc;
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        grad = jac.tr_mul(&r) * -2.0;
        if !accepted {
            break;
        }
    }
    let gradient_norm = grad.norm();
    let model = canonical_model(&theta, lay)?;
    if gradient_norm > tol && !negligible_decrement(&jac, &r, f) {
        return Err(Error::PseudoTrueNotConverged {
            gradient_norm,
            best: Box::new(model),
        });
    }
    Ok(PseudoTrue {
        model,
        objective: f,
        gradient_norm,
        iterations,
    })
}

/// True when a full Gauss-Newton step could lower `f` by no more than
/// rounding noise.
fn negligible_decrement(jac: &DMatrix<f64>, r: &DVector<f64>, f: f64) -> bool {
    let jtr = jac.tr_mul(r);
    let Some(step) = jac.tr_mul(jac).cholesky().map(|c| c.solve(&jtr)) else {
        return false;
    };
    jtr.dot(&step) <= 1e-12 * f.max(f64::MIN_POSITIVE)
}

/// Folds negative amplitudes into the phase and validates.
fn canonical_model(theta: &[f64], lay: ThetaLayout) -> Result<SinusoidModel> {
    let mut th = theta.to_vec();
    for m in 0..lay.m {
        for k in 0..lay.k {
            if th[lay.rho(m, k)] < 0.0 {
                th[lay.rho(m, k)] = -th[lay.rho(m, k)];
                th[lay.phi(m, k)] += std::f64::consts::PI;
            }
        }
    }
    let raw = SinusoidModel::from_theta(&th, lay.k, lay.m);
    SinusoidModel::new(raw.omegas().to_vec(), raw.amplitudes().to_vec(), raw.phases().to_vec())
}

/// `A = (1/sigma_eps^2) sum [kappa_t hess mu_t - grad mu_t grad mu_t^T]`
/// with `kappa_t = s_t - mu_t(theta0)`.
pub fn fim_a(
    times: &[Vec<f64>],
    theta0: &SinusoidModel,
    truth: &SinusoidModel,
    delta: &MissamplingField,
    sigma_eps_sq: f64,
) -> Result<DMatrix<f64>> {
    check_times(times, theta0, Some(delta))?;
    let lay = ThetaLayout::of(theta0);
    let signal = true_signal(times, truth, delta)?;
    let mut a = -gradient_gram(times, theta0);
    for (m, ts) in times.iter().enumerate() {
        let mu = evaluate_signal(theta0, m, ts, None)?;
        for (i, &t) in ts.iter().enumerate() {
            let kappa = signal[m][i] - mu[i];
            if kappa != 0.0 {
                add_hessian(theta0, lay, m, t, kappa, &mut a);
            }
        }
    }
    a /= sigma_eps_sq;
    Ok(a)
}

/// `B = (sigma^2 / sigma_eps^4) sum grad mu_t grad mu_t^T`.
pub fn fim_b(times: &[Vec<f64>], theta0: &SinusoidModel, noise_var: f64, sigma_eps_sq: f64) -> Result<DMatrix<f64>> {
    check_times(times, theta0, None)?;
    Ok(gradient_gram(times, theta0) * (noise_var / (sigma_eps_sq * sigma_eps_sq)))
}

fn invert_checked(a: &DMatrix<f64>, lay: ThetaLayout) -> Result<DMatrix<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..a.nrows() {
        let row = a.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if row <= 1e-14 * scale {
            return Err(Error::SingularFim { parameter: lay.name(i) });
        }
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-13 * smax) {
        // name the parameter with the largest weight in the null direction
        let (idx, _) = svd.singular_values.argmin();
        let v = svd.v_t.as_ref().expect("computed").row(idx).transpose();
        let (worst, _) = v.abs().argmax();
        return Err(Error::SingularFim {
            parameter: lay.name(worst),
        });
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularFim { parameter: "unknown".into() })
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub mcrb_core: Vec<Vec<f64>>,
    pub bias_sq: Vec<Vec<f64>>,
    pub lb: Vec<Vec<f64>>,
}

/// `A^-1 B A^-1 + (theta~ - theta0)(theta~ - theta0)^T`, with phase
/// differences wrapped.
pub fn lower_bound(
    theta_tilde: &SinusoidModel,
    theta0: &SinusoidModel,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<LowerBound> {
    let lay = ThetaLayout::of(theta_tilde);
    if ThetaLayout::of(theta0).len() != lay.len() || a.nrows() != lay.len() || b.nrows() != lay.len() {
        return Err(Error::arg("parameter dimensions disagree"));
    }
    let ai = invert_checked(a, lay)?;
    let core = &ai * b * &ai;
    let core = (&core + core.transpose()) * 0.5;
    let tt = theta_tilde.to_theta();
    let t0 = theta0.to_theta();
    let phi_start = lay.k + lay.k * lay.m;
    let d = DVector::from_fn(lay.len(), |i, _| {
        let diff = tt[i] - t0[i];
        if i >= phi_start {
            wrap_phase(diff)
        } else {
            diff
        }
    });
    let bias = &d * d.transpose();
    let lb = &core + &bias;
    Ok(LowerBound {
        mcrb_core: to_rows(&core),
        bias_sq: to_rows(&bias),
        lb: to_rows(&lb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub pseudo_true: SinusoidModel,
    pub sigma_eps_sq: f64,
    pub matrix_a: Vec<Vec<f64>>,
    pub matrix_b: Vec<Vec<f64>>,
    pub mcrb_core: Vec<Vec<f64>>,
    pub bias_sq: Vec<Vec<f64>>,
    pub lb: Vec<Vec<f64>>,
    pub crb: Vec<Vec<f64>>,
    pub crb_freq: Vec<f64>,
    pub mcrb_freq: Vec<f64>,
    pub bias_sq_freq: Vec<f64>,
    pub lb_freq: Vec<f64>,
}

struct Chain {
    theta0: SinusoidModel,
    sigma_eps_sq: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    bound: LowerBound,
}

fn run_chain(times: &[Vec<f64>], truth: &SinusoidModel, delta: &MissamplingField, noise_var: f64) -> Result<Chain> {
    let theta0 = pseudo_true(times, truth, delta)?.model;
    let err = waveform_error(times, truth, delta, &theta0)?;
    let s2 = sigma_eps_sq(err, total_len(times), noise_var)?;
    let a = fim_a(times, &theta0, truth, delta, s2)?;
    let b = fim_b(times, &theta0, noise_var, s2)?;
    let bound = lower_bound(truth, &theta0, &a, &b)?;
    Ok(Chain {
        theta0,
        sigma_eps_sq: s2,
        a,
        b,
        bound,
    })
}

fn diag(m: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..k).map(|i| m[i][i]).collect()
}

/// Full bound report for one missampling realisation. The CRB is the same
/// chain evaluated with the missampling field set to zero.
pub fn bound_report(
    times: &[Vec<f64>],
    truth: &SinusoidModel,
    delta: &MissamplingField,
    noise_var: f64,
) -> Result<BoundReport> {
    if !(noise_var > 0.0) {
        return Err(Error::arg("noise variance must be positive"));
    }
    let main = run_chain(times, truth, delta, noise_var)?;
    let zero = MissamplingField::new(times.iter().map(|t| vec![0.0; t.len()]).collect());
    let crb = run_chain(times, truth, &zero, noise_var)?.bound.lb;
    let k = truth.n_components();
    Ok(BoundReport {
        crb_freq: diag(&crb, k),
        mcrb_freq: diag(&main.bound.mcrb_core, k),
        bias_sq_freq: diag(&main.bound.bias_sq, k),
        lb_freq: diag(&main.bound.lb, k),
        pseudo_true: main.theta0,
        sigma_eps_sq: main.sigma_eps_sq,
        matrix_a: to_rows(&main.a),
        matrix_b: to_rows(&main.b),
        mcrb_core: main.bound.mcrb_core,
        bias_sq: main.bound.bias_sq,
        lb: main.bound.lb,
        crb,
    })
}

/// Classical CRB (missampling ignored) for the given model.
pub fn crb(times: &[Vec<f64>], truth: &SinusoidModel, noise_var: f64) -> Result<Vec<Vec<f64>>> {
    let zero = MissamplingField::new(times.iter().map(|t| vec![0.0; t.len()]).collect());
    Ok(run_chain(times, truth, &zero, noise_var)?.bound.lb)
}

/// Expected Schuster periodogram at the true frequency of a single complex
/// exponential observed with Gaussian timing jitter of variance `sigma_delta_sq`.
pub fn expected_periodogram_peak(rho: f64, omega: f64, sigma_delta_sq: f64, noise_var: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::arg("N must be at least 1"));
    }
    let nf = n as f64;
    let atten = (-omega * omega * sigma_delta_sq).exp();
    Ok((nf * (rho * rho + noise_var) + rho * rho * nf * (nf - 1.0) * atten) / nf)
}
