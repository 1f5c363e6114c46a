//! Coarse-to-fine global spectral estimation.
//!
//! Each zoom level solves the joint program on the current band grid,
//! keeps the bands whose power exceeds `tau` and splits them into
//! `subdivision` equal sub-bands. After the last level, contiguous surviving
//! bands are merged into regions, one frequency is fitted per region by a
//! gridless variable-projection search, and amplitudes are read out by least
//! squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_wideband, refine_grid, BandGrid, NarrowbandMatrix, WidebandDictionary};
use crate::error::{Error, Result};
use crate::signal::{wrap_phase, RecordSet};
use crate::solver::{band_power, solve_joint, ObjectiveTerms, PenaltyConfig, SolverSettings};

/// Penalty template for the zoom loop.
///
/// `zeta` holds one value per record, or a single value shared by all.
/// `q` holds a single value, or one value per initial band; sub-bands
/// inherit the weight of the band they were split from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoomPenalties {
    pub lambda: f64,
    pub zeta: Vec<f64>,
    pub q: Vec<f64>,
}

impl Default for ZoomPenalties {
    fn default() -> Self {
        Self {
            lambda: 15.0,
            zeta: vec![10.0],
            q: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridlessSettings {
    pub scan_points: usize,
    pub max_sweeps: usize,
    pub move_tol: f64,
    pub gradient_tol: f64,
    /// Singular values below `rcond * s_max` are treated as zero.
    pub rcond: f64,
    /// Each search region is widened on both sides by this many band widths
    /// of the last solved zoom level (never past the midpoint to a
    /// neighbouring region).
    pub guard_bands: f64,
    /// Regions separated by at most this many band widths are searched as
    /// one region.
    pub bridge_bands: f64,
}

impl Default for GridlessSettings {
    fn default() -> Self {
        Self {
            scan_points: 200,
            max_sweeps: 20,
            move_tol: 1e-10,
            gradient_tol: 1e-9,
            rcond: 1e-9,
            guard_bands: 0.0,
            bridge_bands: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoomConfig {
    pub zoom_steps: usize,
    pub initial_bands: usize,
    pub subdivision: usize,
    pub tau: f64,
    pub omega_max: f64,
    pub penalties: ZoomPenalties,
    /// Standardise each record before estimation.
    pub standardize: bool,
    /// Scale dictionary columns to unit norm before each solve.
    pub normalize_columns: bool,
    /// Fit an unpenalised intercept per record.
    pub include_dc: bool,
    /// Continue with the best feasible iterate when a zoom-level solve hits
    /// its iteration cap; the level diagnostics record it.
    pub accept_unconverged: bool,
    pub solver: SolverSettings,
    pub gridless: GridlessSettings,
}

impl Default for ZoomConfig {
    fn default() -> Self {
        Self {
            zoom_steps: 4,
            initial_bands: 16,
            subdivision: 4,
            tau: 1e-5,
            omega_max: 2.0 * std::f64::consts::PI / 8.0,
            penalties: ZoomPenalties::default(),
            standardize: true,
            normalize_columns: true,
            include_dc: true,
            accept_unconverged: true,
            solver: SolverSettings::default(),
            gridless: GridlessSettings::default(),
        }
    }
}

impl ZoomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zoom_steps < 1 {
            return Err(Error::arg("zoom_steps must be at least 1"));
        }
        if self.initial_bands < 2 {
            return Err(Error::arg("initial_bands must be at least 2"));
        }
        if self.subdivision < 2 {
            return Err(Error::arg("subdivision must be at least 2"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::arg("tau must be positive"));
        }
        if !(self.omega_max > 0.0) || !self.omega_max.is_finite() {
            return Err(Error::arg("omega_max must be positive"));
        }
        let p = &self.penalties;
        if p.zeta.is_empty() || p.q.is_empty() {
            return Err(Error::arg("zeta and q need at least one entry"));
        }
        if p.q.len() != 1 && p.q.len() != self.initial_bands {
            return Err(Error::arg("q must have one entry or one per initial band"));
        }
        PenaltyConfig::new(p.zeta.clone(), p.lambda, p.q.clone())?;
        if !(self.gridless.guard_bands >= 0.0) || !(self.gridless.bridge_bands >= 0.0) {
            return Err(Error::arg("guard_bands and bridge_bands must be non-negative"));
        }
        if self.gridless.scan_points < 3 {
            return Err(Error::arg("gridless scan needs at least 3 points"));
        }
        Ok(())
    }

    /// Width of the bands after every refinement step.
    pub fn final_band_width(&self) -> f64 {
        self.omega_max / (self.initial_bands as f64 * (self.subdivision as f64).powi(self.zoom_steps as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub grid: BandGrid,
    pub band_powers: Vec<f64>,
    pub active: Vec<usize>,
    pub terms: ObjectiveTerms,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridlessResult {
    pub omegas: Vec<f64>,
    pub objective: f64,
    /// Box-projected gradient norm at the returned point.
    pub gradient_norm: f64,
    pub sweeps: usize,
    /// Set when the narrowband matrix was numerically rank deficient.
    pub rank_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeEstimate {
    /// `M x K`.
    pub amplitudes: Vec<Vec<f64>>,
    pub phases: Vec<Vec<f64>>,
    pub global_amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEstimate {
    pub omegas: Vec<f64>,
    /// Amplitudes and phases on the scale the estimation ran on.
    pub readout: AmplitudeEstimate,
    /// Amplitudes mapped back to the input scale (equal to `readout` when
    /// standardisation is off).
    pub raw_readout: AmplitudeEstimate,
    pub levels: Vec<LevelDiagnostics>,
    pub final_grid: BandGrid,
    pub regions: BandGrid,
    pub gridless: GridlessResult,
}

impl GlobalEstimate {
    pub fn periods(&self) -> Vec<f64> {
        self.omegas.iter().map(|w| 2.0 * std::f64::consts::PI / w).collect()
    }
}

fn level_dictionaries(data: &RecordSet, grid: &BandGrid, config: &ZoomConfig) -> Vec<WidebandDictionary> {
    build_wideband(data, grid)
        .into_iter()
        .map(|d| {
            let d = if config.include_dc { d.centered() } else { d };
            if config.normalize_columns {
                d.normalized().0
            } else {
                d
            }
        })
        .collect()
}

fn centered_set(data: &RecordSet) -> Result<RecordSet> {
    let recs = data
        .iter()
        .map(|r| {
            let mean = r.mean();
            r.with_values(r.values().iter().map(|v| v - mean).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    RecordSet::new(recs)
}

pub fn run_glosa(records: &RecordSet, config: &ZoomConfig) -> Result<GlobalEstimate> {
    config.validate()?;
    let m = records.len();
    let zeta = match config.penalties.zeta.len() {
        1 => vec![config.penalties.zeta[0]; m],
        n if n == m => config.penalties.zeta.clone(),
        n => return Err(Error::arg(format!("zeta has {n} entries for {m} records"))),
    };
    let data = if config.standardize {
        records.standardized()
    } else {
        records.clone()
    };
    let fit_data = if config.include_dc { centered_set(&data)? } else { data.clone() };

    let mut grid = BandGrid::uniform(config.omega_max, config.initial_bands)?;
    let mut q = if config.penalties.q.len() == 1 {
        vec![config.penalties.q[0]; grid.len()]
    } else {
        config.penalties.q.clone()
    };
    let mut levels = Vec::with_capacity(config.zoom_steps);
    let mut last_active = Vec::new();
    let mut last_grid = grid.clone();

    for level in 1..=config.zoom_steps {
        let dicts = level_dictionaries(&fit_data, &grid, config);
        let penalties = PenaltyConfig::new(zeta.clone(), config.penalties.lambda, q.clone())?;
        let sol = match solve_joint(&fit_data, &dicts, &penalties, &config.solver) {
            Ok(sol) => sol,
            Err(Error::NotConverged { best, .. }) if config.accept_unconverged => *best,
            Err(e) => return Err(e),
        };
        let powers = band_power(&sol);
        let active: Vec<usize> = (0..grid.len()).filter(|&c| powers[c] > config.tau).collect();
        levels.push(LevelDiagnostics {
            level,
            grid: grid.clone(),
            band_powers: powers.clone(),
            active: active.clone(),
            terms: sol.terms,
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            converged: sol.converged,
        });
        if active.is_empty() {
            return Err(Error::AllBandsPruned {
                level,
                band_powers: powers,
            });
        }
        let next = refine_grid(&grid, &active, config.subdivision)?;
        q = active
            .iter()
            .flat_map(|&c| std::iter::repeat_n(q[c], config.subdivision))
            .collect();
        last_grid = grid;
        last_active = active;
        grid = next;
    }

    // Sub-bands of one parent are contiguous, so merging the refined grid
    // gives the same regions as merging the last active set.
    let merged = last_grid.merge_adjacent(&last_active)?;
    let width = last_grid.width(last_active[0]);
    let bridged = bridge_regions(&merged, config.gridless.bridge_bands * width)?;
    let regions = widen_regions(&bridged, config.gridless.guard_bands * width, config.omega_max)?;
    let gridless = gridless_refine_with(&data, &regions, config.include_dc, &config.gridless)?;
    let readout = amplitude_readout_with(&data, &gridless.omegas, config.include_dc)?;
    let raw_readout = if config.standardize {
        rescale_readout(&readout, records)
    } else {
        readout.clone()
    };
    Ok(GlobalEstimate {
        omegas: gridless.omegas.clone(),
        readout,
        raw_readout,
        levels,
        final_grid: grid,
        regions,
        gridless,
    })
}

/// Joins consecutive regions separated by a gap of at most `max_gap`.
pub fn bridge_regions(regions: &BandGrid, max_gap: f64) -> Result<BandGrid> {
    let mut starts: Vec<f64> = Vec::new();
    let mut ends: Vec<f64> = Vec::new();
    for (&s, &e) in regions.starts().iter().zip(regions.ends()) {
        match ends.last_mut() {
            Some(last) if s - *last <= max_gap * (1.0 + 1e-9) => *last = e,
            _ => {
                starts.push(s);
                ends.push(e);
            }
        }
    }
    BandGrid::new(starts, ends)
}

/// Widens every region by `margin` on both sides, stopping halfway to a
/// neighbouring region and inside `(0, upper]`.
pub fn widen_regions(regions: &BandGrid, margin: f64, upper: f64) -> Result<BandGrid> {
    if margin == 0.0 {
        return Ok(regions.clone());
    }
    let (s, e) = (regions.starts(), regions.ends());
    let n = regions.len();
    let starts = (0..n)
        .map(|i| {
            let limit = if i > 0 { 0.5 * (e[i - 1] + s[i]) } else { 0.0 };
            (s[i] - margin).max(limit)
        })
        .collect();
    let ends = (0..n)
        .map(|i| {
            let limit = if i + 1 < n { 0.5 * (e[i] + s[i + 1]) } else { upper.max(e[i]) };
            (e[i] + margin).min(limit)
        })
        .collect();
    BandGrid::new(starts, ends)
}

fn rescale_readout(est: &AmplitudeEstimate, raw: &RecordSet) -> AmplitudeEstimate {
    let amplitudes: Vec<Vec<f64>> = est
        .amplitudes
        .iter()
        .zip(raw)
        .map(|(a, r)| {
            let s = r.std_dev();
            a.iter().map(|x| x * s).collect()
        })
        .collect();
    AmplitudeEstimate {
        global_amplitudes: column_means(&amplitudes),
        amplitudes,
        phases: est.phases.clone(),
    }
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.first().map_or(0, Vec::len);
    (0..k)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Residual of projecting every record onto its narrowband column space.
struct Projection<'a> {
    records: &'a RecordSet,
    include_dc: bool,
    rcond: f64,
}

struct ProjectionEval {
    objective: f64,
    gradient: Vec<f64>,
    rank_deficient: bool,
}

impl Projection<'_> {
    fn design(&self, times: &[f64], omegas: &[f64]) -> DMatrix<f64> {
        let a = NarrowbandMatrix::build_unchecked("", times, omegas).into_matrix();
        if self.include_dc {
            a.insert_column(2 * omegas.len(), 1.0)
        } else {
            a
        }
    }

    fn eval(&self, omegas: &[f64], want_gradient: bool) -> ProjectionEval {
        let k = omegas.len();
        let mut out = ProjectionEval {
            objective: 0.0,
            gradient: vec![0.0; k],
            rank_deficient: false,
        };
        for rec in self.records {
            let a = self.design(rec.times(), omegas);
            let y = DVector::from_column_slice(rec.values());
            let svd = a.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let eps = self.rcond * smax;
            if svd.singular_values.iter().any(|&s| s <= eps) {
                out.rank_deficient = true;
            }
            let c = svd.solve(&y, eps).expect("U and V were computed");
            let r = &y - &a * &c;
            out.objective += r.norm_squared();
            if want_gradient {
                for (j, &w) in omegas.iter().enumerate() {
                    let (ca, cb) = (c[2 * j], c[2 * j + 1]);
                    let mut g = 0.0;
                    for (&t, &ri) in rec.times().iter().zip(r.iter()) {
                        let (s, co) = (w * t).sin_cos();
                        g += ri * t * (-ca * s + cb * co);
                    }
                    out.gradient[j] -= 2.0 * g;
                }
            }
        }
        out
    }

    fn objective(&self, omegas: &[f64]) -> f64 {
        self.eval(omegas, false).objective
    }
}

/// Projection residual as a function of one frequency with the others
/// held fixed. The fixed columns are projected out once, leaving a 2-column
/// least-squares problem per record for every trial frequency.
struct CoordinateObjective<'a> {
    parts: Vec<RecordPart<'a>>,
}

/// Sampling times, orthonormal basis of the fixed columns (if any) and the
/// residual of the data after projecting them out.
type RecordPart<'a> = (&'a [f64], Option<DMatrix<f64>>, DVector<f64>);

impl<'a> CoordinateObjective<'a> {
    fn new(records: &'a RecordSet, omegas: &[f64], skip: usize, include_dc: bool, rcond: f64) -> Self {
        let others: Vec<f64> = omegas
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != skip)
            .map(|(_, &w)| w)
            .collect();
        let parts = records
            .iter()
            .map(|rec| {
                let y = DVector::from_column_slice(rec.values());
                let mut a = NarrowbandMatrix::build_unchecked("", rec.times(), &others).into_matrix();
                if include_dc {
                    let cols = a.ncols();
                    a = a.insert_column(cols, 1.0);
                }
                if a.ncols() == 0 {
                    return (rec.times(), None, y);
                }
                let svd = a.svd(true, false);
                let smax = svd.singular_values.max();
                let u = svd.u.expect("requested");
                let keep: Vec<usize> = (0..svd.singular_values.len())
                    .filter(|&i| svd.singular_values[i] > rcond * smax)
                    .collect();
                let q = u.select_columns(&keep);
                let y_perp = &y - &q * q.tr_mul(&y);
                (rec.times(), Some(q), y_perp)
            })
            .collect();
        Self { parts }
    }

    fn value(&self, w: f64) -> f64 {
        let mut total = 0.0;
        for (times, q, y) in &self.parts {
            let n = times.len();
            let mut b = DMatrix::zeros(n, 2);
            for (i, &t) in times.iter().enumerate() {
                let (s, c) = (w * t).sin_cos();
                b[(i, 0)] = c;
                b[(i, 1)] = s;
            }
            if let Some(q) = q {
                b -= q * q.tr_mul(&b);
            }
            let g = b.tr_mul(&b);
            let v = b.tr_mul(y);
            let coef = match g.clone().cholesky() {
                Some(ch) if g[(0, 0)].min(g[(1, 1)]) > 0.0 && g.determinant() > 1e-12 * g[(0, 0)] * g[(1, 1)] => ch.solve(&v),
                _ => g.svd(true, true).solve(&v, 1e-12).unwrap_or_else(|_| DVector::zeros(2)),
            };
            total += (y - &b * coef).norm_squared();
        }
        total
    }
}

fn projected_gradient(g: &[f64], omegas: &[f64], bands: &BandGrid) -> f64 {
    g.iter()
        .enumerate()
        .map(|(k, &gk)| {
            let at_lo = omegas[k] <= bands.starts()[k] && gk > 0.0;
            let at_hi = omegas[k] >= bands.ends()[k] && gk < 0.0;
            if at_lo || at_hi {
                0.0
            } else {
                gk * gk
            }
        })
        .sum::<f64>()
        .sqrt()
}

fn golden_section(f: &mut dyn FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// One frequency per band of `bands`, minimising the summed projection
/// residual over all records.
pub fn gridless_refine(records: &RecordSet, bands: &BandGrid, settings: &GridlessSettings) -> Result<GridlessResult> {
    gridless_refine_with(records, bands, false, settings)
}

pub fn gridless_refine_with(
    records: &RecordSet,
    bands: &BandGrid,
    include_dc: bool,
    settings: &GridlessSettings,
) -> Result<GridlessResult> {
    let k = bands.len();
    let params = 2 * k + usize::from(include_dc);
    if let Some(r) = records.iter().find(|r| r.len() < params) {
        return Err(Error::arg(format!(
            "record {} has {} samples for {params} narrowband columns",
            r.id(),
            r.len()
        )));
    }
    let proj = Projection {
        records,
        include_dc,
        rcond: settings.rcond,
    };
    // keep every frequency strictly positive
    let lo: Vec<f64> = (0..k).map(|c| bands.starts()[c].max(bands.width(c) * 1e-6)).collect();
    let hi: Vec<f64> = bands.ends().to_vec();
    let mut omegas: Vec<f64> = (0..k).map(|c| bands.center(c)).collect();
    let mut best = proj.objective(&omegas);
    let mut sweeps = 0;

    for _ in 0..settings.max_sweeps {
        sweeps += 1;
        let mut max_move: f64 = 0.0;
        for c in 0..k {
            let n = settings.scan_points;
            let step = (hi[c] - lo[c]) / (n - 1) as f64;
            let coord = CoordinateObjective::new(records, &omegas, c, include_dc, settings.rcond);
            let mut f = |w: f64| coord.value(w);
            let mut best_j = 0;
            let mut best_f = f64::INFINITY;
            for j in 0..n {
                let v = f(lo[c] + j as f64 * step);
                if v < best_f {
                    best_f = v;
                    best_j = j;
                }
            }
            let a = lo[c] + best_j.saturating_sub(1) as f64 * step;
            let b = (lo[c] + (best_j + 1) as f64 * step).min(hi[c]);
            let (w, fw) = golden_section(&mut f, a, b, 1e-13 * hi[c].max(1.0));
            let (w, fw) = if fw <= best_f { (w, fw) } else { (lo[c] + best_j as f64 * step, best_f) };
            if fw <= best {
                max_move = max_move.max((w - omegas[c]).abs());
                omegas[c] = w;
                best = fw;
            }
        }
        if max_move < settings.move_tol {
            break;
        }
    }

    // Newton polish on the analytic gradient.
    let mut eval = proj.eval(&omegas, true);
    let widths: Vec<f64> = (0..k).map(|c| hi[c] - lo[c]).collect();
    for _ in 0..30 {
        let pg = projected_gradient(&eval.gradient, &omegas, bands);
        if pg <= settings.gradient_tol {
            break;
        }
        let mut h = DMatrix::zeros(k, k);
        for j in 0..k {
            let step = (1e-7 * omegas[j]).min(1e-3 * widths[j]).max(1e-12);
            let mut up = omegas.clone();
            let mut dn = omegas.clone();
            up[j] += step;
            dn[j] -= step;
            let gu = proj.eval(&up, true).gradient;
            let gd = proj.eval(&dn, true).gradient;
            for i in 0..k {
                h[(i, j)] = (gu[i] - gd[i]) / (2.0 * step);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let g = DVector::from_column_slice(&eval.gradient);
        let Some(chol) = h.clone().cholesky() else {
            break;
        };
        let delta = chol.solve(&(-g));
        let cand: Vec<f64> = (0..k).map(|i| (omegas[i] + delta[i]).clamp(lo[i], hi[i])).collect();
        let ce = proj.eval(&cand, true);
        let improves = ce.objective <= eval.objective * (1.0 + 1e-14) + f64::MIN_POSITIVE;
        let gnew = projected_gradient(&ce.gradient, &cand, bands);
        if !(improves && (gnew < pg || ce.objective < eval.objective)) {
            break;
        }
        omegas = cand;
        eval = ce;
    }
    let gradient_norm = projected_gradient(&eval.gradient, &omegas, bands);
    Ok(GridlessResult {
        omegas,
        objective: eval.objective,
        gradient_norm,
        sweeps,
        rank_warning: eval.rank_deficient,
    })
}

/// Per-record least-squares amplitudes and phases at fixed frequencies.
pub fn amplitude_readout(records: &RecordSet, omegas: &[f64]) -> Result<AmplitudeEstimate> {
    amplitude_readout_with(records, omegas, false)
}

pub fn amplitude_readout_with(records: &RecordSet, omegas: &[f64], include_dc: bool) -> Result<AmplitudeEstimate> {
    let k = omegas.len();
    let cols = 2 * k + usize::from(include_dc);
    let mats = crate::dictionary::build_narrowband(records, omegas)?;
    let mut amplitudes = Vec::with_capacity(records.len());
    let mut phases = Vec::with_capacity(records.len());
    for (rec, nb) in records.iter().zip(mats) {
        if cols > rec.len() {
            return Err(Error::arg(format!(
                "record {} has {} samples for {cols} unknowns",
                rec.id(),
                rec.len()
            )));
        }
        let mut a = nb.into_matrix();
        if include_dc {
            a = a.insert_column(2 * k, 1.0);
        }
        let y = DVector::from_column_slice(rec.values());
        let c = a
            .svd(true, true)
            .solve(&y, 0.0)
            .map_err(|e| Error::arg(format!("least squares failed: {e}")))?;
        let mut amp = Vec::with_capacity(k);
        let mut ph = Vec::with_capacity(k);
        for j in 0..k {
            let (ca, cb) = (c[2 * j], c[2 * j + 1]);
            amp.push(ca.hypot(cb));
            ph.push(wrap_phase((-cb).atan2(ca)));
        }
        amplitudes.push(amp);
        phases.push(ph);
    }
    Ok(AmplitudeEstimate {
        global_amplitudes: column_means(&amplitudes),
        amplitudes,
        phases,
    })
}
