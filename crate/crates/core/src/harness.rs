//! Monte Carlo experiments and the building blocks of the command line
//! tool.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_grid, mean_periodogram, pick_peaks, stacked_periodogram, PeriodogramEstimate};
use crate::bounds::{bound_report, record_times, BoundReport};
use crate::error::{Error, Result};
use crate::glosa::{run_glosa, AmplitudeEstimate, ZoomConfig, ZoomPenalties};
use crate::io::{read_records, TruthFile};
use crate::signal::{noise_var_for_mean_snr, RecordSet};
use crate::simulator::{fit_intensity, reference_models, substream, synthesize, IntensityModel, SimConfig};
use crate::solver::ObjectiveTerms;

/// Largest tolerated fraction of failed replicates per method and SNR.
pub const FAILURE_BUDGET: f64 = 0.05;

pub const METHODS: [&str; 3] = ["glosa", "mean_periodogram", "stacked_periodogram"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub snr_list: Vec<f64>,
    pub n_runs: usize,
    pub seed: u64,
    /// Zoom settings. Its `penalties` field is replaced by `penalties`.
    pub zoom: ZoomConfig,
    pub penalties: ZoomPenalties,
    pub sim: SimConfig,
    /// Records CSV whose sampling times define the patterns. The built-in
    /// reference patterns are used when absent.
    pub patterns: Option<PathBuf>,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            snr_list: vec![0.0, 5.0, 10.0, 15.0],
            n_runs: 100,
            seed: 1,
            zoom: ZoomConfig::default(),
            penalties: ZoomPenalties::default(),
            sim: SimConfig::default(),
            patterns: None,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::arg("n_runs must be at least 1"));
        }
        if self.snr_list.is_empty() || self.snr_list.iter().any(|s| !s.is_finite()) {
            return Err(Error::arg("snr_list must hold finite values"));
        }
        self.zoom_config().validate()?;
        self.sim.validate()
    }

    pub fn zoom_config(&self) -> ZoomConfig {
        ZoomConfig {
            penalties: self.penalties.clone(),
            ..self.zoom.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::arg(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn sampling_models(&self) -> Result<Vec<IntensityModel>> {
        match &self.patterns {
            None => reference_models(self.sim.change_point_z),
            Some(path) => read_records(path)?
                .iter()
                .map(|r| fit_intensity(r.id(), r.times(), self.sim.change_point_z))
                .collect(),
        }
    }
}

/// Squared error per true frequency.
///
/// Pairs are matched greedily by increasing distance, one estimate per
/// truth. A truth left over because there are fewer estimates than truths
/// is scored against the nearest estimate.
pub fn associate(truth: &[f64], estimates: &[f64]) -> Result<Vec<f64>> {
    if estimates.is_empty() {
        return Err(Error::arg("no estimates to associate"));
    }
    let mut pairs: Vec<(f64, usize, usize)> = truth
        .iter()
        .enumerate()
        .flat_map(|(i, w)| estimates.iter().enumerate().map(move |(j, e)| ((e - w).abs(), i, j)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut err: Vec<Option<f64>> = vec![None; truth.len()];
    let mut used = vec![false; estimates.len()];
    for (d, i, j) in pairs {
        if err[i].is_none() && !used[j] {
            err[i] = Some(d * d);
            used[j] = true;
        }
    }
    Ok(err
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            e.unwrap_or_else(|| {
                estimates
                    .iter()
                    .map(|x| (x - truth[i]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    /// Mean squared error per true frequency over successful replicates.
    pub mse: Vec<f64>,
    pub sum_mse: f64,
    pub runs: usize,
    pub failures: Vec<ReplicateFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurves {
    pub crb_freq: Vec<f64>,
    pub mcrb_freq: Vec<f64>,
    pub bias_sq_freq: Vec<f64>,
    pub lb_freq: Vec<f64>,
    pub crb_sum: f64,
    pub mcrb_sum: f64,
    pub bias_sq_sum: f64,
    pub lb_sum: f64,
    pub runs: usize,
    pub failures: Vec<ReplicateFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrResult {
    pub snr_db: f64,
    pub methods: Vec<MethodScore>,
    pub bounds: BoundCurves,
    pub n_runs: usize,
    /// Excluded from serialisation so result files are reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl SnrResult {
    pub fn method(&self, name: &str) -> Option<&MethodScore> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub true_omegas: Vec<f64>,
    pub snrs: Vec<SnrResult>,
}

impl ExperimentResult {
    /// Fails when any method or the bound computation lost more than
    /// [`FAILURE_BUDGET`] of its replicates at some SNR.
    pub fn check_failure_budget(&self) -> Result<()> {
        for s in &self.snrs {
            let counts = s
                .methods
                .iter()
                .map(|m| m.failures.len())
                .chain(std::iter::once(s.bounds.failures.len()));
            for failed in counts {
                if failed as f64 > FAILURE_BUDGET * s.n_runs as f64 {
                    return Err(Error::FailureBudget {
                        failed,
                        total: s.n_runs,
                    });
                }
            }
        }
        Ok(())
    }

    /// Plot-ready CSV: one row per SNR and method, bound curves included
    /// as pseudo-methods.
    pub fn to_csv(&self) -> Result<String> {
        let k = self.true_omegas.len();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["snr_db".to_string(), "method".into(), "sum".into()];
        header.extend((1..=k).map(|i| format!("omega_{i}")));
        header.extend(["runs".into(), "failures".into()]);
        w.write_record(&header)?;
        for s in &self.snrs {
            let mut row = |name: &str, sum: f64, per: &[f64], runs: usize, fails: usize| -> Result<()> {
                let mut r = vec![s.snr_db.to_string(), name.to_string(), sum.to_string()];
                r.extend(per.iter().map(|v| v.to_string()));
                r.extend([runs.to_string(), fails.to_string()]);
                w.write_record(&r)?;
                Ok(())
            };
            for m in &s.methods {
                row(&m.method, m.sum_mse, &m.mse, m.runs, m.failures.len())?;
            }
            let b = &s.bounds;
            let nf = b.failures.len();
            row("crb", b.crb_sum, &b.crb_freq, b.runs, nf)?;
            row("mcrb", b.mcrb_sum, &b.mcrb_freq, b.runs, nf)?;
            row("bias_sq", b.bias_sq_sum, &b.bias_sq_freq, b.runs, nf)?;
            row("lb", b.lb_sum, &b.lb_freq, b.runs, nf)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        crate::io::save_json(self, &out_dir.join("result.json"))?;
        std::fs::write(out_dir.join("result.csv"), self.to_csv()?)?;
        let mut timing = String::from("snr_db,wall_clock_s\n");
        for s in &self.snrs {
            timing.push_str(&format!("{},{}\n", s.snr_db, s.wall_clock_s));
        }
        std::fs::write(out_dir.join("timing.csv"), timing)?;
        Ok(())
    }
}

struct Replicate {
    errors: [std::result::Result<Vec<f64>, String>; 3],
    bounds: std::result::Result<BoundReport, String>,
}

fn run_replicate(
    config: &ExperimentConfig,
    zoom: &ZoomConfig,
    models: &[IntensityModel],
    snr_db: f64,
    rep: usize,
) -> Replicate {
    // Every SNR reuses the draws of replicate `rep`; only the noise scale
    // changes between SNRs.
    let mut rng = substream(config.seed, 0, rep as u64);
    let data = match synthesize(&config.sim, models, snr_db, &mut rng) {
        Ok(d) => d,
        Err(e) => {
            let msg = format!("synthesis: {e}");
            return Replicate {
                errors: [Err(msg.clone()), Err(msg.clone()), Err(msg.clone())],
                bounds: Err(msg),
            };
        }
    };
    let truth = data.truth.omegas();
    let k = truth.len();
    let glosa = run_glosa(&data.records, zoom).and_then(|e| associate(truth, &e.omegas));
    let baseline = |f: fn(&RecordSet, &[f64]) -> Result<PeriodogramEstimate>| -> Result<Vec<f64>> {
        let grid = baseline_grid(&data.records, zoom.omega_max)?;
        associate(truth, &pick_peaks(&f(&data.records, &grid)?, k)?)
    };
    let bounds = bound_report(&record_times(&data.records), &data.truth, &data.missampling, data.noise_var);
    Replicate {
        errors: [
            glosa.map_err(|e| e.to_string()),
            baseline(mean_periodogram).map_err(|e| e.to_string()),
            baseline(stacked_periodogram).map_err(|e| e.to_string()),
        ],
        bounds: bounds.map_err(|e| e.to_string()),
    }
}

fn mean_rows(rows: &[&Vec<f64>], k: usize) -> Vec<f64> {
    let mut acc = vec![0.0; k];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    let n = rows.len().max(1) as f64;
    acc.into_iter().map(|a| if rows.is_empty() { f64::NAN } else { a / n }).collect()
}

fn summarize(snr_db: f64, reps: &[Replicate], k: usize, wall_clock_s: f64) -> SnrResult {
    let methods = METHODS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let ok: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r.errors[i].as_ref().ok()).collect();
            let failures = reps
                .iter()
                .enumerate()
                .filter_map(|(n, r)| {
                    r.errors[i].as_ref().err().map(|m| ReplicateFailure {
                        replicate: n,
                        message: m.clone(),
                    })
                })
                .collect();
            let mse = mean_rows(&ok, k);
            MethodScore {
                method: name.to_string(),
                sum_mse: mse.iter().sum(),
                mse,
                runs: ok.len(),
                failures,
            }
        })
        .collect();
    let ok: Vec<&BoundReport> = reps.iter().filter_map(|r| r.bounds.as_ref().ok()).collect();
    let pick = |f: fn(&BoundReport) -> &Vec<f64>| mean_rows(&ok.iter().map(|b| f(b)).collect::<Vec<_>>(), k);
    let crb_freq = pick(|b| &b.crb_freq);
    let mcrb_freq = pick(|b| &b.mcrb_freq);
    let bias_sq_freq = pick(|b| &b.bias_sq_freq);
    let lb_freq = pick(|b| &b.lb_freq);
    let bounds = BoundCurves {
        crb_sum: crb_freq.iter().sum(),
        mcrb_sum: mcrb_freq.iter().sum(),
        bias_sq_sum: bias_sq_freq.iter().sum(),
        lb_sum: lb_freq.iter().sum(),
        crb_freq,
        mcrb_freq,
        bias_sq_freq,
        lb_freq,
        runs: ok.len(),
        failures: reps
            .iter()
            .enumerate()
            .filter_map(|(n, r)| {
                r.bounds.as_ref().err().map(|m| ReplicateFailure {
                    replicate: n,
                    message: m.clone(),
                })
            })
            .collect(),
    };
    SnrResult {
        snr_db,
        methods,
        bounds,
        n_runs: reps.len(),
        wall_clock_s,
    }
}

/// Runs the full SNR sweep. Replicate failures are recorded, not raised;
/// call [`ExperimentResult::check_failure_budget`] afterwards.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let zoom = config.zoom_config();
    let models = config.sampling_models()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::arg(e.to_string()))?;
    let (true_omegas, _) = config.sim.components();
    let k = true_omegas.len();
    let mut snrs = Vec::with_capacity(config.snr_list.len());
    for &snr in &config.snr_list {
        let start = Instant::now();
        let reps: Vec<Replicate> = pool.install(|| {
            (0..config.n_runs)
                .into_par_iter()
                .map(|rep| run_replicate(config, &zoom, &models, snr, rep))
                .collect()
        });
        snrs.push(summarize(snr, &reps, k, start.elapsed().as_secs_f64()));
    }
    Ok(ExperimentResult { true_omegas, snrs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub omegas: Vec<f64>,
    pub cycles_per_kyr: Vec<f64>,
    pub periods_kyr: Vec<f64>,
}

impl FrequencyTable {
    pub fn from_omegas(omegas: &[f64]) -> Self {
        Self {
            omegas: omegas.to_vec(),
            cycles_per_kyr: omegas.iter().map(|w| w / (2.0 * PI)).collect(),
            periods_kyr: omegas.iter().map(|w| 2.0 * PI / w).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub frequencies: Option<FrequencyTable>,
    pub error: Option<String>,
    pub spectrum: PeriodogramEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlosaReport {
    pub frequencies: FrequencyTable,
    /// Amplitudes on the input scale.
    pub amplitudes: AmplitudeEstimate,
    /// Band centres and powers of the last solved zoom level.
    pub band_centers: Vec<f64>,
    pub band_powers: Vec<f64>,
    pub unconverged_levels: Vec<usize>,
    pub rank_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub glosa: GlosaReport,
    pub mean_periodogram: BaselineReport,
    pub stacked_periodogram: BaselineReport,
}

impl EstimateReport {
    /// Period comparison table, one row per estimated component.
    pub fn period_table(&self) -> String {
        let col = |b: &BaselineReport| b.frequencies.as_ref().map(|f| f.periods_kyr.clone()).unwrap_or_default();
        let (mean, stacked) = (col(&self.mean_periodogram), col(&self.stacked_periodogram));
        let cell = |v: Option<&f64>| v.map_or("-".to_string(), |p| format!("{p:.2}"));
        let mut out = format!("{:>4} {:>12} {:>12} {:>12}\n", "k", "glosa", "mean", "stacked");
        let n = self.glosa.frequencies.periods_kyr.len().max(mean.len()).max(stacked.len());
        for i in 0..n {
            out.push_str(&format!(
                "{:>4} {:>12} {:>12} {:>12}\n",
                i + 1,
                cell(self.glosa.frequencies.periods_kyr.get(i)),
                cell(mean.get(i)),
                cell(stacked.get(i))
            ));
        }
        out
    }

    /// Baseline spectra on their common grid: `omega,mean,stacked`.
    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("omega,mean_periodogram,stacked_periodogram\n");
        let (m, s) = (&self.mean_periodogram.spectrum, &self.stacked_periodogram.spectrum);
        for i in 0..m.grid.len() {
            out.push_str(&format!("{},{},{}\n", m.grid[i], m.power[i], s.power[i]));
        }
        out
    }

    /// GLOSA band powers of the last zoom level: `band_center,power`.
    pub fn glosa_spectrum_csv(&self) -> String {
        let mut out = String::from("band_center,power\n");
        for (c, p) in self.glosa.band_centers.iter().zip(&self.glosa.band_powers) {
            out.push_str(&format!("{c},{p}\n"));
        }
        out
    }
}

/// GLOSA and both baselines on one data set. Baselines pick `peaks`
/// maxima, defaulting to the number of GLOSA components.
pub fn estimate_command(records: &RecordSet, zoom: &ZoomConfig, peaks: Option<usize>) -> Result<EstimateReport> {
    let est = run_glosa(records, zoom)?;
    let last = est.levels.last().expect("at least one zoom level");
    let glosa = GlosaReport {
        frequencies: FrequencyTable::from_omegas(&est.omegas),
        amplitudes: est.raw_readout.clone(),
        band_centers: (0..last.grid.len()).map(|c| last.grid.center(c)).collect(),
        band_powers: last.band_powers.clone(),
        unconverged_levels: est.levels.iter().filter(|l| !l.converged).map(|l| l.level).collect(),
        rank_warning: est.gridless.rank_warning,
    };
    let k = peaks.unwrap_or(est.omegas.len());
    let grid = baseline_grid(records, zoom.omega_max)?;
    let baseline = |spectrum: PeriodogramEstimate| match pick_peaks(&spectrum, k) {
        Ok(w) => BaselineReport {
            frequencies: Some(FrequencyTable::from_omegas(&w)),
            error: None,
            spectrum,
        },
        Err(e) => BaselineReport {
            frequencies: None,
            error: Some(e.to_string()),
            spectrum,
        },
    };
    Ok(EstimateReport {
        glosa,
        mean_periodogram: baseline(mean_periodogram(records, &grid)?),
        stacked_periodogram: baseline(stacked_periodogram(records, &grid)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub snr_db: f64,
    pub crb_sum: f64,
    pub mcrb_sum: f64,
    pub bias_sq_sum: f64,
    pub lb_sum: f64,
}

/// Summed frequency bounds for a fixed truth and sampling pattern at each
/// SNR; the noise variance follows from the truth's mean signal power.
pub fn bounds_command(truth: &TruthFile, pattern: &RecordSet, snr_list: &[f64]) -> Result<Vec<BoundRow>> {
    truth.missampling.check_shape(pattern)?;
    let times = record_times(pattern);
    snr_list
        .iter()
        .map(|&snr| {
            let nv = noise_var_for_mean_snr(&truth.model, snr)?;
            let r = bound_report(&times, &truth.model, &truth.missampling, nv)?;
            Ok(BoundRow {
                snr_db: snr,
                crb_sum: r.crb_freq.iter().sum(),
                mcrb_sum: r.mcrb_freq.iter().sum(),
                bias_sq_sum: r.bias_sq_freq.iter().sum(),
                lb_sum: r.lb_freq.iter().sum(),
            })
        })
        .collect()
}

pub fn bound_rows_csv(rows: &[BoundRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub level: usize,
    pub bands: usize,
    pub active: usize,
    pub terms: ObjectiveTerms,
    /// Coupling and sparsity terms relative to the data fit.
    pub coupling_ratio: f64,
    pub sparsity_ratio: f64,
}

/// Magnitudes of the three objective terms at every zoom level, for
/// choosing penalty weights.
pub fn term_balance(records: &RecordSet, zoom: &ZoomConfig) -> Result<Vec<TermRow>> {
    let est = run_glosa(records, zoom)?;
    Ok(est
        .levels
        .iter()
        .map(|l| TermRow {
            level: l.level,
            bands: l.grid.len(),
            active: l.active.len(),
            terms: l.terms,
            coupling_ratio: l.terms.coupling / l.terms.data_fit,
            sparsity_ratio: l.terms.sparsity / l.terms.data_fit,
        })
        .collect())
}
