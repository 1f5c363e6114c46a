use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glosa_core::baselines::{baseline_grid, mean_periodogram, pick_peaks, stacked_periodogram};
use glosa_core::harness::{
    bound_rows_csv, bounds_command, estimate_command, run_experiment, term_balance, ExperimentConfig, FrequencyTable,
};
use glosa_core::io::{load_json, read_records, save_json, save_records, TruthFile};
use glosa_core::simulator::{fit_intensity, reference_models, substream, synthesize};
use glosa_core::{Error, ZoomConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_BUDGET: u8 = 4;

/// Joint line-spectrum estimation for irregularly sampled records.
#[derive(Parser, Debug)]
#[command(name = "glosa", version, allow_negative_numbers = true)]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config JSON; its zoom and penalty settings apply to every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    standardize: Option<Switch>,
    /// Sparsity weight on the shared spectrum.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Coupling weight, one value or one per record (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    zeta: Option<Vec<f64>>,
    /// Relative band-power pruning threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Number of zoom levels.
    #[arg(long, global = true)]
    zooms: Option<usize>,
    #[arg(long, global = true)]
    initial_bands: Option<usize>,
    /// Upper frequency limit in rad/kyr.
    #[arg(long, global = true)]
    omega_max: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Mean,
    Stacked,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize one data set: records.csv and truth.json.
    Simulate {
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        /// Perturb sampling times with simulated missampling.
        #[arg(long)]
        missampling: bool,
        /// Records CSV whose sampling times define the patterns.
        #[arg(long)]
        patterns: Option<PathBuf>,
    },
    /// Run GLOSA and both periodogram baselines on a records CSV.
    Estimate {
        records: PathBuf,
        /// Number of baseline peaks (defaults to the GLOSA component count).
        #[arg(long)]
        peaks: Option<usize>,
    },
    /// Periodogram baseline on a records CSV.
    Baseline {
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = Baseline::Mean)]
        method: Baseline,
        #[arg(long, default_value_t = 4)]
        peaks: usize,
    },
    /// Frequency bounds for a simulated truth over a list of SNRs.
    Bounds {
        #[arg(long)]
        truth: PathBuf,
        /// Records CSV providing the sampling times.
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 5.0, 10.0, 15.0])]
        snr: Vec<f64>,
    },
    /// Monte Carlo MSE-versus-SNR sweep.
    Experiment,
    /// Magnitudes of the objective terms per zoom level.
    TermBalance { records: PathBuf },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::FailureBudget { .. } => EXIT_BUDGET,
        _ => EXIT_DATA,
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|c| c.downcast_ref::<Error>())
            .map_or(EXIT_DATA, code_for);
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: anyhow!(msg.into()),
    }
}

fn load_config(opts: &GlobalOpts) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure {
            code: EXIT_CONFIG,
            error: anyhow::Error::from(e).context("loading config"),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(s) = opts.standardize {
        cfg.zoom.standardize = matches!(s, Switch::On);
    }
    if let Some(l) = opts.lambda {
        cfg.penalties.lambda = l;
    }
    if let Some(z) = &opts.zeta {
        cfg.penalties.zeta = z.clone();
    }
    if let Some(t) = opts.tau {
        cfg.zoom.tau = t;
    }
    if let Some(z) = opts.zooms {
        cfg.zoom.zoom_steps = z;
    }
    if let Some(c) = opts.initial_bands {
        cfg.zoom.initial_bands = c;
    }
    if let Some(w) = opts.omega_max {
        cfg.zoom.omega_max = w;
    }
    cfg.validate().map_err(|e| Failure {
        code: EXIT_CONFIG,
        error: anyhow::Error::from(e).context("invalid settings"),
    })?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn print_frequencies(label: &str, f: &FrequencyTable) {
    println!("{label}");
    println!("{:>12} {:>12} {:>12}", "rad/kyr", "1/kyr", "period kyr");
    for i in 0..f.omegas.len() {
        println!("{:>12.6} {:>12.6} {:>12.2}", f.omegas[i], f.cycles_per_kyr[i], f.periods_kyr[i]);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.opts)?;
    let zoom: ZoomConfig = cfg.zoom_config();
    let out = &cli.opts.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Simulate {
            snr,
            missampling,
            patterns,
        } => {
            let mut sim = cfg.sim.clone();
            sim.missampling |= missampling;
            let models = match patterns.or(cfg.patterns.clone()) {
                Some(p) => read_records(&p)?
                    .iter()
                    .map(|r| fit_intensity(r.id(), r.times(), sim.change_point_z))
                    .collect::<Result<Vec<_>, _>>()?,
                None => reference_models(sim.change_point_z)?,
            };
            let data = synthesize(&sim, &models, snr, &mut substream(cfg.seed, 1, 0))?;
            save_records(&data.records, &out.join("records.csv"))?;
            let truth = TruthFile {
                model: data.truth,
                missampling: data.missampling,
                noise_var: data.noise_var,
                snr_db: snr,
            };
            save_json(&truth, &out.join("truth.json"))?;
            println!("wrote {} and {}", out.join("records.csv").display(), out.join("truth.json").display());
        }
        Command::Estimate { records, peaks } => {
            let recs = read_records(&records)?;
            let report = estimate_command(&recs, &zoom, peaks)?;
            print!("{}", report.period_table());
            print_frequencies("glosa", &report.glosa.frequencies);
            for (name, b) in [
                ("mean periodogram", &report.mean_periodogram),
                ("stacked periodogram", &report.stacked_periodogram),
            ] {
                if let Some(e) = &b.error {
                    eprintln!("{name}: {e}");
                }
            }
            save_json(&report, &out.join("estimate.json"))?;
            write(out, "periods.txt", &report.period_table())?;
            write(out, "spectrum.csv", &report.spectrum_csv())?;
            write(out, "glosa_spectrum.csv", &report.glosa_spectrum_csv())?;
        }
        Command::Baseline { records, method, peaks } => {
            let recs = read_records(&records)?;
            let grid = baseline_grid(&recs, zoom.omega_max)?;
            let est = match method {
                Baseline::Mean => mean_periodogram(&recs, &grid)?,
                Baseline::Stacked => stacked_periodogram(&recs, &grid)?,
            };
            let mut csv = String::from("omega,power\n");
            for (w, p) in est.grid.iter().zip(&est.power) {
                csv.push_str(&format!("{w},{p}\n"));
            }
            write(out, "baseline_spectrum.csv", &csv)?;
            let omegas = pick_peaks(&est, peaks)?;
            print_frequencies(&format!("{method:?} periodogram").to_lowercase(), &FrequencyTable::from_omegas(&omegas));
        }
        Command::Bounds { truth, pattern, snr } => {
            let truth: TruthFile = load_json(&truth)?;
            let pattern = read_records(&pattern)?;
            let csv = bound_rows_csv(&bounds_command(&truth, &pattern, &snr)?)?;
            print!("{csv}");
            write(out, "bounds.csv", &csv)?;
        }
        Command::Experiment => {
            let result = run_experiment(&cfg)?;
            result.write(out)?;
            for s in &result.snrs {
                let methods: Vec<String> = s.methods.iter().map(|m| format!("{} {:.3e}", m.method, m.sum_mse)).collect();
                println!(
                    "{:>6.1} dB  {}  crb {:.3e}  lb {:.3e}",
                    s.snr_db,
                    methods.join("  "),
                    s.bounds.crb_sum,
                    s.bounds.lb_sum
                );
            }
            result.check_failure_budget()?;
        }
        Command::TermBalance { records } => {
            let recs = read_records(&records)?;
            let rows = term_balance(&recs, &zoom)?;
            println!(
                "{:>5} {:>6} {:>6} {:>12} {:>12} {:>12} {:>9} {:>9}",
                "level", "bands", "active", "data_fit", "coupling", "sparsity", "coup/fit", "spar/fit"
            );
            for r in &rows {
                println!(
                    "{:>5} {:>6} {:>6} {:>12.4e} {:>12.4e} {:>12.4e} {:>9.3} {:>9.3}",
                    r.level,
                    r.bands,
                    r.active,
                    r.terms.data_fit,
                    r.terms.coupling,
                    r.terms.sparsity,
                    r.coupling_ratio,
                    r.sparsity_ratio
                );
            }
            let json = serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)?;
            write(out, "term_balance.json", &json)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.opts.zeta.as_ref().is_some_and(|z| z.is_empty()) {
        let f = config_error("--zeta needs at least one value");
        eprintln!("error: {}", f.error);
        return ExitCode::from(f.code);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
