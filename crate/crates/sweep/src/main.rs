use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coopspin_core::analysis::{
    fit_decaying_sinusoid, fit_inverse, fit_linear, fit_lorentzian, fit_sensitivity_model,
    DecayFitOptions, FitResult, LsqOptions,
};
use coopspin_sweep::config::{parse_config_with, ExperimentConfig, Format, Overrides};
use coopspin_sweep::experiments::{self, Outcome, RunError};
use coopspin_sweep::output;

const CONFIG_ERROR: u8 = 1;
const NUMERICAL_FAILURE: u8 = 2;

/// Cooperative spin amplifier simulator: runs feedback, resonance, noise
/// and regime experiments and writes plot-ready tables.
#[derive(Parser)]
#[command(name = "coopspin", version)]
struct Cli {
    /// Experiment config (TOML). Without it the baseline calibration is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Parent directory for run directories [default: output.dir, else ./runs]
    #[arg(long, global = true, env = "COOPSPIN_OUT", value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for grid points [default: available cores]
    #[arg(long, global = true, env = "COOPSPIN_WORKERS", value_name = "N")]
    workers: Option<usize>,

    /// Table format; overrides output.format.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Free decay (or maser growth) at the configured operating point.
    Decay,
    /// Amplification versus drive frequency, or resonance shift versus feedback.
    FreqSweep,
    /// Effective coherence time versus feedback rate.
    FeedbackSweep,
    /// Resonant amplification versus bias field.
    FieldSweep,
    /// Simulated noise spectra and resonance sensitivity versus coherence time.
    Sensitivity,
    /// Regime and measured envelope rate versus feedback rate.
    RegimeMap,
    /// Fits a model to columns of an existing CSV and prints the result as JSON.
    Fit {
        #[arg(value_enum)]
        kind: FitKind,
        csv: PathBuf,
        /// Abscissa column [default depends on KIND]
        #[arg(long)]
        x: Option<String>,
        /// Ordinate column [default depends on KIND]
        #[arg(long)]
        y: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FitKind {
    /// Decaying sinusoid; default columns t, signal (a timeseries.csv).
    Decay,
    /// Lorentzian amplitude; default columns swept, eta.
    Lorentzian,
    /// T_eff = 1/(Γ+ξ); default columns swept, t_eff.
    Inverse,
    /// Straight line; default columns swept, shift_hz.
    Linear,
    /// s² = a²/T_eff² + b²; default columns t_eff, sensitivity.
    Sensitivity,
}

impl FitKind {
    fn default_columns(self) -> (&'static str, &'static str) {
        match self {
            FitKind::Decay => ("t", "signal"),
            FitKind::Lorentzian => ("swept", "eta"),
            FitKind::Inverse => ("swept", "t_eff"),
            FitKind::Linear => ("swept", "shift_hz"),
            FitKind::Sensitivity => ("t_eff", "sensitivity"),
        }
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("coopspin: {msg}");
    ExitCode::from(code)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let text = match &cli.config {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?
        }
        None => "[system]\n".to_string(),
    };
    parse_config_with(&text, Overrides { seed: cli.seed }).map_err(|e| format!("config error: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Fit { kind, csv, x, y } = &cli.command {
        return run_fit(*kind, csv, x.as_deref(), y.as_deref());
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return fail(CONFIG_ERROR, "--workers must be at least 1");
    }
    let result = match cli.command {
        Command::Decay => experiments::run_decay(&cfg),
        Command::FreqSweep => experiments::run_frequency_sweep(&cfg, workers),
        Command::FeedbackSweep => experiments::run_feedback_sweep(&cfg, workers),
        Command::FieldSweep => experiments::run_field_sweep(&cfg, workers),
        Command::Sensitivity => experiments::run_sensitivity(&cfg, workers),
        Command::RegimeMap => experiments::run_regime_map(&cfg, workers),
        Command::Fit { .. } => unreachable!(),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e @ RunError::Config(_)) => return fail(CONFIG_ERROR, e),
        Err(e @ RunError::Numerical(_)) => return fail(NUMERICAL_FAILURE, e),
    };
    let format = match cli.format {
        Some(FormatArg::Csv) => Format::Csv,
        Some(FormatArg::Json) => Format::Json,
        None => cfg.format,
    };
    let base = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    match persist(&base, &outcome, &cfg, format) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            return fail(
                CONFIG_ERROR,
                format!("cannot write results under {}: {e}", base.display()),
            )
        }
    }
    for (k, v) in &outcome.summary {
        println!("{k} = {v:e}");
    }
    if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &outcome.failures {
            eprintln!("coopspin: {f}");
        }
        ExitCode::from(NUMERICAL_FAILURE)
    }
}

fn persist(
    base: &Path,
    outcome: &Outcome,
    cfg: &ExperimentConfig,
    format: Format,
) -> std::io::Result<PathBuf> {
    let dir = output::create_run_dir(base, &cfg.hash())?;
    output::write_outcome(&dir, outcome, cfg, format)?;
    Ok(dir)
}

/// Two numeric columns of a CSV. Rows where either cell is empty are skipped.
fn read_columns(path: &Path, x: &str, y: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("{} has no column `{name}`", path.display()))
    };
    let (ix, iy) = (col(x)?, col(y)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let (a, b) = (row.get(ix).unwrap_or(""), row.get(iy).unwrap_or(""));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let parse = |s: &str, name: &str| {
            s.parse::<f64>()
                .map_err(|_| format!("row {}: `{s}` in column `{name}` is not a number", line + 2))
        };
        xs.push(parse(a, x)?);
        ys.push(parse(b, y)?);
    }
    Ok((xs, ys))
}

fn run_fit(kind: FitKind, csv: &Path, x: Option<&str>, y: Option<&str>) -> ExitCode {
    let (dx, dy) = kind.default_columns();
    let (xs, ys) = match read_columns(csv, x.unwrap_or(dx), y.unwrap_or(dy)) {
        Ok(c) => c,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let lsq = LsqOptions::default();
    let fit: coopspin_core::Result<FitResult> = match kind {
        FitKind::Decay => fit_decaying_sinusoid(&xs, &ys, &DecayFitOptions::default()),
        FitKind::Lorentzian => fit_lorentzian(&xs, &ys, &lsq),
        FitKind::Inverse => fit_inverse(&xs, &ys, &lsq),
        FitKind::Linear => fit_linear(&xs, &ys),
        FitKind::Sensitivity => fit_sensitivity_model(&xs, &ys),
    };
    match fit {
        Ok(f) => {
            println!("{}", f.to_json());
            ExitCode::SUCCESS
        }
        Err(e) => fail(NUMERICAL_FAILURE, format!("fit failed: {e}")),
    }
}
