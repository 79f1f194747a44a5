//! Experiment runners. Each one turns a config into a table of
//! [`SweepRecord`]s plus the fits and scalar summaries derived from it.
//!
//! Grid points are independent tasks on a worker pool. Results are gathered
//! in grid order, and each row's seed depends only on the config seed and
//! the row's own swept value, so tables are identical for any worker count
//! and any single point rerun on its own reproduces its row.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;

use coopspin_core::analysis::{
    fit_decaying_sinusoid, fit_inverse, fit_linear, fit_lorentzian, fit_sensitivity_model,
    DecayFitOptions, FitResult, LsqOptions, WelchConfig,
};
use coopspin_core::dynamics::{
    simulate_decay, simulate_into, simulate_maser, splitmix64, RunSpec, TimeSeries,
};
use coopspin_core::model::{
    amplification_factor, classify_regime, cooperativity, effective_coherence_time,
    larmor_frequency, resonance_frequency, DriveField, FeedbackConfig, Model, Regime, SpinState,
    SystemParams,
};
use coopspin_core::sensing::{
    linewidth, sensitivity_coefficients, simulated_noise_psd, SensitivitySpectrum, SpectrumMetadata,
};

use crate::config::{Axis, ConfigError, ExperimentConfig};
use crate::record::SweepRecord;

/// Why a run stopped before producing any output.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Numerical(coopspin_core::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<coopspin_core::Error> for RunError {
    fn from(e: coopspin_core::Error) -> Self {
        RunError::Numerical(e)
    }
}

/// Input-referred spectrum of one sensitivity grid point.
#[derive(Debug, Clone)]
pub struct SpectrumArtifact {
    pub name: String,
    pub spectrum: SensitivitySpectrum,
    pub metadata: SpectrumMetadata,
}

/// Everything an experiment produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub experiment: String,
    pub records: Vec<SweepRecord>,
    /// Additional named tables, e.g. the per-frequency points of each
    /// frequency sub-sweep.
    pub tables: Vec<(String, Vec<SweepRecord>)>,
    pub fits: BTreeMap<String, FitResult>,
    pub summary: BTreeMap<String, f64>,
    pub spectra: Vec<SpectrumArtifact>,
    pub timeseries: Option<TimeSeries>,
    /// Rows or summary fits that failed numerically.
    pub failures: Vec<String>,
}

impl Outcome {
    fn new(experiment: &str) -> Self {
        Outcome {
            experiment: experiment.into(),
            ..Default::default()
        }
    }

    fn collect_failures(&mut self) {
        let failed: Vec<String> = self
            .records
            .iter()
            .chain(self.tables.iter().flat_map(|(_, rows)| rows))
            .filter(|r| r.note.starts_with("error:"))
            .map(|r| format!("{} = {:e}: {}", r.axis, r.swept, r.note))
            .collect();
        self.failures.extend(failed);
    }

    fn summary_fit(
        &mut self,
        name: &str,
        fit: coopspin_core::Result<FitResult>,
    ) -> Option<FitResult> {
        match fit {
            Ok(f) => {
                self.fits.insert(name.into(), f.clone());
                Some(f)
            }
            Err(e) => {
                self.failures.push(format!("{name} fit: {e}"));
                None
            }
        }
    }
}

/// Runs `f` over `0..n` on `workers` threads, results in index order.
fn par_map<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Seed of the row whose swept value is `value`.
pub fn row_seed(seed: u64, value: f64) -> u64 {
    splitmix64(seed ^ splitmix64(value.to_bits()))
}

/// Operating point of one grid row.
#[derive(Debug, Clone, Copy)]
struct Point {
    params: SystemParams,
    fb: FeedbackConfig,
    /// Absolute drive frequency, Hz. `None` means on the shifted resonance.
    drive_frequency: Option<f64>,
}

impl Point {
    fn from_config(cfg: &ExperimentConfig) -> Self {
        Point {
            params: cfg.system,
            fb: cfg.feedback(),
            drive_frequency: cfg.drive.frequency,
        }
    }

    fn at(cfg: &ExperimentConfig, axis: Axis, v: f64) -> Result<Self, String> {
        let mut p = Point::from_config(cfg);
        let gamma = p.params.decay_rate();
        match axis {
            Axis::Xi => p.fb = cfg.feedback.at(v),
            Axis::Cooperativity => p.fb = cfg.feedback.at(-v * gamma),
            Axis::TEff => {
                if !(v > 0.0) {
                    return Err(format!("t_eff = {v} must be > 0"));
                }
                p.fb = cfg.feedback.at(1.0 / v - gamma);
            }
            Axis::B0 => {
                p.params = p.params.with_b0(v).map_err(|e| e.to_string())?;
                p.drive_frequency = None;
            }
            Axis::Frequency => p.drive_frequency = Some(v),
            Axis::Detuning => p.drive_frequency = Some(resonance_frequency(&p.params, &p.fb) + v),
        }
        Ok(p)
    }

    fn drive_frequency(&self) -> f64 {
        self.drive_frequency
            .unwrap_or_else(|| resonance_frequency(&self.params, &self.fb))
    }
}

fn check_axis(axis: Axis, allowed: &[Axis], experiment: &str) -> Result<(), ConfigError> {
    if allowed.contains(&axis) {
        Ok(())
    } else {
        let names: Vec<&str> = allowed.iter().map(Axis::as_str).collect();
        Err(ConfigError::new(
            "sweep.axis",
            format!(
                "`{}` is not a valid axis for {experiment}; use one of {}",
                axis.as_str(),
                names.join(", ")
            ),
        ))
    }
}

fn record(
    cfg: &ExperimentConfig,
    hash: &str,
    axis: Axis,
    swept: f64,
    point: &Point,
    seed: u64,
) -> SweepRecord {
    let c = cooperativity(&point.params, &point.fb);
    SweepRecord {
        axis: axis.as_str().into(),
        swept,
        regime: classify_regime(c),
        cooperativity: c,
        t_eff: None,
        eta: None,
        larmor_hz: larmor_frequency(&point.params),
        center_hz: None,
        fwhm_hz: None,
        shift_hz: None,
        rate: None,
        sensitivity: None,
        converged: false,
        residual_rms: None,
        seed: if cfg.seed.is_some() { seed } else { 0 },
        config_hash: hash.into(),
        note: String::new(),
    }
}

fn fail(mut r: SweepRecord, e: impl fmt::Display) -> SweepRecord {
    r.converged = false;
    r.note = format!("error: {e}");
    r
}

/// Grid of a run: the configured sweep, or `default` on `default_axis`.
fn grid(
    cfg: &ExperimentConfig,
    allowed: &[Axis],
    experiment: &str,
    default_axis: Axis,
    default: impl FnOnce() -> Vec<f64>,
) -> Result<(Axis, Vec<f64>), ConfigError> {
    match &cfg.sweep {
        Some(s) => {
            check_axis(s.axis, allowed, experiment)?;
            Ok((s.axis, s.values.clone()))
        }
        None => Ok((default_axis, default())),
    }
}

fn decay_duration(cfg: &ExperimentConfig, t_eff: f64) -> f64 {
    (cfg.protocol.decay_length * t_eff).max(cfg.protocol.min_decay_duration)
}

/// Free decay of the configured operating point. Above threshold the run
/// is a maser run from the configured seed polarization instead.
pub fn run_decay(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    if cfg.sweep.is_some() {
        return Err(ConfigError::new(
            "sweep",
            "decay runs a single operating point; use feedback-sweep or regime-map for grids",
        )
        .into());
    }
    let hash = cfg.hash();
    let point = Point::from_config(cfg);
    let mut out = Outcome::new("decay");
    let mut row = record(
        cfg,
        &hash,
        Axis::Xi,
        point.fb.xi,
        &point,
        row_seed(cfg.seed.unwrap_or(0), point.fb.xi),
    );
    match effective_coherence_time(&point.params, &point.fb) {
        Ok(t_eff) => {
            let ts = simulate_decay(
                &point.params,
                &point.fb,
                cfg.protocol.tip_angle,
                decay_duration(cfg, t_eff),
                &cfg.integrator,
            )?;
            if cfg.protocol.tip_angle > 0.0 {
                let fit =
                    fit_decaying_sinusoid(&ts.times(), &ts.signal(), &DecayFitOptions::default())?;
                fill_decay_fit(&mut row, &fit, &point);
                out.fits.insert("decaying_sinusoid".into(), fit);
            } else {
                row.converged = true;
                row.note = "zero tip angle: no transverse signal".into();
            }
            out.timeseries = Some(ts);
        }
        Err(_) => {
            let duration = maser_duration(cfg, &point);
            let ts = simulate_maser(
                &point.params,
                &point.fb,
                cfg.protocol.maser_seed,
                duration,
                &cfg.integrator,
            )?;
            let (rate, fit) = envelope_rate(&ts)?;
            row.rate = Some(rate);
            row.residual_rms = Some(fit.residual_rms);
            row.converged = fit.converged;
            row.note = "above threshold: maser run, rate from early envelope growth".into();
            out.fits.insert("log_envelope".into(), fit);
            out.timeseries = Some(ts);
        }
    }
    out.records.push(row);
    out.collect_failures();
    Ok(out)
}

fn fill_decay_fit(row: &mut SweepRecord, fit: &FitResult, point: &Point) {
    let tau = fit.value("tau");
    let f = fit.value("frequency").abs();
    row.t_eff = Some(tau);
    row.rate = Some(-1.0 / tau);
    row.center_hz = Some(f);
    row.shift_hz = Some(f - larmor_frequency(&point.params));
    row.eta = amplification_factor(&point.params, tau).ok();
    row.converged = fit.converged;
    row.residual_rms = Some(fit.residual_rms);
    if fit.low_snr() {
        row.note = "low-snr".into();
    }
}

/// ln|P⊥| slope by least squares over the whole record.
fn envelope_rate(ts: &TimeSeries) -> coopspin_core::Result<(f64, FitResult)> {
    let (t, y): (Vec<f64>, Vec<f64>) = ts
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.transverse() > 0.0)
        .map(|(i, s)| (ts.time(i), s.transverse().ln()))
        .unzip();
    let fit = fit_linear(&t, &y)?;
    Ok((fit.value("slope"), fit))
}

/// Long enough to see early growth, short enough that the envelope stays
/// three decades below p0 where the linearized rate applies.
fn maser_duration(cfg: &ExperimentConfig, point: &Point) -> f64 {
    let growth = -(point.params.decay_rate() + point.fb.xi);
    let cap = 10.0 * point.params.t2_intrinsic;
    if growth <= 0.0 {
        return cap;
    }
    let headroom = (1e-3 * point.params.p0 / cfg.protocol.maser_seed)
        .ln()
        .max(1.0);
    (headroom / growth)
        .min(cap)
        .max(cfg.protocol.min_decay_duration)
}

/// Coherence-time sweep: fitted T_eff per feedback rate, then the inverse
/// fit for the intrinsic decay rate.
pub fn run_feedback_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<Outcome, RunError> {
    let gamma = cfg.system.decay_rate();
    let (axis, values) = grid(
        cfg,
        &[Axis::Xi, Axis::Cooperativity, Axis::TEff],
        "feedback-sweep",
        Axis::Xi,
        || {
            // 12 rates from 545 s to 4 s coherence time
            let (lo, hi) = (1.0 / 545.0 - gamma, 1.0 / 4.0 - gamma);
            (0..12).map(|i| lo + (hi - lo) * i as f64 / 11.0).collect()
        },
    )?;
    let hash = cfg.hash();
    let seed = cfg.seed.unwrap_or(0);
    let rows = par_map(workers, values.len(), |i| {
        let v = values[i];
        let point = match Point::at(cfg, axis, v) {
            Ok(p) => p,
            Err(e) => return fail(record(cfg, &hash, axis, v, &Point::from_config(cfg), 0), e),
        };
        let row = record(cfg, &hash, axis, v, &point, row_seed(seed, v));
        let Ok(t_eff) = effective_coherence_time(&point.params, &point.fb) else {
            let mut row = row;
            row.converged = true;
            row.note = "no coherence time at or above threshold".into();
            return row;
        };
        let fitted = simulate_decay(
            &point.params,
            &point.fb,
            cfg.protocol.tip_angle,
            decay_duration(cfg, t_eff),
            &cfg.integrator,
        )
        .and_then(|ts| {
            fit_decaying_sinusoid(&ts.times(), &ts.signal(), &DecayFitOptions::default())
        });
        match fitted {
            Ok(fit) => {
                let mut row = row;
                fill_decay_fit(&mut row, &fit, &point);
                row
            }
            Err(e) => fail(row, e),
        }
    });
    let mut out = Outcome::new("feedback-sweep");
    let (xi, t): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .zip(&values)
        .filter_map(|(r, &v)| {
            let point = Point::at(cfg, axis, v).ok()?;
            Some((point.fb.xi, r.t_eff?))
        })
        .unzip();
    out.records = rows;
    out.collect_failures();
    if xi.len() >= 2 {
        if let Some(fit) = out.summary_fit("inverse", fit_inverse(&xi, &t, &LsqOptions::default()))
        {
            let g = fit.value("gamma");
            out.summary.insert("gamma".into(), g);
            out.summary.insert("t2_fitted".into(), 1.0 / g);
            out.summary
                .insert("gamma_relative_error".into(), (g - gamma) / gamma);
        }
    }
    let worst = out
        .records
        .iter()
        .zip(&values)
        .filter_map(|(r, &v)| {
            let point = Point::at(cfg, axis, v).ok()?;
            let expected = effective_coherence_time(&point.params, &point.fb).ok()?;
            Some(((r.t_eff? - expected) / expected).abs())
        })
        .fold(0.0f64, f64::max);
    out.summary.insert("max_t_eff_relative_error".into(), worst);
    Ok(out)
}

/// Streams a driven run and demodulates the magnetometer signal at the
/// drive frequency over the trailing lock-in window. Returns the field
/// amplitude at the magnetometer, T.
fn driven_amplitude(
    cfg: &ExperimentConfig,
    point: &Point,
    frequency: f64,
) -> coopspin_core::Result<f64> {
    let t_eff = effective_coherence_time(&point.params, &point.fb)?;
    let window = cfg.protocol.lockin_length * t_eff;
    let duration = cfg.protocol.settle_length * t_eff + window;
    let drive = DriveField::new(cfg.drive.amplitude, frequency, cfg.drive.phase)?;
    let run = RunSpec {
        params: &point.params,
        feedback: &point.fb,
        drive: &drive,
        duration,
        integrator: &cfg.integrator,
    };
    let start = duration - window;
    let w = 2.0 * PI * frequency;
    let mut acc = Complex64::new(0.0, 0.0);
    let mut n = 0usize;
    simulate_into(&run, SpinState::equilibrium(&point.params), None, |t, s| {
        if t >= start {
            acc += s.signal * Complex64::from_polar(1.0, -w * t);
            n += 1;
        }
    })?;
    Ok(if n == 0 {
        0.0
    } else {
        2.0 * acc.norm() / n as f64
    })
}

fn driven_row(cfg: &ExperimentConfig, mut row: SweepRecord, point: &Point) -> SweepRecord {
    let f = point.drive_frequency();
    row.center_hz = None;
    row.t_eff = effective_coherence_time(&point.params, &point.fb).ok();
    match driven_amplitude(cfg, point, f) {
        Ok(amp) => {
            row.eta = Some(if cfg.drive.amplitude > 0.0 {
                amp / cfg.drive.amplitude
            } else {
                0.0
            });
            row.converged = true;
            if cfg.drive.amplitude == 0.0 {
                row.note = "zero drive: eta reported as 0".into();
            }
            row
        }
        Err(e) => fail(row, e),
    }
}

/// Lorentzian fit of an η(f) sub-sweep. Returns (center, fwhm, peak).
fn lorentzian_summary(
    out: &mut Outcome,
    name: &str,
    freqs: &[f64],
    eta: &[f64],
) -> Option<(f64, f64, f64, FitResult)> {
    let fit = out.summary_fit(name, fit_lorentzian(freqs, eta, &LsqOptions::default()))?;
    Some((
        fit.value("center"),
        fit.value("fwhm"),
        fit.value("peak"),
        fit,
    ))
}

fn default_detunings(cfg: &ExperimentConfig, point: &Point) -> Result<Vec<f64>, RunError> {
    let lw = linewidth(&point.params, &point.fb)?;
    let n = cfg.protocol.points;
    let span = cfg.protocol.span_linewidths * lw;
    Ok((0..n)
        .map(|i| -span + 2.0 * span * i as f64 / (n - 1) as f64)
        .collect())
}

/// Resonance sweep. With a frequency or detuning axis (or no sweep) this is
/// one η(f) sweep with a Lorentzian fit. With a feedback axis it runs one
/// sub-sweep per feedback value and fits the shift of the fitted center
/// against ξ.
pub fn run_frequency_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<Outcome, RunError> {
    let allowed = [
        Axis::Frequency,
        Axis::Detuning,
        Axis::Xi,
        Axis::Cooperativity,
        Axis::TEff,
    ];
    let base = Point::from_config(cfg);
    let (axis, values) = match &cfg.sweep {
        Some(s) => {
            check_axis(s.axis, &allowed, "freq-sweep")?;
            (s.axis, s.values.clone())
        }
        None => (Axis::Detuning, default_detunings(cfg, &base)?),
    };
    let hash = cfg.hash();
    let seed = cfg.seed.unwrap_or(0);
    let mut out = Outcome::new("freq-sweep");

    if matches!(axis, Axis::Frequency | Axis::Detuning) {
        effective_coherence_time(&base.params, &base.fb)?;
        let rows = par_map(workers, values.len(), |i| {
            let v = values[i];
            let point = Point::at(cfg, axis, v).expect("frequency axes always resolve");
            driven_row(
                cfg,
                record(cfg, &hash, axis, v, &point, row_seed(seed, v)),
                &point,
            )
        });
        let (f, eta): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .zip(&values)
            .filter_map(|(r, &v)| Some((Point::at(cfg, axis, v).ok()?.drive_frequency(), r.eta?)))
            .unzip();
        out.records = rows;
        out.collect_failures();
        if let Some((center, fwhm, peak, _)) = lorentzian_summary(&mut out, "lorentzian", &f, &eta)
        {
            let t_eff = effective_coherence_time(&base.params, &base.fb)?;
            out.summary.insert("center_hz".into(), center);
            out.summary.insert("fwhm_hz".into(), fwhm);
            out.summary.insert("peak_eta".into(), peak);
            out.summary
                .insert("shift_hz".into(), center - larmor_frequency(&base.params));
            out.summary
                .insert("expected_fwhm_hz".into(), 1.0 / (PI * t_eff));
            out.summary.insert(
                "expected_peak_eta".into(),
                amplification_factor(&base.params, t_eff)?,
            );
        }
        return Ok(out);
    }

    // feedback axis: one detuning sub-sweep per value, flattened for the pool
    let points: Vec<Point> = values
        .iter()
        .map(|&v| Point::at(cfg, axis, v).map_err(|m| ConfigError::new("sweep.values", m)))
        .collect::<Result<_, _>>()?;
    let mut tasks = Vec::new();
    for (k, p) in points.iter().enumerate() {
        // points without a linewidth get no sub-sweep and fail below
        if let Ok(d) = default_detunings(cfg, p) {
            tasks.extend(d.into_iter().map(|d| (k, d)));
        }
    }
    let sub_rows = par_map(workers, tasks.len(), |i| {
        let (k, d) = tasks[i];
        let mut p = points[k];
        p.drive_frequency = Some(resonance_frequency(&p.params, &p.fb) + d);
        driven_row(
            cfg,
            record(
                cfg,
                &hash,
                Axis::Detuning,
                d,
                &p,
                row_seed(row_seed(seed, values[k]), d),
            ),
            &p,
        )
    });
    let mut rows = Vec::with_capacity(values.len());
    let (mut shift_xi, mut shifts) = (Vec::new(), Vec::new());
    for (k, (&v, p)) in values.iter().zip(&points).enumerate() {
        let mut row = record(cfg, &hash, axis, v, p, row_seed(seed, v));
        let sub: Vec<(f64, f64)> = tasks
            .iter()
            .zip(&sub_rows)
            .filter(|((kk, _), _)| *kk == k)
            .filter_map(|((_, d), r)| Some((resonance_frequency(&p.params, &p.fb) + d, r.eta?)))
            .collect();
        if sub.is_empty() {
            rows.push(fail(row, "no coherence time at or above threshold"));
            continue;
        }
        let (f, eta): (Vec<f64>, Vec<f64>) = sub.into_iter().unzip();
        match fit_lorentzian(&f, &eta, &LsqOptions::default()) {
            Ok(fit) => {
                let center = fit.value("center");
                row.center_hz = Some(center);
                row.fwhm_hz = Some(fit.value("fwhm"));
                row.eta = Some(fit.value("peak"));
                row.t_eff = Some(1.0 / (PI * fit.value("fwhm")));
                row.shift_hz = Some(center - larmor_frequency(&p.params));
                row.converged = fit.converged;
                row.residual_rms = Some(fit.residual_rms);
                shift_xi.push(p.fb.xi);
                shifts.push(center - larmor_frequency(&p.params));
                out.fits.insert(format!("lorentzian[{k}]"), fit);
            }
            Err(e) => rows.push(fail(row.clone(), e)),
        }
        if row.converged || row.center_hz.is_some() {
            rows.push(row);
        }
    }
    out.records = rows;
    out.tables.push(("subsweeps".into(), sub_rows));
    out.collect_failures();
    if shift_xi.len() >= 2 {
        if let Some(fit) = out.summary_fit("shift_linear", fit_linear(&shift_xi, &shifts)) {
            out.summary
                .insert("shift_slope_hz".into(), fit.value("slope"));
            out.summary.insert(
                "configured_shift_slope_hz".into(),
                cfg.feedback.config().shift_slope(),
            );
        }
    }
    Ok(out)
}

/// Resonant amplification across bias fields at the configured feedback.
pub fn run_field_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<Outcome, RunError> {
    let (axis, values) = grid(cfg, &[Axis::B0], "field-sweep", Axis::B0, || {
        [0.08, 0.2, 0.5, 0.85, 0.9, 1.5, 2.2, 3.0]
            .iter()
            .map(|v| v * 1e-6)
            .collect()
    })?;
    if values.is_empty() {
        return Err(ConfigError::new("sweep.values", "field sweep grid is empty").into());
    }
    let base = Point::from_config(cfg);
    let t_eff = effective_coherence_time(&base.params, &base.fb)?;
    let hash = cfg.hash();
    let seed = cfg.seed.unwrap_or(0);
    let rows = par_map(workers, values.len(), |i| {
        let v = values[i];
        match Point::at(cfg, axis, v) {
            Ok(point) => {
                let mut row = driven_row(
                    cfg,
                    record(cfg, &hash, axis, v, &point, row_seed(seed, v)),
                    &point,
                );
                row.center_hz = Some(point.drive_frequency());
                row
            }
            Err(e) => fail(record(cfg, &hash, axis, v, &base, 0), e),
        }
    });
    let mut out = Outcome::new("field-sweep");
    let eta: Vec<f64> = rows.iter().filter_map(|r| r.eta).collect();
    out.records = rows;
    out.collect_failures();
    if !eta.is_empty() {
        let n = eta.len() as f64;
        let mean = eta.iter().sum::<f64>() / n;
        let var = if eta.len() > 1 {
            eta.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.summary.insert("eta_mean".into(), mean);
        out.summary
            .insert("eta_relative_std".into(), var.sqrt() / mean);
        out.summary.insert(
            "expected_eta".into(),
            amplification_factor(&base.params, t_eff)?,
        );
    }
    Ok(out)
}

/// Noise spectra and resonance sensitivity per coherence time, then the
/// sensitivity-model fit.
pub fn run_sensitivity(cfg: &ExperimentConfig, workers: usize) -> Result<Outcome, RunError> {
    if cfg.noise.is_silent() {
        return Err(ConfigError::new(
            "noise",
            "sensitivity needs noise.photon_shot or noise.magnetic > 0",
        )
        .into());
    }
    let seed = cfg.require_seed()?;
    let (axis, values) = grid(
        cfg,
        &[Axis::TEff, Axis::Xi, Axis::Cooperativity],
        "sensitivity",
        Axis::TEff,
        || vec![50.0, 100.0, 200.0, 400.0],
    )?;
    let hash = cfg.hash();
    let rec = cfg.integrator.record_interval;
    let results = par_map(workers, values.len(), |i| {
        let v = values[i];
        let point = match Point::at(cfg, axis, v) {
            Ok(p) => p,
            Err(e) => {
                return (
                    fail(record(cfg, &hash, axis, v, &Point::from_config(cfg), 0), e),
                    None,
                )
            }
        };
        let s = row_seed(seed, v);
        let mut row = record(cfg, &hash, axis, v, &point, s);
        match sensitivity_point(cfg, &point, s) {
            Ok((level, spectrum, meta)) => {
                row.t_eff = Some(meta.t_eff);
                row.eta = Some(meta.eta);
                row.center_hz = Some(resonance_frequency(&point.params, &point.fb));
                row.fwhm_hz = Some(1.0 / (PI * meta.t_eff));
                row.sensitivity = Some(level);
                row.converged = true;
                let art = SpectrumArtifact {
                    name: format!("spectrum_{i:02}"),
                    spectrum,
                    metadata: meta,
                };
                (row, Some(art))
            }
            Err(e) => (fail(row, e), None),
        }
    });
    let mut out = Outcome::new("sensitivity");
    let (t, s): (Vec<f64>, Vec<f64>) = results
        .iter()
        .filter_map(|(r, _)| Some((r.t_eff?, r.sensitivity?)))
        .unzip();
    for (row, art) in results {
        out.records.push(row);
        out.spectra.extend(art);
    }
    out.collect_failures();
    let (a_expected, b_expected) = sensitivity_coefficients(&cfg.noise, &cfg.system);
    out.summary.insert("a_expected".into(), a_expected);
    out.summary.insert("b_expected".into(), b_expected);
    out.summary.insert("record_interval".into(), rec);
    if t.len() >= 2 {
        if let Some(fit) = out.summary_fit("sensitivity_model", fit_sensitivity_model(&t, &s)) {
            out.summary.insert("a".into(), fit.value("a"));
            out.summary.insert("b".into(), fit.value("b"));
        }
    }
    Ok(out)
}

/// One noisy run: (resonance sensitivity, spectrum near resonance, metadata).
fn sensitivity_point(
    cfg: &ExperimentConfig,
    point: &Point,
    seed: u64,
) -> coopspin_core::Result<(f64, SensitivitySpectrum, SpectrumMetadata)> {
    let t_eff = effective_coherence_time(&point.params, &point.fb)?;
    let lw = linewidth(&point.params, &point.fb)?;
    let rec = cfg.integrator.record_interval;
    let welch = WelchConfig::for_linewidth(lw, 1.0 / rec)?;
    let settle = cfg.protocol.noise_settle_length * t_eff;
    let duration = settle + welch.samples_for(cfg.protocol.welch_segments) as f64 * rec;
    let drive = DriveField::none();
    let integrator = cfg.integrator.with_model(Model::Linearized);
    let run = RunSpec {
        params: &point.params,
        feedback: &point.fb,
        drive: &drive,
        duration,
        integrator: &integrator,
    };
    let psd = simulated_noise_psd(&run, &cfg.noise, seed, settle, &welch)?;
    let spectrum = SensitivitySpectrum::from_psd(&psd, &point.params, &point.fb)?;
    let center = resonance_frequency(&point.params, &point.fb);
    let level = spectrum
        .resonance_level(center, cfg.protocol.band_linewidths * lw)
        .ok_or_else(|| coopspin_core::Error::Resolution("no spectral bin near resonance".into()))?;
    let half = (25.0 * lw).max(0.5);
    let (a, b) = sensitivity_coefficients(&cfg.noise, &point.params);
    let meta = SpectrumMetadata {
        a,
        b,
        k: point.params.amplification_slope(),
        eta: amplification_factor(&point.params, t_eff)?,
        t_eff,
    };
    Ok((level, spectrum.restrict(center - half, center + half), meta))
}

/// Regime label and measured envelope rate per feedback value. Below
/// threshold the rate comes from a linearized free decay, at and above it
/// from a full nonlinear maser run while the envelope is still small.
pub fn run_regime_map(cfg: &ExperimentConfig, workers: usize) -> Result<Outcome, RunError> {
    let gamma = cfg.system.decay_rate();
    let (axis, values) = grid(
        cfg,
        &[Axis::Xi, Axis::Cooperativity, Axis::TEff],
        "regime-map",
        Axis::Xi,
        || {
            let mut xi = vec![1.0 / 4.0 - gamma];
            xi.extend(
                [-3.0, -1.0, 0.0, 0.5, 0.9, 0.98, 1.0, 1.02, 1.1, 1.5, 2.0]
                    .iter()
                    .map(|c| 0.0 - c * gamma),
            );
            xi.sort_by(f64::total_cmp);
            xi
        },
    )?;
    let hash = cfg.hash();
    let seed = cfg.seed.unwrap_or(0);
    let rows = par_map(workers, values.len(), |i| {
        let v = values[i];
        let point = match Point::at(cfg, axis, v) {
            Ok(p) => p,
            Err(e) => return fail(record(cfg, &hash, axis, v, &Point::from_config(cfg), 0), e),
        };
        let mut row = record(cfg, &hash, axis, v, &point, row_seed(seed, v));
        let measured = match effective_coherence_time(&point.params, &point.fb) {
            Ok(t_eff) => {
                let integ = cfg.integrator.with_model(Model::Linearized);
                let tip = if cfg.protocol.tip_angle > 0.0 {
                    cfg.protocol.tip_angle
                } else {
                    5f64.to_radians()
                };
                let duration = (3.0 * t_eff)
                    .max(cfg.protocol.min_decay_duration)
                    .min(10.0 * point.params.t2_intrinsic);
                simulate_decay(&point.params, &point.fb, tip, duration, &integ)
            }
            Err(_) => simulate_maser(
                &point.params,
                &point.fb,
                cfg.protocol.maser_seed,
                maser_duration(cfg, &point),
                &cfg.integrator,
            ),
        }
        .and_then(|ts| envelope_rate(&ts));
        match measured {
            Ok((rate, fit)) => {
                row.rate = Some(rate);
                if rate < 0.0 && row.regime < Regime::Threshold {
                    row.t_eff = Some(-1.0 / rate);
                }
                row.converged = fit.converged;
                row.residual_rms = Some(fit.residual_rms);
                row
            }
            Err(e) => fail(row, e),
        }
    });
    let mut out = Outcome::new("regime-map");
    out.records = rows;
    out.collect_failures();
    // cooperativity where the measured rate crosses zero
    let pts: Vec<(f64, f64)> = out
        .records
        .iter()
        .filter_map(|r| Some((r.cooperativity, r.rate?)))
        .collect();
    let mut sorted = pts.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(c) = zero_crossing(&sorted) {
        out.summary.insert("threshold_cooperativity".into(), c);
    }
    let worst = out
        .records
        .iter()
        .filter_map(|r| {
            let expected = -(gamma - r.cooperativity * gamma);
            let rate = r.rate?;
            (expected.abs() > 0.05 * gamma).then(|| ((rate - expected) / expected).abs())
        })
        .fold(0.0f64, f64::max);
    out.summary.insert("max_rate_relative_error".into(), worst);
    Ok(out)
}

/// First sign change of `y(x)` located by linear interpolation. An exact
/// zero counts as the crossing.
fn zero_crossing(pts: &[(f64, f64)]) -> Option<f64> {
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if y0 == 0.0 {
            return Some(x0);
        }
        if y0 * y1 < 0.0 {
            return Some(x0 - y0 * (x1 - x0) / (y1 - y0));
        }
    }
    pts.last().filter(|p| p.1 == 0.0).map(|p| p.0)
}
