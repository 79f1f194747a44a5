//! Experiment configuration: TOML text in, validated SI values out.
//!
//! Every section except `[system]` is optional and every key has a default,
//! so `[system]` alone is a complete config for the baseline calibration.
//! Errors carry the dotted path of the offending key. The full grammar is
//! documented in the repository README.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use coopspin_core::dynamics::{IntegratorConfig, Method};
use coopspin_core::model::{
    b_max_for_slope, FeedbackConfig, Model, SystemParams, BASELINE_AMPLIFICATION_SLOPE,
    BASELINE_B0, BASELINE_P0, BASELINE_SHIFT_SLOPE, BASELINE_T1, BASELINE_T2, XE129_GAMMA_CYC,
};
use coopspin_core::sensing::NoiseModel;

use crate::units::{
    Angle, Density, Dimension, Dimensionless, Field, Frequency, Gyromagnetic, Quantity, Rate,
    RawQuantity, Time,
};

/// Config problem located at a dotted key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "`{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    system: Option<RawSystem>,
    #[serde(default)]
    feedback: RawFeedback,
    #[serde(default)]
    drive: RawDrive,
    #[serde(default)]
    noise: RawNoise,
    #[serde(default)]
    integrator: RawIntegrator,
    sweep: Option<RawSweep>,
    #[serde(default)]
    protocol: RawProtocol,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    gamma_cyc: Option<Quantity<Gyromagnetic>>,
    t2_intrinsic: Option<Quantity<Time>>,
    t1: Option<Quantity<Time>>,
    b_max: Option<Quantity<Field>>,
    amplification_slope: Option<Quantity<Rate>>,
    p0: Option<Quantity<Dimensionless>>,
    b0: Option<Quantity<Field>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeedback {
    xi: Option<Quantity<Rate>>,
    xi_grid: Option<Vec<Quantity<Rate>>>,
    shift_slope_hz: Option<Quantity<Dimensionless>>,
    shift_ratio: Option<Quantity<Dimensionless>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDrive {
    amplitude: Option<Quantity<Field>>,
    frequency: Option<Quantity<Frequency>>,
    phase: Option<Quantity<Angle>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    photon_shot: Option<Quantity<Density>>,
    magnetic: Option<Quantity<Density>>,
    spin_projection: Option<Quantity<Density>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegrator {
    method: Option<Method>,
    dt: Option<Quantity<Time>>,
    rtol: Option<Quantity<Dimensionless>>,
    atol: Option<Quantity<Dimensionless>>,
    max_step: Option<Quantity<Time>>,
    record_interval: Option<Quantity<Time>>,
    model: Option<Model>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    axis: Axis,
    values: Option<Vec<RawQuantity>>,
    start: Option<RawQuantity>,
    stop: Option<RawQuantity>,
    count: Option<usize>,
    #[serde(default)]
    spacing: Spacing,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProtocol {
    tip_angle: Option<Quantity<Angle>>,
    decay_length: Option<Quantity<Dimensionless>>,
    min_decay_duration: Option<Quantity<Time>>,
    settle_length: Option<Quantity<Dimensionless>>,
    lockin_length: Option<Quantity<Dimensionless>>,
    span_linewidths: Option<Quantity<Dimensionless>>,
    points: Option<usize>,
    maser_seed: Option<Quantity<Dimensionless>>,
    welch_segments: Option<usize>,
    noise_settle_length: Option<Quantity<Dimensionless>>,
    band_linewidths: Option<Quantity<Dimensionless>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    format: Option<Format>,
}

/// Quantity varied across a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Feedback rate ξ, s⁻¹.
    Xi,
    /// C = −ξ·T₂, converted to ξ.
    Cooperativity,
    /// Target effective coherence time, s, converted to ξ.
    TEff,
    /// Drive frequency, Hz.
    Frequency,
    /// Drive frequency relative to the shifted resonance, Hz.
    Detuning,
    /// Bias field, T.
    B0,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Xi => "xi",
            Axis::Cooperativity => "cooperativity",
            Axis::TEff => "t_eff",
            Axis::Frequency => "frequency",
            Axis::Detuning => "detuning",
            Axis::B0 => "b0",
        }
    }

    fn resolve(&self, q: &RawQuantity) -> Result<f64, String> {
        match self {
            Axis::Xi => q.resolve::<Rate>(),
            Axis::Cooperativity => q.resolve::<Dimensionless>(),
            Axis::TEff => q.resolve::<Time>(),
            Axis::Frequency | Axis::Detuning => q.resolve::<Frequency>(),
            Axis::B0 => q.resolve::<Field>(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Sweep axis with its grid in SI units, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<f64>,
}

/// Feedback block. The slope is the observable shift slope in Hz per s⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeedbackSettings {
    pub xi: f64,
    pub shift_ratio: f64,
}

impl FeedbackSettings {
    pub fn config(&self) -> FeedbackConfig {
        FeedbackConfig::new(self.xi, self.shift_ratio)
    }

    pub fn at(&self, xi: f64) -> FeedbackConfig {
        FeedbackConfig::new(xi, self.shift_ratio)
    }
}

/// Drive block. Without a frequency the drive sits on the shifted resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriveSettings {
    pub amplitude: f64,
    pub frequency: Option<f64>,
    pub phase: f64,
}

/// Knobs of the measurement protocols. Lengths are in units of T_eff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Protocol {
    pub tip_angle: f64,
    /// Free-decay record length, T_eff.
    pub decay_length: f64,
    /// Lower bound on any decay record, s.
    pub min_decay_duration: f64,
    /// Driven runs settle for this long before the lock-in window, T_eff.
    pub settle_length: f64,
    /// Lock-in window at the end of a driven run, T_eff.
    pub lockin_length: f64,
    /// Default frequency sweep covers ±span_linewidths around resonance.
    pub span_linewidths: f64,
    /// Default number of frequency points.
    pub points: usize,
    /// Initial transverse polarization of maser runs.
    pub maser_seed: f64,
    pub welch_segments: usize,
    /// Noise runs discard this much before the spectrum, T_eff.
    pub noise_settle_length: f64,
    /// Half-width of the band fitted for the resonance sensitivity, in
    /// linewidths.
    pub band_linewidths: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            tip_angle: 5f64.to_radians(),
            decay_length: 4.0,
            min_decay_duration: 10.0,
            settle_length: 6.0,
            lockin_length: 1.0,
            span_linewidths: 2.5,
            points: 21,
            maser_seed: 1e-6,
            welch_segments: 128,
            noise_settle_length: 10.0,
            band_linewidths: 1.0,
        }
    }
}

/// Fully validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub system: SystemParams,
    pub feedback: FeedbackSettings,
    pub drive: DriveSettings,
    pub noise: NoiseModel,
    pub integrator: IntegratorConfig,
    pub sweep: Option<Sweep>,
    pub protocol: Protocol,
    pub output_dir: Option<String>,
    pub format: Format,
}

impl ExperimentConfig {
    /// Baseline calibration, no feedback, no noise, no sweep.
    pub fn baseline() -> Self {
        parse_config("[system]\n").expect("empty system block is valid")
    }

    pub fn feedback(&self) -> FeedbackConfig {
        self.feedback.config()
    }

    /// SHA-256 over the canonical JSON of everything that affects results.
    /// Output location and format are excluded.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            seed: Option<u64>,
            system: &'a SystemParams,
            feedback: &'a FeedbackSettings,
            drive: &'a DriveSettings,
            noise: &'a NoiseModel,
            integrator: &'a IntegratorConfig,
            sweep: &'a Option<Sweep>,
            protocol: &'a Protocol,
        }
        let json = serde_json::to_string(&Canonical {
            seed: self.seed,
            system: &self.system,
            feedback: &self.feedback,
            drive: &self.drive,
            noise: &self.noise,
            integrator: &self.integrator,
            sweep: &self.sweep,
            protocol: &self.protocol,
        })
        .expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The seed, required once noise is switched on.
    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.seed
            .ok_or_else(|| ConfigError::new("seed", "required when any noise density is nonzero"))
    }
}

/// Overrides applied after parsing and before validation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config_with(text, Overrides::default())
}

pub fn parse_config_with(
    text: &str,
    overrides: Overrides,
) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", toml_message(&e)))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        ConfigError::new(path, toml_message(e.inner()))
    })?;
    validate(raw, overrides)
}

fn toml_message(e: &toml::de::Error) -> String {
    e.message().trim().to_string()
}

fn check<T>(ok: bool, path: &str, message: &str, value: T) -> Result<T, ConfigError> {
    if ok {
        Ok(value)
    } else {
        Err(ConfigError::new(path, message))
    }
}

fn si<D: Dimension>(q: Option<Quantity<D>>, default: f64) -> f64 {
    q.map_or(default, |q| q.si())
}

fn validate(raw: RawConfig, overrides: Overrides) -> Result<ExperimentConfig, ConfigError> {
    let sys = raw
        .system
        .ok_or_else(|| ConfigError::new("system", "missing required section"))?;
    let gamma_cyc = si(sys.gamma_cyc, XE129_GAMMA_CYC);
    check(gamma_cyc != 0.0, "system.gamma_cyc", "must be nonzero", ())?;
    let t2 = si(sys.t2_intrinsic, BASELINE_T2);
    check(t2 > 0.0, "system.t2_intrinsic", "must be > 0", ())?;
    let t1 = si(sys.t1, BASELINE_T1.max(t2));
    check(t1 >= t2, "system.t1", "must be >= system.t2_intrinsic", ())?;
    let p0 = si(sys.p0, BASELINE_P0);
    check(p0 > 0.0 && p0 <= 1.0, "system.p0", "must lie in (0, 1]", ())?;
    let b0 = si(sys.b0, BASELINE_B0);
    let b_max = match (sys.b_max, sys.amplification_slope) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "system.amplification_slope",
                "give either b_max or amplification_slope, not both",
            ))
        }
        (Some(b), None) => check(b.si() > 0.0, "system.b_max", "must be > 0", b.si())?,
        (None, k) => {
            let k = si(k, BASELINE_AMPLIFICATION_SLOPE);
            check(k > 0.0, "system.amplification_slope", "must be > 0", ())?;
            b_max_for_slope(k, p0, gamma_cyc)
        }
    };
    let system = SystemParams::new(gamma_cyc, t2, t1, b_max, p0, b0)
        .map_err(|e| ConfigError::new("system", e.to_string()))?;

    let fb = raw.feedback;
    let shift_ratio = match (fb.shift_slope_hz, fb.shift_ratio) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "feedback.shift_ratio",
                "give either shift_slope_hz or shift_ratio, not both",
            ))
        }
        (Some(s), None) => 2.0 * std::f64::consts::PI * s.si(),
        (None, Some(r)) => r.si(),
        (None, None) => 2.0 * std::f64::consts::PI * BASELINE_SHIFT_SLOPE,
    };
    let feedback = FeedbackSettings {
        xi: si(fb.xi, 0.0),
        shift_ratio,
    };

    let drive = DriveSettings {
        amplitude: check_nonneg(si(raw.drive.amplitude, 13.8e-12), "drive.amplitude")?,
        frequency: raw
            .drive
            .frequency
            .map(|f| check_nonneg(f.si(), "drive.frequency"))
            .transpose()?,
        phase: si(raw.drive.phase, 0.0),
    };

    let noise = NoiseModel {
        photon_shot: check_nonneg(si(raw.noise.photon_shot, 0.0), "noise.photon_shot")?,
        magnetic: check_nonneg(si(raw.noise.magnetic, 0.0), "noise.magnetic")?,
        spin_projection: check_nonneg(
            si(raw.noise.spin_projection, 8.7e-15),
            "noise.spin_projection",
        )?,
    };

    let ri = raw.integrator;
    let d = IntegratorConfig::default();
    let integrator = IntegratorConfig {
        method: ri.method.unwrap_or(d.method),
        dt: check_pos(si(ri.dt, d.dt), "integrator.dt")?,
        rtol: check_pos(si(ri.rtol, d.rtol), "integrator.rtol")?,
        atol: check_pos(si(ri.atol, d.atol), "integrator.atol")?,
        max_step: check_pos(si(ri.max_step, d.max_step), "integrator.max_step")?,
        record_interval: check_pos(
            si(ri.record_interval, d.record_interval),
            "integrator.record_interval",
        )?,
        model: ri.model.unwrap_or(d.model),
    };
    if integrator.method == Method::Rk4Fixed {
        let ratio = integrator.record_interval / integrator.dt;
        check(
            ratio >= 1.0 - 1e-9 && (ratio - ratio.round()).abs() <= 1e-9 * ratio,
            "integrator.record_interval",
            "must be an integer multiple of integrator.dt",
            (),
        )?;
    }

    let sweep = match (raw.sweep, fb.xi_grid) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "feedback.xi_grid",
                "a run has at most one sweep axis; remove either [sweep] or feedback.xi_grid",
            ))
        }
        (Some(s), None) => Some(resolve_sweep(s)?),
        (None, Some(grid)) => {
            check(
                !grid.is_empty(),
                "feedback.xi_grid",
                "must not be empty",
                (),
            )?;
            Some(sorted(Axis::Xi, grid.iter().map(|q| q.si()).collect()))
        }
        (None, None) => None,
    };

    let rp = raw.protocol;
    let dp = Protocol::default();
    let protocol = Protocol {
        tip_angle: si(rp.tip_angle, dp.tip_angle),
        decay_length: check_pos(
            si(rp.decay_length, dp.decay_length),
            "protocol.decay_length",
        )?,
        min_decay_duration: check_pos(
            si(rp.min_decay_duration, dp.min_decay_duration),
            "protocol.min_decay_duration",
        )?,
        settle_length: si(rp.settle_length, dp.settle_length),
        lockin_length: check_pos(
            si(rp.lockin_length, dp.lockin_length),
            "protocol.lockin_length",
        )?,
        span_linewidths: check_pos(
            si(rp.span_linewidths, dp.span_linewidths),
            "protocol.span_linewidths",
        )?,
        points: rp.points.unwrap_or(dp.points),
        maser_seed: si(rp.maser_seed, dp.maser_seed),
        welch_segments: rp.welch_segments.unwrap_or(dp.welch_segments),
        noise_settle_length: check_nonneg(
            si(rp.noise_settle_length, dp.noise_settle_length),
            "protocol.noise_settle_length",
        )?,
        band_linewidths: check_pos(
            si(rp.band_linewidths, dp.band_linewidths),
            "protocol.band_linewidths",
        )?,
    };
    check(
        (0.0..std::f64::consts::FRAC_PI_2).contains(&protocol.tip_angle),
        "protocol.tip_angle",
        "must lie in [0, 90 deg)",
        (),
    )?;
    check(
        protocol.settle_length >= 5.0,
        "protocol.settle_length",
        "must be >= 5 (T_eff units)",
        (),
    )?;
    check(
        protocol.points >= 8,
        "protocol.points",
        "a Lorentzian fit needs >= 8 points",
        (),
    )?;
    check(
        protocol.welch_segments >= 2,
        "protocol.welch_segments",
        "must be >= 2",
        (),
    )?;
    check(
        protocol.maser_seed > 0.0 && protocol.maser_seed < 0.1 * p0,
        "protocol.maser_seed",
        "must lie in (0, 0.1·p0)",
        (),
    )?;

    let seed = overrides.seed.or(raw.seed);
    let has_noise = noise.photon_shot > 0.0 || noise.magnetic > 0.0;
    check(
        seed.is_some() || !has_noise,
        "seed",
        "required when noise.photon_shot or noise.magnetic is nonzero",
        (),
    )?;

    Ok(ExperimentConfig {
        seed,
        system,
        feedback,
        drive,
        noise,
        integrator,
        sweep,
        protocol,
        output_dir: raw.output.dir,
        format: raw.output.format.unwrap_or_default(),
    })
}

fn check_nonneg(v: f64, path: &str) -> Result<f64, ConfigError> {
    check(v >= 0.0, path, "must be >= 0", v)
}

fn check_pos(v: f64, path: &str) -> Result<f64, ConfigError> {
    check(v > 0.0, path, "must be > 0", v)
}

fn sorted(axis: Axis, mut values: Vec<f64>) -> Sweep {
    values.sort_by(f64::total_cmp);
    Sweep { axis, values }
}

fn resolve_sweep(s: RawSweep) -> Result<Sweep, ConfigError> {
    let resolve =
        |q: &RawQuantity, path: String| s.axis.resolve(q).map_err(|m| ConfigError::new(path, m));
    let values = match (&s.values, &s.start, &s.stop, s.count) {
        (Some(values), None, None, None) => values
            .iter()
            .enumerate()
            .map(|(i, q)| resolve(q, format!("sweep.values[{i}]")))
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(start), Some(stop), Some(count)) => {
            let a = resolve(start, "sweep.start".into())?;
            let b = resolve(stop, "sweep.stop".into())?;
            check(count >= 1, "sweep.count", "must be >= 1", ())?;
            if s.spacing == Spacing::Log {
                check(
                    a > 0.0 && b > 0.0,
                    "sweep.spacing",
                    "log spacing needs positive start and stop",
                    (),
                )?;
            }
            (0..count)
                .map(|i| {
                    let u = if count == 1 {
                        0.0
                    } else {
                        i as f64 / (count - 1) as f64
                    };
                    match s.spacing {
                        Spacing::Linear => a + (b - a) * u,
                        Spacing::Log => a * (b / a).powf(u),
                    }
                })
                .collect()
        }
        _ => {
            return Err(ConfigError::new(
                "sweep",
                "give either `values` or all of `start`, `stop`, `count`",
            ))
        }
    };
    check(!values.is_empty(), "sweep.values", "must not be empty", ())?;
    Ok(sorted(s.axis, values))
}
