//! Time-domain integration of the closed-loop spin system.
//!
//! All simulations record on a uniform grid (`record_interval`) while the
//! integrator runs on its own finer grid. The recorded magnetometer signal
//! is the x projection of the effective field, `b_max·Px`, plus readout noise
//! when a noise model is attached.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{rk4_step, DormandPrince, StepFailure};
use crate::model::{
    cooperativity, effective_coherence_time, BlochSystem, DriveField, FeedbackConfig, Model,
    SpinState, SystemParams,
};
use crate::sensing::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed,
    #[default]
    Rk45Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step for RK4, s. Also the noise update interval.
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Largest adaptive step, s.
    pub max_step: f64,
    /// Spacing of recorded samples, s. Must be a multiple of `dt` for RK4.
    pub record_interval: f64,
    pub model: Model,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk45Adaptive,
            dt: 1.0 / 400.0,
            rtol: 1e-9,
            atol: 1e-12,
            max_step: 0.01,
            record_interval: 0.01,
            model: Model::Linearized,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(dt: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk4Fixed,
            dt,
            ..Default::default()
        }
    }

    pub fn with_model(mut self, model: Model) -> Self {
        self.model = model;
        self
    }

    pub fn with_record_interval(mut self, record_interval: f64) -> Self {
        self.record_interval = record_interval;
        self
    }

    /// Checks tolerances and, for fixed steps, that every precession cycle
    /// gets at least 20 steps.
    pub fn validate(&self, precession_hz: f64) -> Result<()> {
        if !(self.record_interval.is_finite() && self.record_interval > 0.0) {
            return Err(Error::param("integrator.record_interval", "must be > 0"));
        }
        match self.method {
            Method::Rk4Fixed => {
                if !(self.dt.is_finite() && self.dt > 0.0) {
                    return Err(Error::param("integrator.dt", "must be > 0"));
                }
                if self.dt * precession_hz >= 0.05 {
                    return Err(Error::param(
                        "integrator.dt",
                        format!(
                            "dt = {} s gives fewer than 20 steps per {precession_hz:.4} Hz cycle",
                            self.dt
                        ),
                    ));
                }
                self.steps_per_record()?;
            }
            Method::Rk45Adaptive => {
                if !(self.rtol > 0.0 && self.atol > 0.0) {
                    return Err(Error::param("integrator.rtol", "rtol and atol must be > 0"));
                }
                if !(self.max_step > 0.0) {
                    return Err(Error::param("integrator.max_step", "must be > 0"));
                }
            }
        }
        Ok(())
    }

    fn steps_per_record(&self) -> Result<usize> {
        let ratio = self.record_interval / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio {
            return Err(Error::param(
                "integrator.record_interval",
                format!("must be an integer multiple of dt (ratio {ratio})"),
            ));
        }
        Ok(n as usize)
    }
}

/// One recorded sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sample {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    /// Magnetometer output, tesla-equivalent.
    pub signal: f64,
}

impl Sample {
    pub fn state(&self) -> SpinState {
        SpinState::new(self.px, self.py, self.pz)
    }

    pub fn transverse(&self) -> f64 {
        self.px.hypot(self.py)
    }
}

/// Uniformly sampled simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<Sample>,
}

impl TimeSeries {
    pub fn new(t0: f64, dt: f64, samples: Vec<Sample>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", "sample interval must be > 0"));
        }
        if samples.iter().any(|s| {
            !(s.px.is_finite() && s.py.is_finite() && s.pz.is_finite() && s.signal.is_finite())
        }) {
            return Err(Error::InvalidState(
                "non-finite sample in time series".into(),
            ));
        }
        Ok(TimeSeries { t0, dt, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.dt
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.len().saturating_sub(1) as f64
    }

    pub fn signal(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.signal).collect()
    }

    pub fn transverse(&self) -> Vec<f64> {
        self.samples.iter().map(Sample::transverse).collect()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// CSV with header `t,px,py,pz,signal`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,px,py,pz,signal")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.time(i),
                s.px,
                s.py,
                s.pz,
                s.signal
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io(e.to_string()))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::Io(e.to_string()))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Io("empty time-series file".into()))?
            .map_err(|e| Error::Io(e.to_string()))?;
        if header.trim() != "t,px,py,pz,signal" {
            return Err(Error::Io(format!("unexpected header `{}`", header.trim())));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let fields = fields.map_err(|e| Error::Io(format!("line {}: {e}", n + 2)))?;
            if fields.len() != 5 {
                return Err(Error::Io(format!("line {}: expected 5 columns", n + 2)));
            }
            times.push(fields[0]);
            samples.push(Sample {
                px: fields[1],
                py: fields[2],
                pz: fields[3],
                signal: fields[4],
            });
        }
        if times.len() < 2 {
            return Err(Error::InsufficientData(
                "time series needs at least 2 rows".into(),
            ));
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        for (i, t) in times.iter().enumerate() {
            if (t - (times[0] + i as f64 * dt)).abs() > 1e-6 * dt {
                return Err(Error::Io(format!("non-uniform sampling at row {}", i + 2)));
            }
        }
        TimeSeries::new(times[0], dt, samples)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(e.to_string()))?;
        TimeSeries::read_csv(std::io::BufReader::new(file))
    }
}

/// Random field and readout processes attached to a fixed-step run.
///
/// The two processes draw from independent generators, so adding readout
/// noise never changes the spin trajectory.
struct NoiseStreams {
    field: Option<(ChaCha8Rng, f64)>,
    readout: Option<(ChaCha8Rng, f64)>,
}

impl NoiseStreams {
    fn new(noise: &NoiseModel, seed: u64, dt: f64, record_interval: f64) -> Result<Self> {
        noise.validate()?;
        let stream = |density: f64, sample_interval: f64, salt: u64| {
            (density > 0.0).then(|| {
                // one-sided ASD ρ over [0, fs/2] ⇔ per-sample σ = ρ·√(fs/2)
                let sigma = density * (0.5 / sample_interval).sqrt();
                (ChaCha8Rng::seed_from_u64(splitmix64(seed ^ salt)), sigma)
            })
        };
        Ok(NoiseStreams {
            field: stream(noise.magnetic, dt, 0x6d61_676e_6574_6963),
            readout: stream(noise.photon_shot, record_interval, 0x7265_6164_6f75_7421),
        })
    }

    #[inline]
    fn field(&mut self) -> f64 {
        match &mut self.field {
            Some((rng, sigma)) => {
                let z: f64 = StandardNormal.sample(rng);
                *sigma * z
            }
            None => 0.0,
        }
    }

    #[inline]
    fn readout(&mut self, signal: f64) -> f64 {
        match &mut self.readout {
            Some((rng, sigma)) => {
                let z: f64 = StandardNormal.sample(rng);
                signal + *sigma * z
            }
            None => signal,
        }
    }
}

/// SplitMix64 finalizer, used to decorrelate derived seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything a run needs besides its initial state.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub params: &'a SystemParams,
    pub feedback: &'a FeedbackConfig,
    pub drive: &'a DriveField,
    pub duration: f64,
    pub integrator: &'a IntegratorConfig,
}

/// Integrates from `initial` and hands every recorded sample to `sink`.
///
/// With a noise model the run uses fixed RK4 steps of `integrator.dt`
/// regardless of `integrator.method`; the field noise is held constant
/// across each step.
pub fn simulate_into<S: FnMut(f64, &Sample)>(
    run: &RunSpec<'_>,
    initial: SpinState,
    noise: Option<(&NoiseModel, u64)>,
    mut sink: S,
) -> Result<()> {
    let RunSpec {
        params,
        feedback,
        drive,
        duration,
        integrator,
    } = *run;
    params.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::param("duration", "must be finite and > 0"));
    }
    if !initial.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite initial state {initial:?}"
        )));
    }
    let sys = BlochSystem::new(params, feedback, integrator.model);
    let precession_hz = sys.precession_rate().abs() / (2.0 * PI);
    let mut streams = match noise {
        Some((model, seed)) => Some(NoiseStreams::new(
            model,
            seed,
            integrator.dt,
            integrator.record_interval,
        )?),
        None => None,
    };
    let method = if streams.is_some() {
        Method::Rk4Fixed
    } else {
        integrator.method
    };
    let mut integ = *integrator;
    integ.method = method;
    integ.validate(precession_hz)?;

    let rec = integ.record_interval;
    let n_records = (duration / rec + 1e-9).floor() as usize + 1;
    let b_max = params.b_max;
    let mut y = initial;
    let emit = |y: &SpinState, streams: &mut Option<NoiseStreams>, sink: &mut S, t: f64| {
        let clean = b_max * y.px;
        let signal = match streams {
            Some(s) => s.readout(clean),
            None => clean,
        };
        sink(
            t,
            &Sample {
                px: y.px,
                py: y.py,
                pz: y.pz,
                signal,
            },
        );
    };
    emit(&y, &mut streams, &mut sink, 0.0);

    match method {
        Method::Rk4Fixed => {
            let m = integ.steps_per_record()?;
            let h = integ.dt;
            let mut step: u64 = 0;
            for k in 1..n_records {
                for _ in 0..m {
                    let t = step as f64 * h;
                    let b_noise = streams.as_mut().map_or(0.0, NoiseStreams::field);
                    let by0 = drive.field_at(t) + b_noise;
                    let by_mid = drive.field_at(t + 0.5 * h) + b_noise;
                    let by1 = drive.field_at(t + h) + b_noise;
                    y = rk4_step(&sys, &y, h, by0, by_mid, by1);
                    step += 1;
                }
                if !y.is_finite() {
                    return Err(Error::Integration {
                        t: k as f64 * rec,
                        reason: "state became non-finite".into(),
                    });
                }
                emit(&y, &mut streams, &mut sink, k as f64 * rec);
            }
        }
        Method::Rk45Adaptive => {
            let mut dp = DormandPrince::new(
                &sys,
                |t| drive.field_at(t),
                integ.rtol,
                integ.atol,
                integ.max_step,
            );
            for k in 1..n_records {
                let t0 = (k - 1) as f64 * rec;
                let t1 = k as f64 * rec;
                dp.advance(t0, &mut y, t1).map_err(|f| Error::Integration {
                    t: t0,
                    reason: match f {
                        StepFailure::StepTooSmall(h) => format!(
                            "step size {h:e} s fell below resolution (rtol {}, atol {})",
                            integ.rtol, integ.atol
                        ),
                        StepFailure::NonFinite => "state became non-finite".into(),
                    },
                })?;
                emit(&y, &mut streams, &mut sink, t1);
            }
        }
    }
    Ok(())
}

/// Collects a run into a [`TimeSeries`].
pub fn simulate(
    run: &RunSpec<'_>,
    initial: SpinState,
    noise: Option<(&NoiseModel, u64)>,
) -> Result<TimeSeries> {
    let n = (run.duration / run.integrator.record_interval + 1e-9).floor() as usize + 1;
    let mut samples = Vec::with_capacity(n.min(1 << 24));
    simulate_into(run, initial, noise, |_, s| samples.push(*s))?;
    TimeSeries::new(0.0, run.integrator.record_interval, samples)
}

/// Free decay after tipping the equilibrium polarization by `tip_angle`.
pub fn simulate_decay(
    params: &SystemParams,
    fb: &FeedbackConfig,
    tip_angle: f64,
    duration: f64,
    integ: &IntegratorConfig,
) -> Result<TimeSeries> {
    if !(0.0..PI / 2.0).contains(&tip_angle) {
        return Err(Error::param("tip_angle", "must lie in [0, π/2)"));
    }
    let drive = DriveField::none();
    let run = RunSpec {
        params,
        feedback: fb,
        drive: &drive,
        duration,
        integrator: integ,
    };
    simulate(&run, SpinState::tipped(params, tip_angle), None)
}

/// Response to a continuous drive, starting from equilibrium. The run must
/// be long enough (≥ 5 T_eff) for the transient to die out.
pub fn simulate_driven(
    params: &SystemParams,
    fb: &FeedbackConfig,
    drive: &DriveField,
    duration: f64,
    integ: &IntegratorConfig,
) -> Result<TimeSeries> {
    let t_eff = effective_coherence_time(params, fb)?;
    check_settling(duration, t_eff)?;
    let run = RunSpec {
        params,
        feedback: fb,
        drive,
        duration,
        integrator: integ,
    };
    simulate(&run, SpinState::equilibrium(params), None)
}

fn check_settling(duration: f64, t_eff: f64) -> Result<()> {
    if duration < 5.0 * t_eff {
        return Err(Error::param(
            "duration",
            format!("{duration} s is shorter than 5·T_eff = {} s", 5.0 * t_eff),
        ));
    }
    Ok(())
}

/// Self-oscillation above threshold (C ≥ 1), started from a small transverse
/// seed on the surface |P| = p0. Always integrates the full nonlinear model.
pub fn simulate_maser(
    params: &SystemParams,
    fb: &FeedbackConfig,
    seed_transverse: f64,
    duration: f64,
    integ: &IntegratorConfig,
) -> Result<TimeSeries> {
    let c = cooperativity(params, fb);
    if c < 1.0 {
        return Err(Error::Regime(format!(
            "maser simulation needs C >= 1, got C = {c:.4}"
        )));
    }
    if !(seed_transverse > 0.0 && seed_transverse < 0.1 * params.p0) {
        return Err(Error::param("seed_transverse", "must lie in (0, 0.1·p0)"));
    }
    let integ = integ.with_model(Model::FullNonlinear);
    let initial = SpinState::new(
        seed_transverse,
        0.0,
        (params.p0 * params.p0 - seed_transverse * seed_transverse).sqrt(),
    );
    let drive = DriveField::none();
    let run = RunSpec {
        params,
        feedback: fb,
        drive: &drive,
        duration,
        integrator: &integ,
    };
    simulate(&run, initial, None)
}

/// Noisy run: white field noise of density `noise.magnetic` along y enters
/// the dynamics, white readout noise of density `noise.photon_shot` is added
/// to the magnetometer signal only. Deterministic per `seed`.
pub fn simulate_noisy(
    run: &RunSpec<'_>,
    initial: SpinState,
    noise: &NoiseModel,
    seed: u64,
) -> Result<TimeSeries> {
    check_noise_rate(run)?;
    simulate(run, initial, Some((noise, seed)))
}

/// Noise runs sample the field at 1/dt, which must be at least ten times the
/// precession frequency.
pub(crate) fn check_noise_rate(run: &RunSpec<'_>) -> Result<()> {
    let precession_hz = BlochSystem::new(run.params, run.feedback, run.integrator.model)
        .precession_rate()
        .abs()
        / (2.0 * PI);
    if 1.0 / run.integrator.dt < 10.0 * precession_hz {
        return Err(Error::param(
            "integrator.dt",
            "noise runs need a step rate of at least 10× the precession frequency",
        ));
    }
    Ok(())
}
