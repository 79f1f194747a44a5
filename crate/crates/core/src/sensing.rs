//! Embedded magnetometer: readout of the effective field, feedback closure,
//! noise routing and input-referred sensitivity.
//!
//! Two noise sources matter. Readout (photon-shot) noise is added after the
//! spins and is therefore divided by the amplifier gain when referred to the
//! input. Magnetic noise acts on the spins like any signal field, is
//! amplified with it, and sets the floor of the input-referred sensitivity.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{Psd, WelchAccumulator, WelchConfig};
use crate::dynamics::{check_noise_rate, simulate_into, RunSpec, TimeSeries};
use crate::error::{Error, Result};
use crate::model::{
    amplification_factor, effective_coherence_time, resonance_frequency, FeedbackConfig, SpinState,
    SystemParams,
};

/// Readout response to the x and y components of the effective field. The
/// ratio fixes the feedback-induced frequency shift: slope = −cy/cx.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnetometerModel {
    pub cx: f64,
    pub cy: f64,
}

impl MagnetometerModel {
    pub fn new(cx: f64, cy: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite()) || (cx == 0.0 && cy == 0.0) {
            return Err(Error::param(
                "magnetometer",
                "cx and cy must be finite, not both zero",
            ));
        }
        Ok(MagnetometerModel { cx, cy })
    }

    /// Slope of the resonance shift against ξ, Hz per s⁻¹.
    pub fn shift_slope(&self) -> f64 {
        -self.cy / self.cx
    }

    /// Loop with incoherent rate `xi` closed through this magnetometer.
    pub fn feedback(&self, xi: f64) -> FeedbackConfig {
        FeedbackConfig::with_shift_slope(xi, self.shift_slope())
    }
}

/// Amplitude spectral densities, T/√Hz.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Readout-only noise of the magnetometer.
    pub photon_shot: f64,
    /// Field noise acting on the spins (along y).
    pub magnetic: f64,
    /// Reference line only; never simulated.
    pub spin_projection: f64,
}

impl NoiseModel {
    pub fn new(photon_shot: f64, magnetic: f64, spin_projection: f64) -> Result<Self> {
        let n = NoiseModel {
            photon_shot,
            magnetic,
            spin_projection,
        };
        n.validate()?;
        Ok(n)
    }

    /// 7.3 pT/√Hz photon-shot, 3.2 fT/√Hz magnetic, 8.7 fT/√Hz spin-projection.
    pub fn reference() -> Self {
        NoiseModel {
            photon_shot: 7.3e-12,
            magnetic: 3.2e-15,
            spin_projection: 8.7e-15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise.photon_shot", self.photon_shot),
            ("noise.magnetic", self.magnetic),
            ("noise.spin_projection", self.spin_projection),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(
                    name,
                    "spectral density must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        self.photon_shot == 0.0 && self.magnetic == 0.0
    }
}

/// B_eff = b_max·P, T.
pub fn effective_field(state: &SpinState, params: &SystemParams) -> [f64; 3] {
    [
        params.b_max * state.px,
        params.b_max * state.py,
        params.b_max * state.pz,
    ]
}

/// y component of the feedback field, χ₁Px − χ₂Py, with the gains taken at
/// the state's own P_z.
pub fn feedback_field(
    state: &SpinState,
    fb: &FeedbackConfig,
    params: &SystemParams,
) -> Result<f64> {
    let chi1 = fb.chi1(params, state.pz)?;
    let chi2 = fb.chi2(params, state.pz)?;
    Ok(chi1 * state.px - chi2 * state.py)
}

/// Complex gain from a y test field to the transverse effective field at
/// the magnetometer: `b_max·(|γ|p0/2) / (1/T_eff + i·2πδ)`.
pub fn transfer_function(params: &SystemParams, fb: &FeedbackConfig, f: f64) -> Result<Complex64> {
    let t_eff = effective_coherence_time(params, fb)?;
    let detuning = f - resonance_frequency(params, fb);
    let k = params.amplification_slope();
    Ok(Complex64::new(k, 0.0) / Complex64::new(1.0 / t_eff, 2.0 * PI * detuning))
}

/// √((photon/|H|)² + magnetic²), T/√Hz.
pub fn input_referred_sensitivity(noise: &NoiseModel, gain: f64) -> f64 {
    (noise.photon_shot / gain).hypot(noise.magnetic)
}

/// Closed-form on-resonance sensitivity √((a/T_eff)² + b²) with
/// a = photon/k and b = magnetic.
pub fn resonance_sensitivity(noise: &NoiseModel, params: &SystemParams, t_eff: f64) -> Result<f64> {
    Ok(input_referred_sensitivity(
        noise,
        amplification_factor(params, t_eff)?,
    ))
}

/// Coefficients of the sensitivity model implied by a noise model.
pub fn sensitivity_coefficients(noise: &NoiseModel, params: &SystemParams) -> (f64, f64) {
    (
        noise.photon_shot / params.amplification_slope(),
        noise.magnetic,
    )
}

/// Input-referred noise spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySpectrum {
    pub frequencies: Vec<f64>,
    /// T/√Hz
    pub input_referred: Vec<f64>,
}

/// Run metadata stored next to a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMetadata {
    pub a: f64,
    pub b: f64,
    pub k: f64,
    pub eta: f64,
    pub t_eff: f64,
}

impl SensitivitySpectrum {
    pub fn new(frequencies: Vec<f64>, input_referred: Vec<f64>) -> Result<Self> {
        if frequencies.len() != input_referred.len() {
            return Err(Error::Config("spectrum columns differ in length".into()));
        }
        if input_referred.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidState(
                "spectrum values must be finite and > 0".into(),
            ));
        }
        Ok(SensitivitySpectrum {
            frequencies,
            input_referred,
        })
    }

    /// Divides an output-noise PSD by |H(f)|².
    pub fn from_psd(psd: &Psd, params: &SystemParams, fb: &FeedbackConfig) -> Result<Self> {
        let mut frequencies = Vec::with_capacity(psd.frequencies.len());
        let mut values = Vec::with_capacity(psd.frequencies.len());
        for (&f, &p) in psd.frequencies.iter().zip(&psd.power) {
            let gain = transfer_function(params, fb, f)?.norm();
            let v = p.sqrt() / gain;
            // drop bins where nothing was recorded (e.g. an exact zero DC bin)
            if v > 0.0 && v.is_finite() {
                frequencies.push(f);
                values.push(v);
            }
        }
        SensitivitySpectrum::new(frequencies, values)
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// RMS of the input-referred density over bins within `half_width` of
    /// `center`.
    pub fn band_rms(&self, center: f64, half_width: f64) -> Option<f64> {
        let (sum, n) = self
            .frequencies
            .iter()
            .zip(&self.input_referred)
            .filter(|(f, _)| (**f - center).abs() <= half_width)
            .fold((0.0, 0usize), |(s, n), (_, v)| (s + v * v, n + 1));
        (n > 0).then(|| (sum / n as f64).sqrt())
    }

    /// Input-referred density at `center`, estimated from every bin within
    /// `half_width`. Near resonance the input-referred power is exactly
    /// s0² + c·(f − center)²: readout noise grows as 1/|H|² and field noise
    /// is flat. The squared spectrum is fitted to that form and s0 returned.
    /// Welch estimates scatter in proportion to their mean, so the fit is
    /// reweighted by the inverse squared model.
    pub fn resonance_level(&self, center: f64, half_width: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .frequencies
            .iter()
            .zip(&self.input_referred)
            .filter(|(f, _)| (**f - center).abs() <= half_width)
            .map(|(f, v)| ((f - center).powi(2), v * v))
            .collect();
        let mut coef = (0.0, 0.0);
        for pass in 0..4 {
            let mut s = [0.0; 5];
            for &(u, y) in &pts {
                let w = if pass == 0 {
                    1.0
                } else {
                    // floor keeps a transiently negative slope from blowing up weights
                    (coef.0 + coef.1 * u).max(0.1 * coef.0).powi(-2)
                };
                s[0] += w;
                s[1] += w * u;
                s[2] += w * u * u;
                s[3] += w * y;
                s[4] += w * u * y;
            }
            let det = s[0] * s[2] - s[1] * s[1];
            if !(det > 1e-12 * s[0] * s[2]) {
                return self.band_rms(center, half_width);
            }
            coef = (
                (s[2] * s[3] - s[1] * s[4]) / det,
                (s[0] * s[4] - s[1] * s[3]) / det,
            );
            if !(coef.0 > 0.0) {
                return None;
            }
        }
        Some(coef.0.sqrt())
    }

    /// Bins within `[lo, hi]`.
    pub fn restrict(&self, lo: f64, hi: f64) -> SensitivitySpectrum {
        let (frequencies, input_referred) = self
            .frequencies
            .iter()
            .zip(&self.input_referred)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(f, v)| (*f, *v))
            .unzip();
        SensitivitySpectrum {
            frequencies,
            input_referred,
        }
    }

    /// CSV with header `f_hz,sensitivity_T_per_sqrtHz`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "f_hz,sensitivity_T_per_sqrtHz")?;
        for (f, v) in self.frequencies.iter().zip(&self.input_referred) {
            writeln!(w, "{f},{v}")?;
        }
        Ok(())
    }

    pub fn to_json(&self, meta: &SpectrumMetadata) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            metadata: &'a SpectrumMetadata,
            f_hz: &'a [f64],
            sensitivity_t_per_sqrt_hz: &'a [f64],
        }
        serde_json::to_string_pretty(&Record {
            metadata: meta,
            f_hz: &self.frequencies,
            sensitivity_t_per_sqrt_hz: &self.input_referred,
        })
        .expect("spectrum serializes")
    }
}

/// Full width at half maximum of the power response, 1/(π·T_eff), Hz.
pub fn linewidth(params: &SystemParams, fb: &FeedbackConfig) -> Result<f64> {
    Ok(1.0 / (PI * effective_coherence_time(params, fb)?))
}

/// Welch spectrum of the recorded magnetometer signal, referred to the
/// input through |H(f)|. The record must cover at least 20 linewidths⁻¹.
pub fn sensitivity_spectrum_from_simulation(
    ts: &TimeSeries,
    params: &SystemParams,
    fb: &FeedbackConfig,
    welch: &WelchConfig,
) -> Result<SensitivitySpectrum> {
    let lw = linewidth(params, fb)?;
    let needed = 20.0 / lw;
    if ts.duration() < needed {
        return Err(Error::Resolution(format!(
            "record of {:.1} s is shorter than 20/linewidth = {needed:.1} s",
            ts.duration()
        )));
    }
    let mut acc = WelchAccumulator::new(*welch, ts.sample_rate())?;
    for s in &ts.samples {
        acc.push(s.signal);
    }
    if acc.segments() < 2 {
        return Err(Error::InsufficientData(
            "record holds fewer than 2 welch segments".into(),
        ));
    }
    SensitivitySpectrum::from_psd(&acc.finish()?, params, fb)
}

/// Output-noise PSD of a noisy run from equilibrium, streamed sample by
/// sample into the estimator. The first `settle` seconds are discarded so
/// the loop reaches its stationary noise level; the remaining record must
/// cover at least 20 linewidths⁻¹.
pub fn simulated_noise_psd(
    run: &RunSpec<'_>,
    noise: &NoiseModel,
    seed: u64,
    settle: f64,
    welch: &WelchConfig,
) -> Result<Psd> {
    let lw = linewidth(run.params, run.feedback)?;
    let needed = 20.0 / lw;
    if run.duration - settle < needed {
        return Err(Error::Resolution(format!(
            "record of {:.1} s after settling is shorter than 20/linewidth = {needed:.1} s",
            run.duration - settle
        )));
    }
    check_noise_rate(run)?;
    let mut acc = WelchAccumulator::new(*welch, 1.0 / run.integrator.record_interval)?;
    simulate_into(
        run,
        SpinState::equilibrium(run.params),
        Some((noise, seed)),
        |t, s| {
            if t >= settle {
                acc.push(s.signal);
            }
        },
    )?;
    if acc.segments() < 2 {
        return Err(Error::InsufficientData(
            "record holds fewer than 2 welch segments".into(),
        ));
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{larmor_frequency, BASELINE_SHIFT_SLOPE};
    use approx::assert_relative_eq;

    #[test]
    fn effective_field_examples() {
        let p = SystemParams::xe129_baseline();
        assert_eq!(effective_field(&SpinState::default(), &p), [0.0; 3]);
        let b = effective_field(&SpinState::new(0.01, 0.0, 0.18), &p);
        assert_relative_eq!(b[0], 23.0e-9, max_relative = 2e-3);
        assert_relative_eq!(b[2], 414.0e-9, max_relative = 2e-3);
        let unit = effective_field(&SpinState::new(0.6, 0.0, 0.8), &p);
        assert!(unit.iter().map(|v| v * v).sum::<f64>().sqrt() <= p.b_max * (1.0 + 1e-15));
    }

    #[test]
    fn feedback_field_examples() {
        let p = SystemParams::xe129_baseline();
        let fb = FeedbackConfig::with_shift_slope(0.01, BASELINE_SHIFT_SLOPE);
        assert_eq!(
            feedback_field(&SpinState::new(0.0, 0.0, 0.18), &fb, &p).unwrap(),
            0.0
        );
        let s = SpinState::new(0.001, 0.0, 0.18);
        let b = feedback_field(&s, &fb, &p).unwrap();
        assert_relative_eq!(b, 0.01 / (p.gamma * 0.18) * 0.001, max_relative = 1e-14);
        let flipped = feedback_field(&s, &fb.with_xi(-0.01), &p).unwrap();
        assert_eq!(flipped, -b);
    }

    #[test]
    fn transfer_function_shape() {
        let p = SystemParams::xe129_baseline();
        let fb = FeedbackConfig::with_shift_slope(-0.02, BASELINE_SHIFT_SLOPE);
        let t_eff = effective_coherence_time(&p, &fb).unwrap();
        let f_res = resonance_frequency(&p, &fb);
        let on = transfer_function(&p, &fb, f_res).unwrap();
        assert_relative_eq!(
            on.norm(),
            amplification_factor(&p, t_eff).unwrap(),
            max_relative = 1e-12
        );
        for d in [0.001, 0.01, 0.3] {
            let up = transfer_function(&p, &fb, f_res + d).unwrap().norm();
            let down = transfer_function(&p, &fb, f_res - d).unwrap().norm();
            assert_relative_eq!(up, down, max_relative = 1e-12);
        }
        // far wing: γ p0 b_max / (4π|δ|)
        let d = 2.0;
        let wing = transfer_function(&p, &fb, f_res + d).unwrap().norm();
        let asymptote = p.gamma.abs() * p.p0 * p.b_max / (4.0 * PI * d);
        assert_relative_eq!(wing, asymptote, max_relative = 1e-4);
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let g = transfer_function(&p, &fb, f_res + i as f64 * 0.01)
                .unwrap()
                .norm();
            assert!(g < last);
            last = g;
        }
        assert!(larmor_frequency(&p) > 0.0);
    }

    #[test]
    fn sensitivity_examples() {
        let noise = NoiseModel::reference();
        let s = input_referred_sensitivity(&noise, 4600.0);
        assert_relative_eq!(s, 3.574e-15, max_relative = 1e-3);
        let floor = input_referred_sensitivity(&noise, 1e12);
        assert_relative_eq!(floor, 3.2e-15, max_relative = 1e-9);
        let other_calibration = (860.3f64 / 300.0).hypot(3.2);
        assert_relative_eq!(other_calibration, 4.30, max_relative = 1e-3);
    }

    #[test]
    fn on_resonance_identity() {
        let p = SystemParams::xe129_baseline();
        let noise = NoiseModel::reference();
        let (a, b) = sensitivity_coefficients(&noise, &p);
        for t_eff in [10.0, 50.0, 300.0, 900.0] {
            let s = resonance_sensitivity(&noise, &p, t_eff).unwrap();
            assert_relative_eq!(s, (a / t_eff).hypot(b), max_relative = 1e-14);
        }
    }

    #[test]
    fn resonance_level_recovers_exact_quadratic() {
        let p = SystemParams::xe129_baseline();
        let fb = FeedbackConfig::for_coherence_time(&p, 80.0, 0.0).unwrap();
        let noise = NoiseModel::reference();
        let f0 = resonance_frequency(&p, &fb);
        let frequencies: Vec<f64> = (0..400).map(|i| f0 - 0.01 + i as f64 * 5e-5).collect();
        let values = frequencies
            .iter()
            .map(|&f| {
                let h = transfer_function(&p, &fb, f).unwrap().norm();
                (noise.photon_shot / h).hypot(noise.magnetic)
            })
            .collect();
        let s = SensitivitySpectrum::new(frequencies, values).unwrap();
        let expected = resonance_sensitivity(&noise, &p, 80.0).unwrap();
        let lw = linewidth(&p, &fb).unwrap();
        for half in [lw / 8.0, lw / 2.0, lw] {
            let level = s.resonance_level(f0, half).unwrap();
            assert_relative_eq!(level, expected, max_relative = 1e-9);
        }
        // plain band RMS is biased upward by the off-resonance bins
        assert!(s.band_rms(f0, lw).unwrap() > 1.05 * expected);
        assert_eq!(s.resonance_level(f0 + 1.0, 1e-6), None);
    }

    #[test]
    fn negative_density_rejected() {
        assert!(NoiseModel::new(-1e-12, 0.0, 0.0).is_err());
        assert!(MagnetometerModel::new(0.0, 0.0).is_err());
        let m = MagnetometerModel::new(1.0, 0.46).unwrap();
        assert_relative_eq!(m.shift_slope(), -0.46);
        assert_relative_eq!(m.feedback(0.01).shift_slope(), -0.46, max_relative = 1e-14);
    }
}
