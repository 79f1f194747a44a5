//! Closed-form physics of the feedback-coupled noble-gas spin ensemble.
//!
//! The transverse polarization obeys a Bloch equation in which the embedded
//! magnetometer output is fed back as a field on the spins. Two feedback
//! rates summarize the loop: `xi` changes the transverse decay rate and
//! `delta_fb` shifts the precession frequency. Everything in this module is
//! a pure function of its inputs.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cyclic gyromagnetic ratio of ¹²⁹Xe, Hz/T (negative: precesses clockwise about B).
pub const XE129_GAMMA_CYC: f64 = -11.777e6;

/// Baseline amplification slope k = (b_max/2)·p0·|γ|, s⁻¹.
pub const BASELINE_AMPLIFICATION_SLOPE: f64 = 15.34;

/// Baseline slope of the resonance shift against `xi`, Hz per s⁻¹.
pub const BASELINE_SHIFT_SLOPE: f64 = -0.46;

pub const BASELINE_T2: f64 = 31.0;
pub const BASELINE_T1: f64 = 1000.0;
pub const BASELINE_P0: f64 = 0.18;
pub const BASELINE_B0: f64 = 900e-9;

/// Tolerance on |P| above unity allowed for integrator drift.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Physical constants of the noble-gas spin ensemble and its environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Gyromagnetic ratio, rad·s⁻¹·T⁻¹ (signed).
    pub gamma: f64,
    /// Cyclic gyromagnetic ratio, Hz·T⁻¹. Kept in sync with `gamma`.
    pub gamma_cyc: f64,
    /// Intrinsic transverse coherence time T₂, s.
    pub t2_intrinsic: f64,
    /// Longitudinal relaxation time, s. Only the full nonlinear model uses it.
    pub t1: f64,
    /// Effective field seen by the magnetometer at unit polarization (λM₀), T.
    pub b_max: f64,
    /// Equilibrium longitudinal polarization.
    pub p0: f64,
    /// Bias field along z, T.
    pub b0: f64,
}

impl SystemParams {
    pub fn new(
        gamma_cyc: f64,
        t2_intrinsic: f64,
        t1: f64,
        b_max: f64,
        p0: f64,
        b0: f64,
    ) -> Result<Self> {
        let params = SystemParams {
            gamma: 2.0 * PI * gamma_cyc,
            gamma_cyc,
            t2_intrinsic,
            t1,
            b_max,
            p0,
            b0,
        };
        params.validate()?;
        Ok(params)
    }

    /// ¹²⁹Xe with T₂ = 31 s, p0 = 0.18, B₀ = 900 nT and b_max calibrated so
    /// that k = 15.34 s⁻¹.
    pub fn xe129_baseline() -> Self {
        let b_max = b_max_for_slope(BASELINE_AMPLIFICATION_SLOPE, BASELINE_P0, XE129_GAMMA_CYC);
        SystemParams::new(
            XE129_GAMMA_CYC,
            BASELINE_T2,
            BASELINE_T1,
            b_max,
            BASELINE_P0,
            BASELINE_B0,
        )
        .expect("baseline parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_cyc.is_finite() && self.gamma_cyc != 0.0) {
            return Err(Error::param("gamma_cyc", "must be finite and non-zero"));
        }
        if (self.gamma - 2.0 * PI * self.gamma_cyc).abs() > 1e-12 * self.gamma.abs() {
            return Err(Error::param("gamma", "inconsistent with gamma_cyc"));
        }
        if !(self.t2_intrinsic.is_finite() && self.t2_intrinsic > 0.0) {
            return Err(Error::param("t2_intrinsic", "must be finite and > 0"));
        }
        if self.t1.is_nan() || self.t1 < self.t2_intrinsic {
            return Err(Error::param("t1", "must be >= t2_intrinsic"));
        }
        if !(self.b_max.is_finite() && self.b_max > 0.0) {
            return Err(Error::param("b_max", "must be finite and > 0"));
        }
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(Error::param("p0", "must lie in (0, 1]"));
        }
        if !self.b0.is_finite() {
            return Err(Error::param("b0", "must be finite"));
        }
        Ok(())
    }

    pub fn with_b0(mut self, b0: f64) -> Result<Self> {
        self.b0 = b0;
        self.validate()?;
        Ok(self)
    }

    pub fn with_t1(mut self, t1: f64) -> Result<Self> {
        self.t1 = t1;
        self.validate()?;
        Ok(self)
    }

    /// Intrinsic decoherence rate Γ = 1/T₂, s⁻¹.
    pub fn decay_rate(&self) -> f64 {
        1.0 / self.t2_intrinsic
    }

    /// k = (b_max/2)·p0·|γ|, the amplification per second of coherence time.
    pub fn amplification_slope(&self) -> f64 {
        0.5 * self.b_max * self.p0 * self.gamma.abs()
    }
}

/// b_max that yields amplification slope `k` for the given polarization and
/// gyromagnetic ratio.
pub fn b_max_for_slope(k: f64, p0: f64, gamma_cyc: f64) -> f64 {
    2.0 * k / (p0 * (2.0 * PI * gamma_cyc).abs())
}

/// Feedback loop strength expressed through the incoherent rate `xi` and
/// the coherent rate `delta_fb = shift_ratio * xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// Incoherent feedback rate ξ, s⁻¹. Positive values shorten coherence.
    pub xi: f64,
    /// Δ_fb/ξ, fixed by the magnetometer response.
    pub shift_ratio: f64,
    /// Coherent feedback rate Δ_fb, rad/s. Positive values raise the
    /// observed precession frequency.
    pub delta_fb: f64,
}

impl FeedbackConfig {
    pub fn new(xi: f64, shift_ratio: f64) -> Self {
        FeedbackConfig {
            xi,
            shift_ratio,
            delta_fb: shift_ratio * xi,
        }
    }

    /// Builds the loop from `xi` and the observable slope of the resonance
    /// shift, in Hz per s⁻¹ of `xi`.
    pub fn with_shift_slope(xi: f64, slope_hz: f64) -> Self {
        FeedbackConfig::new(xi, 2.0 * PI * slope_hz)
    }

    /// Open loop.
    pub fn none() -> Self {
        FeedbackConfig::new(0.0, 0.0)
    }

    /// Same magnetometer (shift ratio), different gain.
    pub fn with_xi(&self, xi: f64) -> Self {
        FeedbackConfig::new(xi, self.shift_ratio)
    }

    /// Gain giving cooperativity `c`.
    pub fn for_cooperativity(params: &SystemParams, c: f64, shift_ratio: f64) -> Self {
        FeedbackConfig::new(-c * params.decay_rate(), shift_ratio)
    }

    /// Gain giving effective coherence time `t_eff`.
    pub fn for_coherence_time(params: &SystemParams, t_eff: f64, shift_ratio: f64) -> Result<Self> {
        if !(t_eff.is_finite() && t_eff > 0.0) {
            return Err(Error::param("t_eff", "must be finite and > 0"));
        }
        Ok(FeedbackConfig::new(
            1.0 / t_eff - params.decay_rate(),
            shift_ratio,
        ))
    }

    /// Shift slope in Hz per s⁻¹.
    pub fn shift_slope(&self) -> f64 {
        self.shift_ratio / (2.0 * PI)
    }

    /// Circuit gain χ₁ = ξ/(γ·P_z), T.
    pub fn chi1(&self, params: &SystemParams, pz: f64) -> Result<f64> {
        check_pz(pz)?;
        Ok(self.xi / (params.gamma * pz))
    }

    /// Circuit gain χ₂ = Δ_fb/(|γ|·P_z), T. The modulus keeps a positive
    /// `delta_fb` raising the precession frequency for either sign of γ.
    pub fn chi2(&self, params: &SystemParams, pz: f64) -> Result<f64> {
        check_pz(pz)?;
        Ok(self.delta_fb / (params.gamma.abs() * pz))
    }
}

fn check_pz(pz: f64) -> Result<()> {
    if pz == 0.0 || !pz.is_finite() {
        return Err(Error::InvalidState(format!(
            "feedback gains undefined for P_z = {pz}"
        )));
    }
    Ok(())
}

/// Dimensionless polarization vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpinState {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl SpinState {
    pub const fn new(px: f64, py: f64, pz: f64) -> Self {
        SpinState { px, py, pz }
    }

    /// Equilibrium state (0, 0, p0).
    pub fn equilibrium(params: &SystemParams) -> Self {
        SpinState::new(0.0, 0.0, params.p0)
    }

    /// Equilibrium polarization tipped by `angle` about y.
    pub fn tipped(params: &SystemParams, angle: f64) -> Self {
        SpinState::new(params.p0 * angle.sin(), 0.0, params.p0 * angle.cos())
    }

    pub fn transverse(&self) -> f64 {
        self.px.hypot(self.py)
    }

    pub fn norm(&self) -> f64 {
        (self.px * self.px + self.py * self.py + self.pz * self.pz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.pz.is_finite()
    }

    pub fn check(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite component in {self:?}"
            )));
        }
        if self.norm() > 1.0 + NORM_TOLERANCE {
            return Err(Error::InvalidState(format!(
                "|P| = {} exceeds 1",
                self.norm()
            )));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn axpy(&self, a: f64, other: &SpinState) -> SpinState {
        SpinState::new(
            self.px + a * other.px,
            self.py + a * other.py,
            self.pz + a * other.pz,
        )
    }

    #[inline]
    pub(crate) fn scale(&self, a: f64) -> SpinState {
        SpinState::new(a * self.px, a * self.py, a * self.pz)
    }
}

impl std::ops::Add for SpinState {
    type Output = SpinState;
    fn add(self, rhs: SpinState) -> SpinState {
        SpinState::new(self.px + rhs.px, self.py + rhs.py, self.pz + rhs.pz)
    }
}

impl std::ops::Sub for SpinState {
    type Output = SpinState;
    fn sub(self, rhs: SpinState) -> SpinState {
        SpinState::new(self.px - rhs.px, self.py - rhs.py, self.pz - rhs.pz)
    }
}

impl std::ops::Mul<SpinState> for f64 {
    type Output = SpinState;
    fn mul(self, rhs: SpinState) -> SpinState {
        rhs.scale(self)
    }
}

/// Linearly polarized test field along y: `amplitude·cos(2π·frequency·t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveField {
    /// T
    pub amplitude: f64,
    /// Hz
    pub frequency: f64,
    /// rad
    pub phase: f64,
}

impl DriveField {
    pub fn new(amplitude: f64, frequency: f64, phase: f64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(Error::param("drive.amplitude", "must be finite and >= 0"));
        }
        if !(frequency.is_finite() && frequency >= 0.0) {
            return Err(Error::param("drive.frequency", "must be finite and >= 0"));
        }
        if !phase.is_finite() {
            return Err(Error::param("drive.phase", "must be finite"));
        }
        Ok(DriveField {
            amplitude,
            frequency,
            phase,
        })
    }

    pub fn none() -> Self {
        DriveField {
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
        }
    }

    #[inline]
    pub fn field_at(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            0.0
        } else {
            self.amplitude * (2.0 * PI * self.frequency * t + self.phase).cos()
        }
    }
}

/// Operating regime selected by the cooperativity C = −ξ/Γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    NegativeFeedback,
    Free,
    CoherenceExtension,
    Threshold,
    Maser,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::NegativeFeedback => "negative-feedback",
            Regime::Free => "free",
            Regime::CoherenceExtension => "coherence-extension",
            Regime::Threshold => "threshold",
            Regime::Maser => "maser",
        }
    }

    /// Whether an exponentially decaying signal (and so T_eff) exists.
    pub fn has_coherence_time(&self) -> bool {
        *self < Regime::Threshold
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which form of the Bloch equation to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    /// Small-angle form: P_z pinned at p0, only the transverse plane evolves.
    #[default]
    Linearized,
    /// Full cross product with T₁ repolarization of P_z.
    FullNonlinear,
}

/// Bloch right-hand side with all rate constants precomputed.
///
/// The feedback field is synthesized from the measured transverse
/// polarization with gains fixed at the operating point P_z = p0:
///
/// ```text
/// B_fb,y =  (ξ·Px − d·Py) / (γ p0)
/// B_fb,x = −(ξ·Py + d·Px) / (γ p0)        d = sign(γ)·Δ_fb
/// ```
///
/// The y part is χ₁Px − χ₂Py. The x part is its quadrature partner, which
/// makes the loop act identically on both rotating components so that the
/// transverse eigenvalues are exactly −(Γ+ξ) ± i(γB₀ + d).
#[derive(Debug, Clone, Copy)]
pub struct BlochSystem {
    model: Model,
    gamma: f64,
    b0: f64,
    relax: f64,
    xi: f64,
    coherent: f64,
    p0: f64,
    t1_rate: f64,
    gamma_p0: f64,
    precession: f64,
}

impl BlochSystem {
    pub fn new(params: &SystemParams, fb: &FeedbackConfig, model: Model) -> Self {
        let coherent = params.gamma.signum() * fb.delta_fb;
        BlochSystem {
            model,
            gamma: params.gamma,
            b0: params.b0,
            relax: params.decay_rate(),
            xi: fb.xi,
            coherent,
            p0: params.p0,
            t1_rate: if params.t1.is_finite() {
                1.0 / params.t1
            } else {
                0.0
            },
            gamma_p0: params.gamma * params.p0,
            precession: params.gamma * params.b0 + coherent,
        }
    }

    pub fn model(&self) -> Model {
        self.model
    }

    /// Signed transverse precession rate γB₀ + sign(γ)Δ_fb, rad/s.
    pub fn precession_rate(&self) -> f64 {
        self.precession
    }

    /// Net transverse decay rate Γ + ξ, s⁻¹.
    pub fn transverse_rate(&self) -> f64 {
        self.relax + self.xi
    }

    /// dP/dt with an additional external field `by` along y (drive plus noise).
    #[inline]
    pub fn rhs(&self, s: &SpinState, by: f64) -> SpinState {
        match self.model {
            Model::Linearized => {
                let g = self.relax + self.xi;
                SpinState::new(
                    self.precession * s.py - g * s.px - self.gamma_p0 * by,
                    -self.precession * s.px - g * s.py,
                    0.0,
                )
            }
            Model::FullNonlinear => {
                let bx = -(self.xi * s.py + self.coherent * s.px) / self.gamma_p0;
                let by = (self.xi * s.px - self.coherent * s.py) / self.gamma_p0 + by;
                let bz = self.b0;
                let g = self.gamma;
                SpinState::new(
                    g * (s.py * bz - s.pz * by) - self.relax * s.px,
                    g * (s.pz * bx - s.px * bz) - self.relax * s.py,
                    g * (s.px * by - s.py * bx) + (self.p0 - s.pz) * self.t1_rate,
                )
            }
        }
    }
}

/// dP/dt of the closed-loop Bloch equation at time `t`.
pub fn bloch_rhs(
    state: &SpinState,
    params: &SystemParams,
    fb: &FeedbackConfig,
    drive: &DriveField,
    t: f64,
    model: Model,
) -> Result<SpinState> {
    if !state.is_finite() {
        return Err(Error::InvalidState(format!(
            "non-finite component in {state:?}"
        )));
    }
    Ok(BlochSystem::new(params, fb, model).rhs(state, drive.field_at(t)))
}

/// T_eff = 1/(Γ + ξ).
pub fn effective_coherence_time(params: &SystemParams, fb: &FeedbackConfig) -> Result<f64> {
    let rate = params.decay_rate() + fb.xi;
    if rate > 0.0 {
        Ok(1.0 / rate)
    } else {
        Err(Error::Regime(format!(
            "Γ + ξ = {rate:e} s⁻¹ <= 0: no exponential decay (C = {:.4}); use the maser/threshold simulation",
            cooperativity(params, fb)
        )))
    }
}

/// C = −ξ/Γ.
pub fn cooperativity(params: &SystemParams, fb: &FeedbackConfig) -> f64 {
    -fb.xi * params.t2_intrinsic
}

pub fn classify_regime(c: f64) -> Regime {
    if c < 0.0 {
        Regime::NegativeFeedback
    } else if c == 0.0 {
        Regime::Free
    } else if c < 1.0 {
        Regime::CoherenceExtension
    } else if c == 1.0 {
        Regime::Threshold
    } else {
        Regime::Maser
    }
}

/// η = (b_max/2)·p0·|γ|·T_eff. With `t_eff = t2_intrinsic` this is the
/// open-loop factor η₀.
pub fn amplification_factor(params: &SystemParams, t_eff: f64) -> Result<f64> {
    if !(t_eff > 0.0) {
        return Err(Error::param("t_eff", "must be > 0"));
    }
    Ok(params.amplification_slope() * t_eff)
}

/// Feedback-induced shift of the resonance, Hz.
pub fn resonance_shift(fb: &FeedbackConfig) -> f64 {
    fb.delta_fb / (2.0 * PI)
}

/// |γ·B₀|/2π, Hz.
pub fn larmor_frequency(params: &SystemParams) -> f64 {
    (params.gamma * params.b0).abs() / (2.0 * PI)
}

/// Larmor frequency plus the feedback shift, Hz.
pub fn resonance_frequency(params: &SystemParams, fb: &FeedbackConfig) -> f64 {
    larmor_frequency(params) + resonance_shift(fb)
}

/// Rotating-wave steady-state amplitude of the transverse polarization for
/// a drive of amplitude B_ac at the given frequency:
/// `(|γ| p0 B_ac / 2) / (1/T_eff + i·2πδ)`.
pub fn steady_state_response(
    params: &SystemParams,
    fb: &FeedbackConfig,
    drive: &DriveField,
) -> Result<Complex64> {
    let t_eff = effective_coherence_time(params, fb)?;
    let detuning = drive.frequency - resonance_frequency(params, fb);
    let numerator = 0.5 * params.gamma.abs() * params.p0 * drive.amplitude;
    Ok(Complex64::new(numerator, 0.0) / Complex64::new(1.0 / t_eff, 2.0 * PI * detuning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn baseline() -> SystemParams {
        SystemParams::xe129_baseline()
    }

    #[test]
    fn fixed_point_has_zero_derivative() {
        let p = baseline();
        let fb = FeedbackConfig::with_shift_slope(-0.02, BASELINE_SHIFT_SLOPE);
        for model in [Model::Linearized, Model::FullNonlinear] {
            let d = bloch_rhs(
                &SpinState::equilibrium(&p),
                &p,
                &fb,
                &DriveField::none(),
                0.3,
                model,
            )
            .unwrap();
            assert_eq!(d, SpinState::new(0.0, 0.0, 0.0), "{model:?}");
        }
    }

    #[test]
    fn linearized_reads_off_the_x_equation() {
        let p = baseline();
        let fb = FeedbackConfig::with_shift_slope(0.05, BASELINE_SHIFT_SLOPE);
        let eps = 1e-3;
        let d = bloch_rhs(
            &SpinState::new(eps, 0.0, p.p0),
            &p,
            &fb,
            &DriveField::none(),
            0.0,
            Model::Linearized,
        )
        .unwrap();
        let precession = p.gamma * p.b0 + p.gamma.signum() * fb.delta_fb;
        assert_relative_eq!(d.px, -(p.decay_rate() + fb.xi) * eps, max_relative = 1e-15);
        assert_relative_eq!(d.py, -precession * eps, max_relative = 1e-15);
        assert_eq!(d.pz, 0.0);

        let s = SpinState::new(0.004, -0.007, p.p0);
        let d = bloch_rhs(&s, &p, &fb, &DriveField::none(), 0.0, Model::Linearized).unwrap();
        let expected = precession * s.py - (p.decay_rate() + fb.xi) * s.px;
        assert_eq!(d.px, expected);
    }

    #[test]
    fn full_and_linearized_agree_at_small_tip() {
        let p = baseline();
        let fb = FeedbackConfig::with_shift_slope(-0.02, BASELINE_SHIFT_SLOPE);
        let s = SpinState::tipped(&p, 5f64.to_radians());
        let lin = bloch_rhs(&s, &p, &fb, &DriveField::none(), 0.0, Model::Linearized).unwrap();
        let full = bloch_rhs(&s, &p, &fb, &DriveField::none(), 0.0, Model::FullNonlinear).unwrap();
        // only py has a non-trivial derivative at py = 0; px is the small decay term
        assert!(((full.py - lin.py) / lin.py).abs() < 0.01);
        assert!(((full.px - lin.px) / lin.px).abs() < 0.01);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let p = baseline();
        let r = bloch_rhs(
            &SpinState::new(f64::NAN, 0.0, 0.1),
            &p,
            &FeedbackConfig::none(),
            &DriveField::none(),
            0.0,
            Model::Linearized,
        );
        assert!(matches!(r, Err(Error::InvalidState(_))));
    }

    #[test]
    fn coherence_time_examples() {
        let p = baseline();
        let t = |xi: f64| effective_coherence_time(&p, &FeedbackConfig::new(xi, 0.0)).unwrap();
        assert_relative_eq!(t(0.0), 31.0, max_relative = 1e-12);
        assert_relative_eq!(t(-0.030423), 545.0, max_relative = 1e-3);
        assert_relative_eq!(t(0.217742), 4.0, max_relative = 1e-4);
        let err = effective_coherence_time(&p, &FeedbackConfig::new(-1.0 / 31.0, 0.0));
        assert!(matches!(err, Err(Error::Regime(_))));
        assert!(effective_coherence_time(&p, &FeedbackConfig::new(-0.05, 0.0)).is_err());
    }

    #[test]
    fn cooperativity_and_regimes() {
        let p = baseline();
        assert_eq!(cooperativity(&p, &FeedbackConfig::none()), 0.0);
        let c = cooperativity(&p, &FeedbackConfig::new(-p.decay_rate(), 0.0));
        assert_relative_eq!(c, 1.0, max_relative = 1e-15);
        assert_relative_eq!(
            cooperativity(&p, &FeedbackConfig::new(0.006, 0.0)),
            -0.186,
            max_relative = 1e-12
        );
        assert_eq!(classify_regime(-0.5), Regime::NegativeFeedback);
        assert_eq!(classify_regime(0.0), Regime::Free);
        assert_eq!(classify_regime(0.5), Regime::CoherenceExtension);
        assert_eq!(classify_regime(1.0), Regime::Threshold);
        assert_eq!(classify_regime(1.2), Regime::Maser);
    }

    #[test]
    fn amplification_examples() {
        let p = baseline();
        assert_relative_eq!(p.amplification_slope(), 15.34, max_relative = 1e-12);
        assert_relative_eq!(p.b_max, 2.30e-6, max_relative = 2e-3);
        let eta = amplification_factor(&p, 163.0).unwrap();
        assert!((eta - 2500.0).abs() / 2500.0 < 1e-3, "{eta}");
        let eta300 = amplification_factor(&p, 300.0).unwrap();
        assert_relative_eq!(eta300, 4602.0, max_relative = 1e-4);
        let independent = 65e-9 / 13.8e-12;
        assert!((eta300 - independent).abs() / independent < 0.03);
        let eta0 = amplification_factor(&p, p.t2_intrinsic).unwrap();
        assert_relative_eq!(eta0, 475.54, max_relative = 1e-4);
        assert!(amplification_factor(&p, 0.0).is_err());
    }

    #[test]
    fn shift_examples() {
        assert_eq!(
            resonance_shift(&FeedbackConfig::with_shift_slope(0.0, -0.46)),
            0.0
        );
        assert_relative_eq!(
            resonance_shift(&FeedbackConfig::with_shift_slope(0.01, -0.46)),
            -0.0046,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            resonance_shift(&FeedbackConfig::with_shift_slope(-0.03, -0.46)),
            0.0138,
            max_relative = 1e-12
        );
    }

    #[test]
    fn larmor_examples() {
        let p = baseline();
        let f900 = larmor_frequency(&p.with_b0(900e-9).unwrap());
        assert_relative_eq!(f900, 10.5993, max_relative = 1e-4);
        assert!((f900 - 10.7).abs() / 10.7 < 0.01);
        let f850 = larmor_frequency(&p.with_b0(850e-9).unwrap());
        assert!((f850 - 10.03).abs() / 10.03 < 0.01);
        assert_eq!(larmor_frequency(&p.with_b0(0.0).unwrap()), 0.0);
    }

    #[test]
    fn steady_state_lineshape() {
        let p = baseline();
        let fb = FeedbackConfig::for_coherence_time(&p, 163.0, 2.0 * PI * -0.46).unwrap();
        let f_res = resonance_frequency(&p, &fb);
        let b_ac = 13.8e-12;
        let on =
            steady_state_response(&p, &fb, &DriveField::new(b_ac, f_res, 0.0).unwrap()).unwrap();
        let eta = amplification_factor(&p, 163.0).unwrap();
        assert_relative_eq!(p.b_max * on.norm() / b_ac, eta, max_relative = 1e-12);

        let hw = 1.0 / (2.0 * PI * 163.0);
        let off = steady_state_response(&p, &fb, &DriveField::new(b_ac, f_res + hw, 0.0).unwrap())
            .unwrap();
        assert_relative_eq!(off.norm(), on.norm() / 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn parameter_validation() {
        assert!(SystemParams::new(XE129_GAMMA_CYC, -1.0, 1000.0, 1e-6, 0.2, 0.0).is_err());
        assert!(SystemParams::new(XE129_GAMMA_CYC, 31.0, 10.0, 1e-6, 0.2, 0.0).is_err());
        assert!(SystemParams::new(XE129_GAMMA_CYC, 31.0, 100.0, 1e-6, 1.2, 0.0).is_err());
        assert!(SystemParams::new(XE129_GAMMA_CYC, 31.0, 100.0, 0.0, 0.2, 0.0).is_err());
        assert!(SystemParams::new(XE129_GAMMA_CYC, 31.0, f64::INFINITY, 1e-6, 0.2, 0.0).is_ok());
        assert!(DriveField::new(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn chi_gains_round_trip() {
        let p = baseline();
        let fb = FeedbackConfig::with_shift_slope(0.01, -0.46);
        let chi1 = fb.chi1(&p, 0.18).unwrap();
        assert_relative_eq!(p.gamma * chi1 * 0.18, fb.xi, max_relative = 1e-14);
        let chi2 = fb.chi2(&p, 0.18).unwrap();
        assert_relative_eq!(
            p.gamma.abs() * chi2 * 0.18,
            fb.delta_fb,
            max_relative = 1e-14
        );
        assert!(fb.chi1(&p, 0.0).is_err());
        assert_eq!(fb.delta_fb, fb.shift_ratio * fb.xi);
    }
}
