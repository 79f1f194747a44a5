use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::lsq::{levenberg_marquardt, LsqOptions};
use super::spectral::dominant_frequency;
use super::FitResult;
use crate::error::{Error, Result};

const LOW_SNR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecayFitOptions {
    /// Hold the oscillation frequency at this value instead of fitting it.
    pub fixed_frequency: Option<f64>,
    pub lsq: LsqOptions,
}

#[allow(clippy::too_many_arguments)]
fn result(
    model: &str,
    names: &[&str],
    parameters: Vec<f64>,
    standard_errors: Vec<f64>,
    residual_rms: f64,
    converged: bool,
    iterations: usize,
    warnings: Vec<String>,
) -> FitResult {
    FitResult {
        model: model.to_string(),
        names: names.iter().map(|s| s.to_string()).collect(),
        parameters,
        standard_errors,
        residual_rms,
        converged,
        iterations,
        warnings,
    }
}

fn check_finite(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Config(format!(
            "abscissa and ordinate lengths differ ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite data point".into()));
    }
    Ok(())
}

/// Fits `A·exp(−t/τ)·sin(2πft + φ) + offset`.
///
/// The frequency starts at the spectral peak, τ at a regression of the log
/// block-RMS envelope, and (A, φ, offset) at the linear least-squares
/// solution for those two. Parameters: `amplitude, frequency, tau, phase,
/// offset`.
pub fn fit_decaying_sinusoid(t: &[f64], y: &[f64], opts: &DecayFitOptions) -> Result<FitResult> {
    check_finite(t, y)?;
    let n = t.len();
    if n < 16 {
        return Err(Error::InsufficientData("need at least 16 samples".into()));
    }
    let dt = (t[n - 1] - t[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Config("time axis must be increasing".into()));
    }
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::InsufficientData("signal is identically zero".into()));
    }
    let yn: Vec<f64> = y.iter().map(|v| v / scale).collect();

    let frequency = match opts.fixed_frequency {
        Some(f) => f,
        None => dominant_frequency(&yn, 1.0 / dt)?,
    };
    let span = t[n - 1] - t[0];
    let tau = envelope_decay_time(t, &yn, frequency, dt).unwrap_or(10.0 * span);

    let (amplitude, phase, offset) = linear_phase_solve(t, &yn, frequency, tau);
    let initial = [amplitude, frequency, tau, phase, offset];
    let scales = [1.0, frequency.abs().max(1.0 / span), span, 1.0, 1.0];
    let fixed = [false, opts.fixed_frequency.is_some(), false, false, false];
    let model =
        |t: f64, p: &[f64]| p[0] * (-t / p[2]).exp() * (2.0 * PI * p[1] * t + p[3]).sin() + p[4];
    let out = levenberg_marquardt(model, t, &yn, &initial, &scales, &fixed, &opts.lsq);

    let mut p = out.params;
    let mut se = out.standard_errors;
    // canonical form: positive amplitude, phase in (−π, π]
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] += PI;
    }
    p[3] = wrap_phase(p[3]);
    p[0] *= scale;
    p[4] *= scale;
    se[0] *= scale;
    se[4] *= scale;

    let mut warnings = Vec::new();
    let rms = out.residual_rms * scale;
    if p[0] < LOW_SNR * rms {
        warnings.push(format!(
            "low-snr: amplitude/rms residual = {:.3}",
            p[0] / rms
        ));
    }
    if p[1] * span < 10.0 && span < 3.0 * p[2].abs() {
        warnings.push("record shorter than 10 cycles and 3 decay constants".into());
    }
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            residual_rms: rms,
        });
    }
    Ok(result(
        "decaying-sinusoid",
        &["amplitude", "frequency", "tau", "phase", "offset"],
        p,
        se,
        rms,
        out.converged,
        out.iterations,
        warnings,
    ))
}

fn wrap_phase(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// Decay time from a straight-line fit to the log of block-RMS amplitudes.
/// Blocks span an integer number of cycles where possible. Returns `None`
/// for a non-decaying envelope.
fn envelope_decay_time(t: &[f64], y: &[f64], frequency: f64, dt: f64) -> Option<f64> {
    let n = y.len();
    let per_cycle = if frequency > 0.0 {
        1.0 / (frequency * dt)
    } else {
        n as f64
    };
    let cycles = ((n as f64 / 100.0) / per_cycle).round().max(1.0);
    let block = ((cycles * per_cycle).round() as usize).clamp(4, (n / 4).max(4));
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut points: Vec<(f64, f64)> = y
        .chunks_exact(block)
        .enumerate()
        .map(|(i, c)| {
            let ms = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c.len() as f64;
            let center = t[i * block] + 0.5 * (block - 1) as f64 * dt;
            (center, ms.sqrt())
        })
        .collect();
    if points.len() < 2 {
        return None;
    }
    // stop where the envelope reaches the noise floor
    let floor = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let first = points[0].1;
    if first > 4.0 * floor {
        points.retain(|p| p.1 > 2.0 * floor);
    }
    points.retain(|p| p.1 > 0.0);
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ls: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, _) = ols(&xs, &ls)?;
    (slope < 0.0).then(|| -1.0 / slope)
}

/// Linear solve for y ≈ e^{−t/τ}(a·sin ωt + b·cos ωt) + c.
fn linear_phase_solve(t: &[f64], y: &[f64], frequency: f64, tau: f64) -> (f64, f64, f64) {
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for (&ti, &yi) in t.iter().zip(y) {
        let e = (-ti / tau).exp();
        let w = 2.0 * PI * frequency * ti;
        let row = Vector3::new(e * w.sin(), e * w.cos(), 1.0);
        ata += row * row.transpose();
        aty += row * yi;
    }
    match ata.lu().solve(&aty) {
        Some(c) => (c[0].hypot(c[1]), c[1].atan2(c[0]), c[2]),
        None => (1.0, 0.0, 0.0),
    }
}

/// `peak / √(1 + (2(f − center)/fwhm)²) + baseline`: the magnitude of a
/// complex Lorentzian whose power profile has full width `fwhm`.
pub fn lorentzian_amplitude(f: f64, center: f64, fwhm: f64, peak: f64, baseline: f64) -> f64 {
    let x = 2.0 * (f - center) / fwhm;
    peak / (1.0 + x * x).sqrt() + baseline
}

/// Fits [`lorentzian_amplitude`] to a frequency sweep. Parameters:
/// `center, fwhm, peak, baseline`.
pub fn fit_lorentzian(freqs: &[f64], amps: &[f64], lsq: &LsqOptions) -> Result<FitResult> {
    check_finite(freqs, amps)?;
    let (fmin, fmax) = freqs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &f| {
            (a.min(f), b.max(f))
        });
    if !(fmax > fmin) {
        return Err(Error::Config(
            "degenerate sweep: all frequencies identical".into(),
        ));
    }
    if freqs.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "lorentzian fit needs at least 8 points, got {}",
            freqs.len()
        )));
    }
    let names = ["center", "fwhm", "peak", "baseline"];
    let span = fmax - fmin;
    let (amin, amax) = amps
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let scale = amax.abs().max(amin.abs());
    if amax - amin <= 1e-12 * scale || scale == 0.0 {
        let center = 0.5 * (fmin + fmax);
        return Ok(result(
            "lorentzian",
            &names,
            vec![center, span, 0.0, amin],
            vec![0.0; 4],
            0.0,
            true,
            0,
            vec!["low-snr: flat sweep, no resonance".into()],
        ));
    }
    let an: Vec<f64> = amps.iter().map(|a| a / scale).collect();
    let (imax, _) = an.iter().enumerate().fold(
        (0, f64::MIN),
        |acc, (i, &a)| if a > acc.1 { (i, a) } else { acc },
    );
    let base0 = amin / scale;
    let peak0 = amax / scale - base0;
    let level = base0 + peak0 / 2f64.sqrt();
    let above: Vec<f64> = freqs
        .iter()
        .zip(&an)
        .filter(|(_, &a)| a >= level)
        .map(|(&f, _)| f)
        .collect();
    let width0 = match (above.first(), above.last()) {
        (Some(lo), Some(hi)) if hi > lo => hi - lo,
        _ => span / (freqs.len() as f64),
    };
    let initial = [freqs[imax], width0, peak0, base0];
    let scales = [span, span, 1.0, 1.0];
    let model = |f: f64, p: &[f64]| lorentzian_amplitude(f, p[0], p[1], p[2], p[3]);
    let out = levenberg_marquardt(model, freqs, &an, &initial, &scales, &[false; 4], lsq);
    let mut p = out.params;
    let mut se = out.standard_errors;
    p[1] = p[1].abs();
    for i in [2, 3] {
        p[i] *= scale;
        se[i] *= scale;
    }
    let rms = out.residual_rms * scale;
    let mut warnings = Vec::new();
    if p[2].abs() < LOW_SNR * rms {
        warnings.push(format!(
            "low-snr: peak/rms residual = {:.3}",
            p[2].abs() / rms
        ));
    }
    if span < 3.0 * p[1] {
        warnings.push(format!("sweep spans {:.2} linewidths (< 3)", span / p[1]));
    }
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            residual_rms: rms,
        });
    }
    Ok(result(
        "lorentzian",
        &names,
        p,
        se,
        rms,
        true,
        out.iterations,
        warnings,
    ))
}

/// Fits T_eff = 1/(Γ + ξ) to (ξ, T_eff) pairs. Parameter: `gamma` (Γ, s⁻¹).
pub fn fit_inverse(xi: &[f64], t_eff: &[f64], lsq: &LsqOptions) -> Result<FitResult> {
    check_finite(xi, t_eff)?;
    if xi.len() < 2 {
        return Err(Error::InsufficientData(
            "inverse fit needs at least 2 points".into(),
        ));
    }
    if let Some(bad) = t_eff.iter().position(|&t| t <= 0.0) {
        return Err(Error::Regime(format!(
            "point {bad} (ξ = {}) has no coherence time; maser/threshold points cannot enter the fit",
            xi[bad]
        )));
    }
    let mut guesses: Vec<f64> = xi.iter().zip(t_eff).map(|(x, t)| 1.0 / t - x).collect();
    guesses.sort_by(|a, b| a.total_cmp(b));
    let gamma0 = guesses[guesses.len() / 2];
    let model = |x: f64, p: &[f64]| {
        let rate = p[0] + x;
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    };
    let out = levenberg_marquardt(
        model,
        xi,
        t_eff,
        &[gamma0],
        &[gamma0.abs().max(1e-12)],
        &[false],
        lsq,
    );
    let gamma = out.params[0];
    if let Some(bad) = xi.iter().position(|x| gamma + x <= 0.0) {
        return Err(Error::Regime(format!(
            "fitted Γ = {gamma:e} puts point {bad} (ξ = {}) at or above threshold",
            xi[bad]
        )));
    }
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            residual_rms: out.residual_rms,
        });
    }
    Ok(result(
        "inverse",
        &["gamma"],
        out.params,
        out.standard_errors,
        out.residual_rms,
        true,
        out.iterations,
        Vec::new(),
    ))
}

fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Ordinary least-squares line. Parameters: `slope, intercept`.
pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<FitResult> {
    check_finite(x, y)?;
    if x.len() < 2 {
        return Err(Error::InsufficientData(
            "line fit needs at least 2 points".into(),
        ));
    }
    let (slope, intercept) =
        ols(x, y).ok_or_else(|| Error::Rank("all abscissae are identical".into()))?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (slope * a + intercept);
            r * r
        })
        .sum();
    let se = if x.len() > 2 {
        let s2 = ssr / (n - 2.0);
        vec![(s2 / sxx).sqrt(), (s2 * (1.0 / n + mx * mx / sxx)).sqrt()]
    } else {
        vec![0.0, 0.0]
    };
    Ok(result(
        "linear",
        &["slope", "intercept"],
        vec![slope, intercept],
        se,
        (ssr / n).sqrt(),
        true,
        0,
        Vec::new(),
    ))
}

/// Fits s = √((a/T_eff)² + b²) by linear least squares in the squared
/// domain, s² = a²·T_eff⁻² + b², with a², b² clipped at zero (and the other
/// coefficient refitted) when the unconstrained solution is negative.
/// Parameters: `a, b`.
pub fn fit_sensitivity_model(t_eff: &[f64], sensitivity: &[f64]) -> Result<FitResult> {
    check_finite(t_eff, sensitivity)?;
    if t_eff.len() < 2 {
        return Err(Error::InsufficientData(
            "sensitivity fit needs at least 2 points".into(),
        ));
    }
    if t_eff.iter().any(|&t| t <= 0.0) {
        return Err(Error::Config("T_eff values must be > 0".into()));
    }
    let u: Vec<f64> = t_eff.iter().map(|t| 1.0 / (t * t)).collect();
    let v: Vec<f64> = sensitivity.iter().map(|s| s * s).collect();
    let (mut a2, mut b2) = ols(&u, &v).ok_or_else(|| Error::Rank("all T_eff identical".into()))?;
    let mut warnings = Vec::new();
    let n = u.len() as f64;
    if b2 < 0.0 {
        b2 = 0.0;
        a2 = u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>()
            / u.iter().map(|x| x * x).sum::<f64>();
        warnings.push("b² clipped at 0".to_string());
    }
    if a2 < 0.0 {
        a2 = 0.0;
        b2 = (v.iter().sum::<f64>() / n).max(0.0);
        warnings.push("a² clipped at 0".to_string());
    }
    let residuals: Vec<f64> = u.iter().zip(&v).map(|(x, y)| y - (a2 * x + b2)).collect();
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let mu = u.iter().sum::<f64>() / n;
    let suu: f64 = u.iter().map(|x| (x - mu) * (x - mu)).sum();
    let (se_a2, se_b2) = if u.len() > 2 {
        let s2 = ssr / (n - 2.0);
        ((s2 / suu).sqrt(), (s2 * (1.0 / n + mu * mu / suu)).sqrt())
    } else {
        (0.0, 0.0)
    };
    let a = a2.sqrt();
    let b = b2.sqrt();
    // delta method; at the boundary report the error of the squared value's root
    let se = |x: f64, se2: f64| if x > 0.0 { se2 / (2.0 * x) } else { se2.sqrt() };
    let (tmin, tmax) = t_eff
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| {
            (a.min(t), b.max(t))
        });
    if tmax < 3.0 * tmin {
        warnings.push(format!("T_eff spans only {:.2}x (< 3x)", tmax / tmin));
    }
    let rms = sensitivity
        .iter()
        .zip(t_eff)
        .map(|(s, t)| {
            let r = s - ((a / t).powi(2) + b * b).sqrt();
            r * r
        })
        .sum::<f64>()
        / n;
    Ok(result(
        "sensitivity",
        &["a", "b"],
        vec![a, b],
        vec![se(a, se_a2), se(b, se_b2)],
        rms.sqrt(),
        true,
        0,
        warnings,
    ))
}
