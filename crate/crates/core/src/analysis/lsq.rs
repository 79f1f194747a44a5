//! Damped Gauss–Newton (Levenberg–Marquardt) for small dense problems with
//! numeric central-difference Jacobians.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Tolerances shared by all nonlinear fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqOptions {
    /// Converged once every relative parameter step is below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Central-difference step, relative to max(|p|, scale).
    pub jacobian_step: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        LsqOptions {
            tolerance: 1e-8,
            max_iterations: 200,
            jacobian_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LsqOutcome {
    pub params: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimizes Σ (y_i − model(x_i, p))² over the parameters not marked fixed.
///
/// `scales` sets the magnitude below which a parameter is treated as zero
/// for step sizes and convergence tests.
pub(crate) fn levenberg_marquardt<M>(
    model: M,
    xs: &[f64],
    ys: &[f64],
    initial: &[f64],
    scales: &[f64],
    fixed: &[bool],
    opts: &LsqOptions,
) -> LsqOutcome
where
    M: Fn(f64, &[f64]) -> f64,
{
    let n = xs.len();
    let free: Vec<usize> = (0..initial.len()).filter(|&j| !fixed[j]).collect();
    let m = free.len();
    let mut p = initial.to_vec();
    let ssr_of = |p: &[f64]| -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let r = y - model(x, p);
                r * r
            })
            .sum()
    };
    let mut ssr = ssr_of(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    let normal_equations = |p: &[f64]| -> (DMatrix<f64>, DVector<f64>) {
        let mut jtj = DMatrix::<f64>::zeros(m, m);
        let mut jtr = DVector::<f64>::zeros(m);
        let steps: Vec<f64> = free
            .iter()
            .map(|&j| opts.jacobian_step * p[j].abs().max(scales[j]))
            .collect();
        let mut q = p.to_vec();
        let mut row = vec![0.0; m];
        for (&x, &y) in xs.iter().zip(ys) {
            let r = y - model(x, p);
            for (k, &j) in free.iter().enumerate() {
                let h = steps[k];
                q[j] = p[j] + h;
                let up = model(x, &q);
                q[j] = p[j] - h;
                let down = model(x, &q);
                q[j] = p[j];
                row[k] = (up - down) / (2.0 * h);
            }
            for a in 0..m {
                jtr[a] += row[a] * r;
                for b in a..m {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        (jtj, jtr)
    };

    if m > 0 {
        'outer: while iterations < opts.max_iterations {
            iterations += 1;
            let (jtj, jtr) = normal_equations(&p);
            loop {
                let mut damped = jtj.clone();
                for a in 0..m {
                    damped[(a, a)] += lambda * jtj[(a, a)].max(1e-300);
                }
                let delta = match damped.clone().cholesky() {
                    Some(ch) => ch.solve(&jtr),
                    None => match damped.lu().solve(&jtr) {
                        Some(d) => d,
                        None => {
                            lambda *= 10.0;
                            if lambda > 1e16 {
                                break 'outer;
                            }
                            continue;
                        }
                    },
                };
                let mut trial = p.clone();
                let mut small = true;
                for (k, &j) in free.iter().enumerate() {
                    trial[j] = p[j] + delta[k];
                    if delta[k].abs() > opts.tolerance * p[j].abs().max(scales[j]) {
                        small = false;
                    }
                }
                let trial_ssr = ssr_of(&trial);
                if trial_ssr.is_finite() && trial_ssr <= ssr {
                    p = trial;
                    ssr = trial_ssr;
                    lambda = (lambda / 10.0).max(1e-12);
                    if small {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                if small {
                    // no representable improvement left
                    converged = true;
                    break 'outer;
                }
                lambda *= 10.0;
                if lambda > 1e16 {
                    converged = true;
                    break 'outer;
                }
            }
        }
    } else {
        converged = true;
    }

    let dof = n.saturating_sub(m);
    let residual_rms = (ssr / n.max(1) as f64).sqrt();
    let mut standard_errors = vec![0.0; p.len()];
    if m > 0 && dof > 0 {
        let (jtj, _) = normal_equations(&p);
        let s2 = ssr / dof as f64;
        if let Some(inv) = jtj.try_inverse() {
            for (k, &j) in free.iter().enumerate() {
                standard_errors[j] = (s2 * inv[(k, k)]).max(0.0).sqrt();
            }
        }
    }
    LsqOutcome {
        params: p,
        standard_errors,
        residual_rms,
        converged,
        iterations,
    }
}
