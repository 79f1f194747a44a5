//! Explicit Runge–Kutta steppers for the three-component Bloch system.

use crate::model::{BlochSystem, SpinState};

/// One classical fourth-order step with the external field held at the
/// values `by0`, `by_mid`, `by1` at the start, midpoint and end of the step.
#[inline]
pub(crate) fn rk4_step(
    sys: &BlochSystem,
    y: &SpinState,
    h: f64,
    by0: f64,
    by_mid: f64,
    by1: f64,
) -> SpinState {
    let k1 = sys.rhs(y, by0);
    let k2 = sys.rhs(&y.axpy(0.5 * h, &k1), by_mid);
    let k3 = sys.rhs(&y.axpy(0.5 * h, &k2), by_mid);
    let k4 = sys.rhs(&y.axpy(h, &k3), by1);
    SpinState::new(
        y.px + h / 6.0 * (k1.px + 2.0 * k2.px + 2.0 * k3.px + k4.px),
        y.py + h / 6.0 * (k1.py + 2.0 * k2.py + 2.0 * k3.py + k4.py),
        y.pz + h / 6.0 * (k1.pz + 2.0 * k2.pz + 2.0 * k3.pz + k4.pz),
    )
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;

const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;

// b - b*, the embedded error weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand–Prince integrator state. The first-same-as-last stage is
/// cached between accepted steps.
pub(crate) struct DormandPrince<'a, F: Fn(f64) -> f64> {
    sys: &'a BlochSystem,
    field: F,
    rtol: f64,
    atol: f64,
    max_step: f64,
    h: f64,
    fsal: Option<SpinState>,
    pub(crate) steps: usize,
    pub(crate) rejected: usize,
}

pub(crate) enum StepFailure {
    StepTooSmall(f64),
    NonFinite,
}

impl<'a, F: Fn(f64) -> f64> DormandPrince<'a, F> {
    pub(crate) fn new(sys: &'a BlochSystem, field: F, rtol: f64, atol: f64, max_step: f64) -> Self {
        DormandPrince {
            sys,
            field,
            rtol,
            atol,
            max_step,
            h: 0.0,
            fsal: None,
            steps: 0,
            rejected: 0,
        }
    }

    fn initial_step(&self, t: f64, y: &SpinState, f0: &SpinState) -> f64 {
        let scale = |v: f64| self.atol + self.rtol * v.abs();
        let d0 = rms3(y.px / scale(y.px), y.py / scale(y.py), y.pz / scale(y.pz));
        let d1 = rms3(
            f0.px / scale(y.px),
            f0.py / scale(y.py),
            f0.pz / scale(y.pz),
        );
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let y1 = y.axpy(h0, f0);
        let f1 = self.sys.rhs(&y1, (self.field)(t + h0));
        let d2 = rms3(
            (f1.px - f0.px) / scale(y.px),
            (f1.py - f0.py) / scale(y.py),
            (f1.pz - f0.pz) / scale(y.pz),
        ) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.max_step)
    }

    /// Advances `y` from `t` to exactly `t_end`.
    pub(crate) fn advance(
        &mut self,
        t: f64,
        y: &mut SpinState,
        t_end: f64,
    ) -> Result<(), StepFailure> {
        let mut t = t;
        if self.fsal.is_none() {
            let f0 = self.sys.rhs(y, (self.field)(t));
            self.h = self.initial_step(t, y, &f0);
            self.fsal = Some(f0);
        }
        while t < t_end {
            let remaining = t_end - t;
            let mut h = self.h.min(self.max_step);
            // stretch by up to 1% rather than leave a sliver before t_end
            let last = 1.01 * h >= remaining;
            if last {
                h = remaining;
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(StepFailure::StepTooSmall(h));
            }
            let k1 = self.fsal.expect("initialized above");
            let sys = self.sys;
            let f = &self.field;
            let k2 = sys.rhs(&y.axpy(h * A21, &k1), f(t + C2 * h));
            let y3 = SpinState::new(
                y.px + h * (A31 * k1.px + A32 * k2.px),
                y.py + h * (A31 * k1.py + A32 * k2.py),
                y.pz + h * (A31 * k1.pz + A32 * k2.pz),
            );
            let k3 = sys.rhs(&y3, f(t + C3 * h));
            let y4 = SpinState::new(
                y.px + h * (A41 * k1.px + A42 * k2.px + A43 * k3.px),
                y.py + h * (A41 * k1.py + A42 * k2.py + A43 * k3.py),
                y.pz + h * (A41 * k1.pz + A42 * k2.pz + A43 * k3.pz),
            );
            let k4 = sys.rhs(&y4, f(t + C4 * h));
            let y5 = SpinState::new(
                y.px + h * (A51 * k1.px + A52 * k2.px + A53 * k3.px + A54 * k4.px),
                y.py + h * (A51 * k1.py + A52 * k2.py + A53 * k3.py + A54 * k4.py),
                y.pz + h * (A51 * k1.pz + A52 * k2.pz + A53 * k3.pz + A54 * k4.pz),
            );
            let k5 = sys.rhs(&y5, f(t + C5 * h));
            let y6 = SpinState::new(
                y.px + h * (A61 * k1.px + A62 * k2.px + A63 * k3.px + A64 * k4.px + A65 * k5.px),
                y.py + h * (A61 * k1.py + A62 * k2.py + A63 * k3.py + A64 * k4.py + A65 * k5.py),
                y.pz + h * (A61 * k1.pz + A62 * k2.pz + A63 * k3.pz + A64 * k4.pz + A65 * k5.pz),
            );
            let t_new = if last { t_end } else { t + h };
            let k6 = sys.rhs(&y6, f(t + h));
            let y_new = SpinState::new(
                y.px + h * (B1 * k1.px + B3 * k3.px + B4 * k4.px + B5 * k5.px + B6 * k6.px),
                y.py + h * (B1 * k1.py + B3 * k3.py + B4 * k4.py + B5 * k5.py + B6 * k6.py),
                y.pz + h * (B1 * k1.pz + B3 * k3.pz + B4 * k4.pz + B5 * k5.pz + B6 * k6.pz),
            );
            let k7 = sys.rhs(&y_new, f(t_new));
            if !y_new.is_finite() {
                return Err(StepFailure::NonFinite);
            }
            let err = |e1: f64, e3: f64, e4: f64, e5: f64, e6: f64, e7: f64, a: f64, b: f64| {
                let e = h * (E1 * e1 + E3 * e3 + E4 * e4 + E5 * e5 + E6 * e6 + E7 * e7);
                e / (self.atol + self.rtol * a.abs().max(b.abs()))
            };
            let norm = rms3(
                err(k1.px, k3.px, k4.px, k5.px, k6.px, k7.px, y.px, y_new.px),
                err(k1.py, k3.py, k4.py, k5.py, k6.py, k7.py, y.py, y_new.py),
                err(k1.pz, k3.pz, k4.pz, k5.pz, k6.pz, k7.pz, y.pz, y_new.pz),
            );
            if norm <= 1.0 {
                t = t_new;
                *y = y_new;
                self.fsal = Some(k7);
                self.steps += 1;
                let factor = if norm == 0.0 {
                    5.0
                } else {
                    (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
                };
                // a truncated final step says nothing about the natural step size
                if !last {
                    self.h = h * factor;
                } else {
                    self.h = self.h.max(h * factor);
                }
            } else {
                self.rejected += 1;
                self.h = h * (0.9 * norm.powf(-0.2)).clamp(0.1, 1.0);
            }
        }
        Ok(())
    }
}

#[inline]
fn rms3(a: f64, b: f64, c: f64) -> f64 {
    ((a * a + b * b + c * c) / 3.0).sqrt()
}
