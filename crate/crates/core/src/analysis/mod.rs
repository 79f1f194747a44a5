//! Reductions applied to simulated records: curve fits for coherence time,
//! resonance lineshape, shift slope and sensitivity model, and Welch spectra.

mod fits;
mod lsq;
mod spectral;

use serde::{Deserialize, Serialize};

pub use fits::{
    fit_decaying_sinusoid, fit_inverse, fit_linear, fit_lorentzian, fit_sensitivity_model,
    lorentzian_amplitude, DecayFitOptions,
};
pub use lsq::LsqOptions;
pub use spectral::{
    dominant_frequency, lock_in, welch_psd, Psd, WelchAccumulator, WelchConfig, Window,
};

/// Outcome of one fit. Parameters are addressed by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub names: Vec<String>,
    pub parameters: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.parameters[i])
    }

    pub fn stderr(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.standard_errors[i])
    }

    /// Value of a parameter this fit is known to produce.
    pub fn value(&self, name: &str) -> f64 {
        self.get(name)
            .unwrap_or_else(|| panic!("fit `{}` has no parameter `{name}`", self.model))
    }

    pub fn low_snr(&self) -> bool {
        self.warnings.iter().any(|w| w.starts_with("low-snr"))
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit results serialize")
    }
}
