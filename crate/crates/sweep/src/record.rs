//! One row of a sweep result table and its CSV/JSON encodings.

use std::io::Write;

use serde::Serialize;

use coopspin_core::model::Regime;

/// Column order of the CSV table.
pub const COLUMNS: [&str; 17] = [
    "axis",
    "swept",
    "regime",
    "cooperativity",
    "t_eff",
    "eta",
    "larmor_hz",
    "center_hz",
    "fwhm_hz",
    "shift_hz",
    "rate",
    "sensitivity",
    "converged",
    "residual_rms",
    "seed",
    "config_hash",
    "note",
];

/// Derived scalars for one grid point. Quantities a given experiment does
/// not measure stay `None` and are written as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub axis: String,
    pub swept: f64,
    pub regime: Regime,
    pub cooperativity: f64,
    /// s
    pub t_eff: Option<f64>,
    pub eta: Option<f64>,
    pub larmor_hz: f64,
    pub center_hz: Option<f64>,
    pub fwhm_hz: Option<f64>,
    pub shift_hz: Option<f64>,
    /// Measured net growth rate of the transverse envelope, s⁻¹; negative
    /// while decaying.
    pub rate: Option<f64>,
    /// Input-referred resonance sensitivity, T/√Hz.
    pub sensitivity: Option<f64>,
    pub converged: bool,
    pub residual_rms: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub note: String,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl SweepRecord {
    fn cells(&self) -> [String; 17] {
        [
            self.axis.clone(),
            format!("{:e}", self.swept),
            self.regime.as_str().to_string(),
            format!("{:e}", self.cooperativity),
            cell(self.t_eff),
            cell(self.eta),
            format!("{:e}", self.larmor_hz),
            cell(self.center_hz),
            cell(self.fwhm_hz),
            cell(self.shift_hz),
            cell(self.rate),
            cell(self.sensitivity),
            self.converged.to_string(),
            cell(self.residual_rms),
            self.seed.to_string(),
            self.config_hash.clone(),
            self.note.clone(),
        ]
    }
}

/// Writes rows as CSV with the header [`COLUMNS`]. Floats use Rust's
/// shortest round-trip scientific notation.
pub fn write_csv<W: Write>(rows: &[SweepRecord], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COLUMNS)?;
    for r in rows {
        out.write_record(r.cells())?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_json(rows: &[SweepRecord]) -> String {
    serde_json::to_string_pretty(rows).expect("records serialize")
}
