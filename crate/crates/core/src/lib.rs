//! Simulation and analysis toolkit for a feedback-coupled ("cooperative")
//! noble-gas spin amplifier read out by an embedded alkali magnetometer.
//!
//! * [`model`]: closed-form physics (Bloch right-hand side, coherence time,
//!   cooperativity, amplification, resonance shift).
//! * [`dynamics`]: time-domain integration, including maser runs and noise.
//! * [`sensing`]: magnetometer model, transfer function, input-referred
//!   sensitivity.
//! * [`analysis`]: fitters and Welch spectra used to reduce simulated data.

// `!(x > 0.0)` guards are deliberate: they reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod error;
mod integrate;
pub mod model;
pub mod sensing;

pub use error::{Error, Result};
