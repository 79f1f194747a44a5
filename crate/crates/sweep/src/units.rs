//! Physical quantities in config files.
//!
//! A quantity is either a bare number, taken to be in SI units, or a string
//! `"<number> <unit>"` (the space is optional). Each field accepts only the
//! units of its own dimension.

use std::fmt;
use std::marker::PhantomData;

use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;

/// Physical dimension of a config field and the unit spellings it accepts.
pub trait Dimension {
    /// Used in error messages, e.g. "a magnetic field".
    const WHAT: &'static str;
    const EXAMPLE: &'static str;
    /// SI multiplier for `unit`, or `None` if the unit has another dimension.
    fn scale(unit: &str) -> Option<f64>;
}

fn field_prefix(unit: &str) -> Option<f64> {
    Some(match unit {
        "T" => 1.0,
        "mT" => 1e-3,
        "uT" | "µT" | "μT" => 1e-6,
        "nT" => 1e-9,
        "pT" => 1e-12,
        "fT" => 1e-15,
        "aT" => 1e-18,
        _ => return None,
    })
}

pub enum Field {}
impl Dimension for Field {
    const WHAT: &'static str = "a magnetic field";
    const EXAMPLE: &'static str = "900 nT";
    fn scale(unit: &str) -> Option<f64> {
        field_prefix(unit)
    }
}

pub enum Time {}
impl Dimension for Time {
    const WHAT: &'static str = "a duration";
    const EXAMPLE: &'static str = "31 s";
    fn scale(unit: &str) -> Option<f64> {
        Some(match unit {
            "s" => 1.0,
            "ms" => 1e-3,
            "us" | "µs" | "μs" => 1e-6,
            "min" => 60.0,
            "h" => 3600.0,
            _ => return None,
        })
    }
}

/// A rate in s⁻¹. Hz is deliberately not accepted: feedback rates are not
/// cyclic frequencies.
pub enum Rate {}
impl Dimension for Rate {
    const WHAT: &'static str = "a rate";
    const EXAMPLE: &'static str = "0.006 /s";
    fn scale(unit: &str) -> Option<f64> {
        Some(match unit {
            "/s" | "1/s" | "s^-1" | "s-1" | "s⁻¹" => 1.0,
            "/ms" | "1/ms" | "ms^-1" => 1e3,
            "/min" | "1/min" => 1.0 / 60.0,
            _ => return None,
        })
    }
}

pub enum Frequency {}
impl Dimension for Frequency {
    const WHAT: &'static str = "a frequency";
    const EXAMPLE: &'static str = "10.6 Hz";
    fn scale(unit: &str) -> Option<f64> {
        Some(match unit {
            "Hz" => 1.0,
            "kHz" => 1e3,
            "mHz" => 1e-3,
            "uHz" | "µHz" | "μHz" => 1e-6,
            _ => return None,
        })
    }
}

pub enum Angle {}
impl Dimension for Angle {
    const WHAT: &'static str = "an angle";
    const EXAMPLE: &'static str = "5 deg";
    fn scale(unit: &str) -> Option<f64> {
        Some(match unit {
            "rad" => 1.0,
            "mrad" => 1e-3,
            "deg" | "°" => std::f64::consts::PI / 180.0,
            _ => return None,
        })
    }
}

/// Amplitude spectral density, T/√Hz.
pub enum Density {}
impl Dimension for Density {
    const WHAT: &'static str = "a field noise density";
    const EXAMPLE: &'static str = "7.3 pT/rtHz";
    fn scale(unit: &str) -> Option<f64> {
        let (field, root) = unit.split_once('/')?;
        match root {
            "rtHz" | "√Hz" | "sqrt(Hz)" | "Hz^0.5" | "Hz^1/2" => field_prefix(field),
            _ => None,
        }
    }
}

/// Gyromagnetic ratio in cyclic units, Hz/T.
pub enum Gyromagnetic {}
impl Dimension for Gyromagnetic {
    const WHAT: &'static str = "a gyromagnetic ratio";
    const EXAMPLE: &'static str = "-11.777 Hz/uT";
    fn scale(unit: &str) -> Option<f64> {
        let (freq, field) = unit.split_once('/')?;
        Some(Frequency::scale(freq)? / field_prefix(field)?)
    }
}

/// Number without unit.
pub enum Dimensionless {}
impl Dimension for Dimensionless {
    const WHAT: &'static str = "a plain number";
    const EXAMPLE: &'static str = "0.18";
    fn scale(unit: &str) -> Option<f64> {
        (unit.is_empty()).then_some(1.0)
    }
}

/// Parses `"<number> <unit>"` into SI.
pub fn parse_quantity<D: Dimension>(text: &str) -> Result<f64, String> {
    let text = text.trim();
    // longest leading run that parses as a number, so exponents stay attached
    let (value, unit) = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .rev()
        .find_map(|i| {
            text[..i]
                .trim_end()
                .parse::<f64>()
                .ok()
                .map(|v| (v, &text[i..]))
        })
        .ok_or_else(|| {
            format!(
                "`{text}` does not start with a number; expected {} like \"{}\"",
                D::WHAT,
                D::EXAMPLE
            )
        })?;
    let unit = unit.trim();
    let scale = D::scale(unit).ok_or_else(|| {
        format!(
            "unit `{unit}` in `{text}` is not valid for {}; expected e.g. \"{}\"",
            D::WHAT,
            D::EXAMPLE
        )
    })?;
    let si = value * scale;
    if si.is_finite() {
        Ok(si)
    } else {
        Err(format!("`{text}` is not finite"))
    }
}

/// A config value of dimension `D`, stored in SI.
pub struct Quantity<D>(pub f64, PhantomData<D>);

impl<D> Quantity<D> {
    pub fn si(&self) -> f64 {
        self.0
    }
}

impl<D> Clone for Quantity<D> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<D> Copy for Quantity<D> {}

impl<D> fmt::Debug for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Quantity<D> {
    fn deserialize<De: Deserializer<'de>>(deserializer: De) -> Result<Self, De::Error> {
        struct V<D>(PhantomData<D>);
        impl<D: Dimension> Visitor<'_> for V<D> {
            type Value = Quantity<D>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(
                    f,
                    "{} as a number in SI units or a string like \"{}\"",
                    D::WHAT,
                    D::EXAMPLE
                )
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                if v.is_finite() {
                    Ok(Quantity(v, PhantomData))
                } else {
                    Err(E::custom("value is not finite"))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                Ok(Quantity(v as f64, PhantomData))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(Quantity(v as f64, PhantomData))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                parse_quantity::<D>(v)
                    .map(|x| Quantity(x, PhantomData))
                    .map_err(E::custom)
            }
        }
        deserializer.deserialize_any(V(PhantomData))
    }
}

/// A number or unit string whose dimension is decided later (sweep values,
/// whose dimension follows the sweep axis).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RawQuantity {
    Number(f64),
    Text(String),
}

impl RawQuantity {
    pub fn resolve<D: Dimension>(&self) -> Result<f64, String> {
        match self {
            RawQuantity::Number(v) if v.is_finite() => Ok(*v),
            RawQuantity::Number(_) => Err("value is not finite".into()),
            RawQuantity::Text(t) => parse_quantity::<D>(t),
        }
    }
}
