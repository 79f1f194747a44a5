//! Welch spectral density estimation and small spectral helpers.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            // periodic Hann, so 50 % overlapped windows sum to a constant
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    /// Samples per segment.
    pub segment_len: usize,
    /// Fractional overlap in [0, 1).
    pub overlap: f64,
    pub window: Window,
}

impl WelchConfig {
    pub fn new(segment_len: usize, overlap: f64, window: Window) -> Result<Self> {
        let cfg = WelchConfig {
            segment_len,
            overlap,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Segments of `8 / linewidth` seconds, 50 % overlap, Hann window.
    pub fn for_linewidth(linewidth_hz: f64, sample_rate: f64) -> Result<Self> {
        if !(linewidth_hz > 0.0 && sample_rate > 0.0) {
            return Err(Error::Config(
                "linewidth and sample rate must be > 0".into(),
            ));
        }
        let len = (8.0 / linewidth_hz * sample_rate).round() as usize;
        WelchConfig::new(len.max(2), 0.5, Window::Hann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len < 2 {
            return Err(Error::Config(
                "welch segment must hold at least 2 samples".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("welch overlap must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        ((self.segment_len as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    /// Number of segments that fit in `n` samples.
    pub fn segments_in(&self, n: usize) -> usize {
        if n < self.segment_len {
            0
        } else {
            1 + (n - self.segment_len) / self.hop()
        }
    }

    /// Samples needed for `segments` segments.
    pub fn samples_for(&self, segments: usize) -> usize {
        self.segment_len + segments.saturating_sub(1) * self.hop()
    }
}

/// One-sided spectral density estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub frequencies: Vec<f64>,
    /// Power spectral density, unit²/Hz.
    pub power: Vec<f64>,
    /// Bin spacing, Hz.
    pub resolution: f64,
    pub segments: usize,
}

impl Psd {
    /// Amplitude spectral density, unit/√Hz.
    pub fn amplitude(&self) -> Vec<f64> {
        self.power.iter().map(|p| p.sqrt()).collect()
    }

    /// ∫ PSD df, which equals the (window-weighted) mean square of the record.
    pub fn integrated_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.resolution
    }

    /// ∫ PSD df over bins whose frequency lies in `[lo, hi]`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.power)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, p)| p)
            .sum::<f64>()
            * self.resolution
    }
}

/// Streaming Welch estimator: feed samples one at a time, segments are
/// transformed as soon as they are complete.
pub struct WelchAccumulator {
    cfg: WelchConfig,
    sample_rate: f64,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<f64>,
    scratch: Vec<Complex64>,
    sum: Vec<f64>,
    segments: usize,
}

impl WelchAccumulator {
    pub fn new(cfg: WelchConfig, sample_rate: f64) -> Result<Self> {
        cfg.validate()?;
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Config("sample rate must be > 0".into()));
        }
        let n = cfg.segment_len;
        let window = cfg.window.coefficients(n);
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(WelchAccumulator {
            cfg,
            sample_rate,
            window,
            window_power,
            fft,
            buffer: Vec::with_capacity(n),
            scratch: vec![Complex64::new(0.0, 0.0); n],
            sum: vec![0.0; n / 2 + 1],
            segments: 0,
        })
    }

    pub fn push(&mut self, x: f64) {
        self.buffer.push(x);
        if self.buffer.len() == self.cfg.segment_len {
            self.process();
            let hop = self.cfg.hop().min(self.buffer.len());
            self.buffer.drain(..hop);
        }
    }

    pub fn extend(&mut self, xs: &[f64]) {
        for &x in xs {
            self.push(x);
        }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    fn process(&mut self) {
        for ((c, x), w) in self.scratch.iter_mut().zip(&self.buffer).zip(&self.window) {
            *c = Complex64::new(x * w, 0.0);
        }
        self.fft.process(&mut self.scratch);
        for (s, c) in self.sum.iter_mut().zip(&self.scratch) {
            *s += c.norm_sqr();
        }
        self.segments += 1;
    }

    pub fn finish(self) -> Result<Psd> {
        if self.segments == 0 {
            return Err(Error::Config(format!(
                "segment of {} samples is longer than the record",
                self.cfg.segment_len
            )));
        }
        let n = self.cfg.segment_len;
        let fs = self.sample_rate;
        let norm = 1.0 / (fs * self.window_power * self.segments as f64);
        let nyquist_bin = n.is_multiple_of(2).then_some(n / 2);
        let power = self
            .sum
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let one_sided = if k == 0 || Some(k) == nyquist_bin {
                    1.0
                } else {
                    2.0
                };
                one_sided * s * norm
            })
            .collect();
        Ok(Psd {
            frequencies: (0..=n / 2).map(|k| k as f64 * fs / n as f64).collect(),
            power,
            resolution: fs / n as f64,
            segments: self.segments,
        })
    }
}

/// Welch estimate of the one-sided spectral density of `x` sampled at
/// `sample_rate`. Needs at least two segments.
pub fn welch_psd(x: &[f64], sample_rate: f64, cfg: &WelchConfig) -> Result<Psd> {
    cfg.validate()?;
    if cfg.segment_len > x.len() {
        return Err(Error::Config(format!(
            "segment of {} samples is longer than the record ({} samples)",
            cfg.segment_len,
            x.len()
        )));
    }
    if cfg.segments_in(x.len()) < 2 {
        return Err(Error::InsufficientData(
            "record holds fewer than 2 welch segments".into(),
        ));
    }
    let mut acc = WelchAccumulator::new(*cfg, sample_rate)?;
    acc.extend(x);
    acc.finish()
}

/// Frequency of the strongest spectral line: argmax of a zero-padded Hann
/// periodogram, refined by a parabola through the log-power of the peak bin
/// and its two neighbours.
pub fn dominant_frequency(x: &[f64], sample_rate: f64) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::InsufficientData("need at least 4 samples".into()));
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let padded = (4 * n).next_power_of_two();
    let window = Window::Hann.coefficients(n);
    let mut buf: Vec<Complex64> = x
        .iter()
        .zip(&window)
        .map(|(v, w)| Complex64::new((v - mean) * w, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(padded)
        .collect();
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let power: Vec<f64> = buf[..=padded / 2].iter().map(|c| c.norm_sqr()).collect();
    let (k, peak) =
        power.iter().enumerate().skip(1).fold(
            (1, f64::MIN),
            |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc },
        );
    if !(peak > 0.0) {
        return Err(Error::InsufficientData(
            "record has no oscillating component".into(),
        ));
    }
    let bin = sample_rate / padded as f64;
    if k + 1 >= power.len() {
        return Ok(k as f64 * bin);
    }
    let (a, b, c) = (power[k - 1].ln(), peak.ln(), power[k + 1].ln());
    let denom = a - 2.0 * b + c;
    let offset = if denom.is_finite() && denom < 0.0 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok((k as f64 + offset) * bin)
}

/// Complex amplitude of the component of `x` at `frequency`, by synchronous
/// demodulation: `(2/N)·Σ x(t)·exp(−i2πft)`. For `x = A·cos(2πft + φ)` over an
/// integer number of cycles this returns `A·e^{iφ}`.
pub fn lock_in(x: &[f64], t0: f64, dt: f64, frequency: f64) -> Complex64 {
    if x.is_empty() {
        return Complex64::new(0.0, 0.0);
    }
    let w = 2.0 * PI * frequency;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let phase = w * (t0 + i as f64 * dt);
        re += v * phase.cos();
        im -= v * phase.sin();
    }
    Complex64::new(re, im) * (2.0 / x.len() as f64)
}
