//! Power spectra and FFT-domain band-stop filtering.
//!
//! Filtering masks DFT bins of the full-length transform (no padding) and
//! inverts, so the result is zero-phase and exactly linear. The mask is
//! symmetric in `k ↔ D−k`, which keeps the inverse transform real.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::TimeSeriesPanel;

pub const NYQUIST: f64 = 0.5;

/// Largest tolerated imaginary part after the inverse transform, relative to
/// the input scale.
const IMAG_RESIDUE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopBand {
    pub low_edge: f64,
    pub center: f64,
    pub high_edge: f64,
}

impl StopBand {
    pub fn new(low_edge: f64, center: f64, high_edge: f64) -> Result<Self> {
        let band = Self {
            low_edge,
            center,
            high_edge,
        };
        band.validate()?;
        Ok(band)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.low_edge.is_finite()
            && self.high_edge.is_finite()
            && 0.0 < self.low_edge
            && self.low_edge < self.center
            && self.center < self.high_edge
            && self.high_edge < NYQUIST;
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!(
                "band {self} violates 0 < low < center < high < {NYQUIST}"
            )))
        }
    }

    pub fn contains(&self, f: f64) -> bool {
        self.low_edge <= f && f <= self.high_edge
    }

    pub fn width(&self) -> f64 {
        self.high_edge - self.low_edge
    }
}

impl fmt::Display for StopBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.low_edge, self.center, self.high_edge)
    }
}

/// Parses `low:center:high` in cycles/day.
impl FromStr for StopBand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Spec(format!("expected low:center:high, got `{s}`")));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::Spec(format!("`{p}` is not a frequency")))?;
        }
        StopBand::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    HardZero,
    /// Raised-cosine ramps at both band edges, each `taper_fraction / 2` of the
    /// band width. The middle of the band is still zeroed.
    CosineTaper { taper_fraction: f64 },
}

pub const DEFAULT_TAPER_FRACTION: f64 = 0.1;

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterMode::HardZero => f.write_str("hard_zero"),
            FilterMode::CosineTaper { taper_fraction } => {
                write!(f, "cosine_taper:{taper_fraction}")
            }
        }
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "hard_zero" {
            return Ok(FilterMode::HardZero);
        }
        let fraction = match s.strip_prefix("cosine_taper") {
            Some("") => DEFAULT_TAPER_FRACTION,
            Some(rest) => rest
                .strip_prefix(':')
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Spec(format!("bad taper fraction in `{s}`")))?,
            None => return Err(Error::Spec(format!("unknown filter mode `{s}`"))),
        };
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Spec(format!(
                "taper fraction {fraction} outside [0, 1]"
            )));
        }
        Ok(FilterMode::CosineTaper {
            taper_fraction: fraction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFilterSpec {
    bands: Vec<StopBand>,
    mode: FilterMode,
}

impl SpectralFilterSpec {
    /// Bands are sorted by center and must not overlap.
    pub fn new(mut bands: Vec<StopBand>, mode: FilterMode) -> Result<Self> {
        for b in &bands {
            b.validate()?;
        }
        if let FilterMode::CosineTaper { taper_fraction } = mode {
            if !(0.0..=1.0).contains(&taper_fraction) {
                return Err(Error::Spec(format!(
                    "taper fraction {taper_fraction} outside [0, 1]"
                )));
            }
        }
        bands.sort_by(|a, b| a.center.total_cmp(&b.center));
        for w in bands.windows(2) {
            if w[1].low_edge <= w[0].high_edge {
                return Err(Error::Spec(format!("bands {} and {} overlap", w[0], w[1])));
            }
        }
        Ok(Self { bands, mode })
    }

    pub fn bands(&self) -> &[StopBand] {
        &self.bands
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn with_mode(&self, mode: FilterMode) -> Result<Self> {
        Self::new(self.bands.clone(), mode)
    }

    /// Multiplicative gain applied to a bin at frequency `f` (cycles/day, ≥ 0).
    pub fn gain(&self, f: f64) -> f64 {
        let Some(band) = self.bands.iter().find(|b| b.contains(f)) else {
            return 1.0;
        };
        match self.mode {
            FilterMode::HardZero => 0.0,
            FilterMode::CosineTaper { taper_fraction } => {
                let ramp = taper_fraction * band.width() / 2.0;
                let from_edge = (f - band.low_edge).min(band.high_edge - f);
                if ramp > 0.0 && from_edge < ramp {
                    0.5 * (1.0 + (std::f64::consts::PI * from_edge / ramp).cos())
                } else {
                    0.0
                }
            }
        }
    }

    pub fn in_stop_band(&self, f: f64) -> bool {
        self.bands.iter().any(|b| b.contains(f))
    }
}

/// The weekly reporting cycle and its two harmonics, with asymmetric edges
/// given as period reciprocals.
pub fn default_covid_bands() -> SpectralFilterSpec {
    let bands = vec![
        StopBand {
            low_edge: 1.0 / 7.6,
            center: 0.142_997_06,
            high_edge: 1.0 / 6.35,
        },
        StopBand {
            low_edge: 1.0 / 3.7,
            center: 0.285_994_12,
            high_edge: 1.0 / 3.29,
        },
        StopBand {
            low_edge: 1.0 / 2.371,
            center: 0.428_991_19,
            high_edge: 1.0 / 2.3,
        },
    ];
    SpectralFilterSpec::new(bands, FilterMode::HardZero).expect("built-in bands are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    /// Cycles/day, `k / D` for `k = 0..=D/2`.
    pub frequencies: Vec<f64>,
    /// One-sided squared amplitude; a unit sinusoid exactly on a bin has power 1.
    pub power: Vec<f64>,
}

impl PowerSpectrum {
    /// Index of the largest non-DC bin.
    pub fn peak_bin(&self) -> usize {
        (1..self.power.len())
            .max_by(|&a, &b| self.power[a].total_cmp(&self.power[b]))
            .unwrap_or(0)
    }
}

fn check_series(series: &[f64]) -> Result<()> {
    if series.len() < 4 {
        return Err(Error::Shape(format!(
            "series of length {} is too short (need ≥ 4)",
            series.len()
        )));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value at index {i}")));
    }
    Ok(())
}

fn forward(series: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    buf
}

/// One-sided spectrum of the mean-removed series.
pub fn power_spectrum(series: &[f64]) -> Result<PowerSpectrum> {
    check_series(series)?;
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let spectrum = forward(&centered);
    let half = n / 2;
    let nf = n as f64;
    let (frequencies, power) = (0..=half)
        .map(|k| {
            let scale = if k == 0 || (n.is_multiple_of(2) && k == half) {
                1.0
            } else {
                2.0
            };
            let amp = scale * spectrum[k].norm() / nf;
            (k as f64 / nf, amp * amp)
        })
        .unzip();
    Ok(PowerSpectrum { frequencies, power })
}

/// Frequency (cycles/day, in `[0, 0.5]`) of DFT bin `k` of a length-`n` transform.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    k.min(n - k) as f64 / n as f64
}

pub fn band_stop(series: &[f64], spec: &SpectralFilterSpec) -> Result<Vec<f64>> {
    check_series(series)?;
    for b in spec.bands() {
        b.validate()?;
    }
    let n = series.len();
    let mut buf = forward(series);
    for (k, c) in buf.iter_mut().enumerate() {
        let g = spec.gain(bin_frequency(k, n));
        if g != 1.0 {
            *c *= g;
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);

    let nf = n as f64;
    let scale = series.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let residue = buf.iter().fold(0.0_f64, |m, c| m.max(c.im.abs())) / nf;
    if residue > IMAG_RESIDUE_TOL * scale {
        return Err(Error::Numeric(format!(
            "imaginary residue {residue:e} after inverse transform"
        )));
    }
    Ok(buf.into_iter().map(|c| c.re / nf).collect())
}

/// Applies [`band_stop`] to every region independently.
pub fn filter_panel(panel: &TimeSeriesPanel, spec: &SpectralFilterSpec) -> Result<TimeSeriesPanel> {
    let values = panel
        .values()
        .par_iter()
        .map(|s| band_stop(s, spec))
        .collect::<Result<Vec<_>>>()?;
    panel.with_values(values)
}
