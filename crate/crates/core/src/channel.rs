//! Link impairments between the transmitter and each detector.
//!
//! All quantities are in normalized field units, so a coherent state's
//! quadrature uncertainty is a variance of 1/4 per quadrature regardless of
//! its power. Each noise source reads its own [`RandomStream`].

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{QepsError, Result};
use crate::iqcore::{db_to_linear, gaussian_draws, IqFrame, RandomStream, SPEED_OF_LIGHT};

/// Per-quadrature variance of vacuum (shot) noise.
pub const VACUUM_QUADRATURE_VARIANCE: f64 = 0.25;

/// Default guard on the tapped power fraction.
pub const DEFAULT_MAX_TAP_RATIO: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserConfig {
    pub power_dbm: f64,
    pub linewidth_hz: f64,
    /// Static phase offset of this oscillator, radians.
    pub static_phase_offset: f64,
}

impl Default for LaserConfig {
    fn default() -> Self {
        LaserConfig {
            power_dbm: 0.0,
            linewidth_hz: 0.1e6,
            static_phase_offset: 0.0,
        }
    }
}

impl LaserConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.linewidth_hz >= 0.0 && self.linewidth_hz.is_finite()) {
            return Err(QepsError::config(format!("{field}.linewidth_hz"), "linewidth must be >= 0"));
        }
        if !self.power_dbm.is_finite() {
            return Err(QepsError::config(format!("{field}.power_dbm"), "power must be finite"));
        }
        if !self.static_phase_offset.is_finite() {
            return Err(QepsError::config(format!("{field}.static_phase_offset"), "offset must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberConfig {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    pub dispersion_ps_nm_km: f64,
    pub wavelength_m: f64,
}

impl Default for FiberConfig {
    fn default() -> Self {
        FiberConfig {
            length_km: 80.0,
            attenuation_db_per_km: 0.2,
            dispersion_ps_nm_km: 16.75,
            wavelength_m: 1550e-9,
        }
    }
}

impl FiberConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fiber.length_km", self.length_km),
            ("fiber.attenuation_db_per_km", self.attenuation_db_per_km),
            ("fiber.dispersion_ps_nm_km", self.dispersion_ps_nm_km),
            ("fiber.wavelength_m", self.wavelength_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(QepsError::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn loss_db(&self) -> f64 {
        self.length_km * self.attenuation_db_per_km
    }

    /// Accumulated dispersion `D L` in s/m.
    fn accumulated_dispersion(&self) -> f64 {
        // ps/(nm km) -> s/m^2
        self.dispersion_ps_nm_km * 1e-6 * self.length_km * 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapConfig {
    pub ratio: f64,
    pub coupling_loss_db: f64,
    pub max_ratio: f64,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig {
            ratio: 0.10,
            coupling_loss_db: 0.0,
            max_ratio: DEFAULT_MAX_TAP_RATIO,
        }
    }
}

impl TapConfig {
    pub fn new(ratio: f64) -> Self {
        TapConfig {
            ratio,
            ..TapConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_ratio) {
            return Err(QepsError::config("tap.max_ratio", "must lie in [0, 1]"));
        }
        if !(0.0..=self.max_ratio).contains(&self.ratio) {
            return Err(QepsError::config(
                "tap.ratio",
                format!("tap ratio {} outside [0, {}]", self.ratio, self.max_ratio),
            ));
        }
        if !(self.coupling_loss_db >= 0.0 && self.coupling_loss_db.is_finite()) {
            return Err(QepsError::config("tap.coupling_loss_db", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-symbol variance of laser phase increments, `2 pi dnu T_s`.
pub fn phase_increment_variance(linewidth_hz: f64, symbol_rate: f64) -> f64 {
    TAU * linewidth_hz / symbol_rate
}

/// Wiener phase walk starting at 0 with Gaussian increments of variance
/// `2 pi dnu T_s`.
pub fn wiener_phase(n: usize, linewidth_hz: f64, symbol_rate: f64, stream: &RandomStream) -> Vec<f64> {
    if n == 0 {
        return vec![];
    }
    let sigma = phase_increment_variance(linewidth_hz, symbol_rate).sqrt();
    let steps = gaussian_draws(stream, n - 1, sigma);
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    out.push(acc);
    for s in steps {
        acc += s;
        out.push(acc);
    }
    out
}

/// Multiplies sample `k` by `exp(j (theta_k + offset))`.
pub fn apply_phase(frame: &IqFrame, theta: &[f64], offset: f64) -> Result<IqFrame> {
    if theta.len() < frame.len() {
        return Err(QepsError::invalid("phase trace shorter than frame"));
    }
    Ok(frame.with_samples(
        frame
            .samples()
            .iter()
            .zip(theta)
            .map(|(s, &t)| s * Complex64::from_polar(1.0, t + offset))
            .collect(),
    ))
}

/// Discrete frequency of FFT bin `k` of an `n`-point transform at `rate`.
fn bin_frequency(k: usize, n: usize, rate: f64) -> f64 {
    let k = k as f64;
    let n_f = n as f64;
    if k < n_f / 2.0 {
        k * rate / n_f
    } else {
        (k - n_f) * rate / n_f
    }
}

/// All-pass dispersion response on the symbol-rate grid. `sign` = +1 for
/// propagation, -1 for compensation.
pub fn dispersion_response(cfg: &FiberConfig, n: usize, symbol_rate: f64, sign: f64) -> Vec<Complex64> {
    let beta = PI * cfg.wavelength_m.powi(2) * cfg.accumulated_dispersion() / SPEED_OF_LIGHT;
    (0..n)
        .map(|k| {
            let f = bin_frequency(k, n, symbol_rate);
            Complex64::from_polar(1.0, sign * beta * f * f)
        })
        .collect()
}

/// Symbols spanned by the dispersion impulse response, `|D L| lambda^2 R^2 / c`.
pub fn dispersion_memory_symbols(cfg: &FiberConfig, symbol_rate: f64) -> f64 {
    (cfg.accumulated_dispersion() * cfg.wavelength_m.powi(2) * symbol_rate.powi(2) / SPEED_OF_LIGHT).abs()
}

/// Circular frequency-domain filtering of a frame.
pub(crate) fn filter_frequency(frame: &IqFrame, response: &[Complex64]) -> IqFrame {
    let n = frame.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = frame.samples().to_vec();
    fwd.process(&mut buf);
    buf.iter_mut().zip(response).for_each(|(x, h)| *x *= h);
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|x| *x *= scale);
    frame.with_samples(buf)
}

/// Attenuation plus chromatic dispersion.
pub fn fiber_propagate(frame: &IqFrame, cfg: &FiberConfig) -> IqFrame {
    if cfg.length_km == 0.0 {
        return frame.clone();
    }
    let amp = 10f64.powf(-cfg.loss_db() / 20.0);
    let dispersed = if cfg.dispersion_ps_nm_km == 0.0 {
        frame.clone()
    } else {
        filter_frequency(frame, &dispersion_response(cfg, frame.len(), frame.symbol_rate(), 1.0))
    };
    dispersed.scaled(amp)
}

/// Passive power split; returns `(to_bob, to_eve)`.
pub fn tap_split(frame: &IqFrame, cfg: &TapConfig) -> Result<(IqFrame, IqFrame)> {
    if !(0.0..=1.0).contains(&cfg.ratio) {
        return Err(QepsError::invalid(format!("tap ratio {} outside [0, 1]", cfg.ratio)));
    }
    let eve_gain = cfg.ratio.sqrt() * 10f64.powf(-cfg.coupling_loss_db / 20.0);
    let bob_gain = (1.0 - cfg.ratio).sqrt();
    Ok((frame.scaled(bob_gain), frame.scaled(eve_gain)))
}

/// Spontaneous emission factor for a noise figure in dB.
pub fn spontaneous_emission_factor(noise_figure_db: f64) -> f64 {
    db_to_linear(noise_figure_db) / 2.0
}

/// Per-quadrature ASE variance, `n_sp (G - 1) / 2`.
pub fn ase_quadrature_variance(gain_db: f64, noise_figure_db: f64) -> f64 {
    spontaneous_emission_factor(noise_figure_db) * (db_to_linear(gain_db) - 1.0) / 2.0
}

/// Flat-gain amplifier with additive ASE.
pub fn edfa_amplify(frame: &IqFrame, gain_db: f64, noise_figure_db: f64, stream: &RandomStream) -> Result<IqFrame> {
    if !(gain_db >= 0.0 && gain_db.is_finite()) {
        return Err(QepsError::invalid(format!("amplifier gain must be >= 0 dB, got {gain_db}")));
    }
    if !noise_figure_db.is_finite() {
        return Err(QepsError::invalid("noise figure must be finite"));
    }
    let g = db_to_linear(gain_db).sqrt();
    let sigma = ase_quadrature_variance(gain_db, noise_figure_db).sqrt();
    Ok(add_complex_noise(&frame.scaled(g), sigma, stream))
}

fn add_complex_noise(frame: &IqFrame, sigma: f64, stream: &RandomStream) -> IqFrame {
    if sigma == 0.0 {
        return frame.clone();
    }
    let mut cur = stream.cursor(0);
    frame.with_samples(
        frame
            .samples()
            .iter()
            .map(|s| s + cur.next_complex_normal(sigma))
            .collect(),
    )
}

/// Coherent-state quadrature noise at a detector.
pub fn add_vacuum_noise(frame: &IqFrame, stream: &RandomStream) -> IqFrame {
    add_complex_noise(frame, VACUUM_QUADRATURE_VARIANCE.sqrt(), stream)
}
