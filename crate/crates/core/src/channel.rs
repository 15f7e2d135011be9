//! Time-correlated channel realizations: per-arm transmittance fading,
//! relative-phase drift and laser frequency offset.
//!
//! Turbulent fading is an Ornstein-Uhlenbeck process in log-transmittance
//! with the configured stationary spread and correlation time; the two
//! arms fade independently. The two lasers' phase noises are combined into
//! a single relative-phase Gaussian random walk, which is the only phase
//! the downstream pipeline consumes. The residual frequency offset ramps
//! at the cavity drift rate and is reset by periodic calibration.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvWriter;
use crate::protocol::Ticks;
use crate::rng::{derive_stream, StreamRole};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Laser wavelength used by the default configuration, metres.
pub const DEFAULT_WAVELENGTH_M: f64 = 1550.12e-9;

/// Frequency/phase noise budget of the two-laser system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseNoiseParams {
    /// Optical carrier frequency, Hz.
    pub optical_freq_hz: f64,
    /// Residual long-term laser drift, Hz/s.
    pub drift_rate_hz_per_s: f64,
    /// Preset heterodyne offset between the two lasers, Hz.
    pub preset_offset_hz: f64,
    /// Relative-phase random-walk increment std per millisecond, rad.
    pub phase_drift_rad_per_ms: f64,
    /// Speed of light, m/s.
    pub speed_of_light: f64,
    /// Residual frequency offset at t = 0, Hz.
    pub initial_offset_hz: f64,
    /// Period of the frequency-calibration feedback, s.
    pub calibration_period_s: f64,
    /// Std of the residual offset right after a calibration reset, Hz
    /// (matches the closed-loop residual of the calibration demo).
    pub calibration_residual_hz: f64,
}

impl Default for PhaseNoiseParams {
    fn default() -> Self {
        PhaseNoiseParams {
            optical_freq_hz: SPEED_OF_LIGHT / DEFAULT_WAVELENGTH_M,
            drift_rate_hz_per_s: 0.15,
            preset_offset_hz: 1000.0,
            phase_drift_rad_per_ms: 2.1,
            speed_of_light: SPEED_OF_LIGHT,
            initial_offset_hz: 0.0,
            calibration_period_s: 5.0,
            calibration_residual_hz: 10.9,
        }
    }
}

impl PhaseNoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("optical_freq_hz", self.optical_freq_hz),
            ("drift_rate_hz_per_s", self.drift_rate_hz_per_s),
            ("phase_drift_rad_per_ms", self.phase_drift_rad_per_ms),
            ("calibration_period_s", self.calibration_period_s),
            ("calibration_residual_hz", self.calibration_residual_hz),
        ] {
            if v < 0.0 {
                return Err(Error::config(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Atmospheric fading model of one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingParams {
    /// Mean (dB-average) attenuation per arm.
    pub mean_loss_db: f64,
    /// Stationary std of the log-transmittance (natural log).
    pub scintillation_sigma: f64,
    /// Fading correlation time, ms.
    pub correlation_time_ms: f64,
    /// Fraction of arriving photons routed to the probe detector; the
    /// complement reaches the interference beam splitter.
    pub probe_tap_ratio: f64,
}

impl Default for FadingParams {
    fn default() -> Self {
        FadingParams {
            mean_loss_db: 32.0,
            scintillation_sigma: 1.23,
            correlation_time_ms: 10.0,
            probe_tap_ratio: 0.90,
        }
    }
}

impl FadingParams {
    pub fn validate(&self) -> Result<()> {
        if self.correlation_time_ms <= 0.0 {
            return Err(Error::config("correlation_time_ms must be > 0".to_string()));
        }
        if self.scintillation_sigma < 0.0 {
            return Err(Error::config("scintillation_sigma must be >= 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.probe_tap_ratio) {
            return Err(Error::config(format!(
                "probe_tap_ratio = {} outside [0, 1)",
                self.probe_tap_ratio
            )));
        }
        Ok(())
    }

    /// Fraction of arriving photons that reach the interference beam
    /// splitter.
    pub fn interference_fraction(&self) -> f64 {
        1.0 - self.probe_tap_ratio
    }

    /// Median (dB-average) transmittance of the arm.
    pub fn median_transmittance(&self) -> f64 {
        10f64.powf(-self.mean_loss_db / 10.0)
    }
}

/// Sampled channel state over a run.
#[derive(Debug, Clone)]
pub struct ChannelTrajectory {
    pub sample_period: Ticks,
    pub efficiency_a: Vec<f64>,
    pub efficiency_b: Vec<f64>,
    /// Relative phase random-walk component, rad (the preset/residual beat
    /// ramp is accounted for separately from `freq_offset_hz`).
    pub relative_phase: Vec<f64>,
    /// Instantaneous residual frequency offset, Hz.
    pub freq_offset_hz: Vec<f64>,
}

/// Channel state at one instant.
#[derive(Debug, Clone, Copy)]
pub struct ChannelSample {
    pub efficiency_a: f64,
    pub efficiency_b: f64,
    pub relative_phase: f64,
    pub freq_offset_hz: f64,
}

impl ChannelTrajectory {
    pub fn len(&self) -> usize {
        self.relative_phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relative_phase.is_empty()
    }

    pub fn duration(&self) -> Ticks {
        self.sample_period * self.len() as Ticks
    }

    /// Zero-order-hold sample at absolute time `t`.
    pub fn at(&self, t: Ticks) -> ChannelSample {
        let idx = (t / self.sample_period).clamp(0, self.len() as Ticks - 1) as usize;
        ChannelSample {
            efficiency_a: self.efficiency_a[idx],
            efficiency_b: self.efficiency_b[idx],
            relative_phase: self.relative_phase[idx],
            freq_offset_hz: self.freq_offset_hz[idx],
        }
    }

    /// Export as CSV (time_s, eff_a, eff_b, delta_phi_rad, delta_nu_hz).
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = CsvWriter::create(
            path,
            &["time_s", "eff_a", "eff_b", "delta_phi_rad", "delta_nu_hz"],
        )?;
        let dt = self.sample_period as f64 * 1e-10;
        for i in 0..self.len() {
            w.write_row(&[
                format!("{:.9}", i as f64 * dt),
                format!("{:.6e}", self.efficiency_a[i]),
                format!("{:.6e}", self.efficiency_b[i]),
                format!("{:.6}", self.relative_phase[i]),
                format!("{:.4}", self.freq_offset_hz[i]),
            ])?;
        }
        w.finish()
    }
}

/// Generate a channel realization of `duration` sampled every
/// `sample_period` ticks.
pub fn simulate_trajectory(
    fading: &FadingParams,
    noise: &PhaseNoiseParams,
    duration: Ticks,
    sample_period: Ticks,
    seed: u64,
) -> Result<ChannelTrajectory> {
    if sample_period <= 0 || duration < sample_period {
        return Err(Error::config(format!(
            "need duration >= sample_period > 0, got duration={duration}, sample_period={sample_period}"
        )));
    }
    fading.validate()?;
    noise.validate()?;

    let steps = (duration / sample_period) as usize;
    let dt_ms = sample_period as f64 * 1e-10 * 1e3;
    let dt_s = dt_ms * 1e-3;

    let mut rng = derive_stream(seed, StreamRole::Channel, 0);

    // OU in log-transmittance: stationary mean from the dB-average loss,
    // stationary std = scintillation_sigma.
    let log_mean = -fading.mean_loss_db * std::f64::consts::LN_10 / 10.0;
    let sigma = fading.scintillation_sigma;
    let decay = (-dt_ms / fading.correlation_time_ms).exp();
    let innovation = sigma * (1.0 - decay * decay).sqrt();

    let step_phase_std = noise.phase_drift_rad_per_ms * dt_ms.sqrt();

    let mut eff_a = Vec::with_capacity(steps);
    let mut eff_b = Vec::with_capacity(steps);
    let mut phases = Vec::with_capacity(steps);
    let mut offsets = Vec::with_capacity(steps);

    let mut log_a = log_mean + sigma * rng.sample::<f64, _>(StandardNormal);
    let mut log_b = log_mean + sigma * rng.sample::<f64, _>(StandardNormal);
    let mut phase: f64 = rng.random::<f64>() * 2.0 * PI;
    let mut offset = noise.initial_offset_hz;

    let cal_period_steps = if noise.calibration_period_s.is_finite() && dt_s > 0.0 {
        (noise.calibration_period_s / dt_s).round().max(1.0) as usize
    } else {
        usize::MAX
    };

    for step in 0..steps {
        if step > 0 && cal_period_steps != usize::MAX && step % cal_period_steps == 0 {
            // Calibration reset: the feedback loop pulls the offset back to
            // a zero-mean residual.
            offset = noise.calibration_residual_hz * rng.sample::<f64, _>(StandardNormal);
        }
        eff_a.push(log_a.exp().min(1.0));
        eff_b.push(log_b.exp().min(1.0));
        phases.push(phase);
        offsets.push(offset);

        log_a = log_mean + (log_a - log_mean) * decay + innovation * rng.sample::<f64, _>(StandardNormal);
        log_b = log_mean + (log_b - log_mean) * decay + innovation * rng.sample::<f64, _>(StandardNormal);
        phase += step_phase_std * rng.sample::<f64, _>(StandardNormal);
        offset += noise.drift_rate_hz_per_s * dt_s;
    }

    Ok(ChannelTrajectory {
        sample_period,
        efficiency_a: eff_a,
        efficiency_b: eff_b,
        relative_phase: phases,
        freq_offset_hz: offsets,
    })
}

/// Phase-estimation error budget: `2*pi*tau*delta_nu + 2*pi*nu*delta_L/c`
/// for estimation duration `tau`, frequency deviation `delta_nu` and path
/// fluctuation `delta_L`.
pub fn phase_error_budget(
    tau_s: f64,
    delta_nu_hz: f64,
    delta_l_m: f64,
    noise: &PhaseNoiseParams,
) -> Result<f64> {
    if tau_s <= 0.0 {
        return Err(Error::domain(format!("tau = {tau_s} must be > 0")));
    }
    Ok(2.0 * PI * tau_s * delta_nu_hz
        + 2.0 * PI * noise.optical_freq_hz * delta_l_m / noise.speed_of_light)
}
