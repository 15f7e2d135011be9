//! Frequency-difference recovery from interference-click statistics,
//! periodic calibration feedback, and clock-offset measurement from probe
//! arrival times.
//!
//! The beat spectrum is computed from the binned click-rate difference
//! (D0 - D1) of the interference detectors: the difference cancels the
//! common intensity fading to first order and oscillates at the
//! heterodyne offset. The dominant lobe of the power spectrum (contiguous
//! bins above half of the peak) yields the center estimate (power-weighted
//! centroid) and the span (rms width of the lobe).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{FadingParams, PhaseNoiseParams};
use crate::error::{Error, Result};
use crate::io::CsvWriter;
use crate::measurement::{DetectionEvent, DetectorId};
use crate::protocol::{FrameSchedule, Ticks, TICKS_PER_NS};
use crate::rng::{derive_stream, StreamRole};

/// Beat spectrum of one estimation window.
#[derive(Debug, Clone)]
pub struct BeatSpectrum {
    pub bin_width_hz: f64,
    /// Frequency of the first magnitude bin, Hz.
    pub start_hz: f64,
    /// Spectral magnitudes |X(f)| on the scan grid.
    pub magnitudes: Vec<f64>,
    pub center_estimate_hz: f64,
    pub span_estimate_hz: f64,
    pub n_events: usize,
}

/// Beat estimator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatEstimatorConfig {
    /// Width of the click-rate time bins, ns.
    pub time_bin_ns: f64,
    /// Center of the frequency scan, Hz.
    pub scan_center_hz: f64,
    /// Half-width of the frequency scan, Hz.
    pub scan_halfwidth_hz: f64,
    /// Spectral bin width, Hz.
    pub bin_width_hz: f64,
    /// Boxcar half-width (in bins) applied to the power spectrum before
    /// lobe extraction; an unaveraged periodogram fluctuates by 100% per
    /// bin, which would reduce the dominant lobe to a single spike.
    pub smooth_halfwidth_bins: usize,
    /// Minimum number of events for a usable estimate.
    pub min_events: usize,
}

impl Default for BeatEstimatorConfig {
    fn default() -> Self {
        BeatEstimatorConfig {
            // An eighth of the 1 kHz beat period: the refinement sums
            // blocks spanning one full image cycle, so the negative
            // frequency image of the real series cancels exactly.
            time_bin_ns: 1.25e5, // 0.125 ms -> Nyquist 4 kHz
            scan_center_hz: 1000.0,
            scan_halfwidth_hz: 450.0,
            bin_width_hz: 1.0,
            smooth_halfwidth_bins: 25,
            min_events: 500,
        }
    }
}

impl BeatEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_bin_ns <= 0.0 || self.bin_width_hz <= 0.0 || self.scan_halfwidth_hz <= 0.0 {
            return Err(Error::config("beat estimator: non-positive bins".to_string()));
        }
        let nyquist = 0.5e9 / self.time_bin_ns;
        if self.scan_center_hz + self.scan_halfwidth_hz > nyquist {
            return Err(Error::config(format!(
                "beat estimator scan exceeds Nyquist {nyquist} Hz"
            )));
        }
        Ok(())
    }
}

/// Estimate the beat frequency from the detection events of one window.
///
/// `window` is the window length in ticks; events outside `[t0, t0 +
/// window)` (with `t0` the first event time rounded down to a bin) are
/// ignored. Fails with an estimation error when fewer than
/// `cfg.min_events` interference clicks are present, in which case the
/// caller skips the calibration round.
pub fn estimate_beat_frequency(
    events: &[DetectionEvent],
    window: Ticks,
    cfg: &BeatEstimatorConfig,
) -> Result<BeatSpectrum> {
    cfg.validate()?;
    let interference: Vec<&DetectionEvent> = events
        .iter()
        .filter(|e| matches!(e.detector, DetectorId::D0 | DetectorId::D1))
        .collect();
    if interference.len() < cfg.min_events {
        return Err(Error::Estimation(format!(
            "beat estimation needs >= {} events, got {}",
            cfg.min_events,
            interference.len()
        )));
    }
    let t0 = interference.iter().map(|e| e.time).min().unwrap();
    let bin_ticks = (cfg.time_bin_ns * TICKS_PER_NS as f64) as Ticks;
    let n_bins = (window / bin_ticks).max(2) as usize;
    let mut diff = vec![0.0f64; n_bins];
    for e in interference {
        let idx = ((e.time - t0) / bin_ticks) as usize;
        if idx >= n_bins {
            continue;
        }
        diff[idx] += if e.detector == DetectorId::D0 { 1.0 } else { -1.0 };
    }
    let mean = diff.iter().sum::<f64>() / n_bins as f64;
    for d in &mut diff {
        *d -= mean;
    }

    // Direct DFT on the 1 Hz scan grid.
    let dt = cfg.time_bin_ns * 1e-9;
    let f_lo = (cfg.scan_center_hz - cfg.scan_halfwidth_hz).max(cfg.bin_width_hz);
    let n_freqs = (2.0 * cfg.scan_halfwidth_hz / cfg.bin_width_hz) as usize + 1;
    let mut magnitudes = Vec::with_capacity(n_freqs);
    for i in 0..n_freqs {
        let f = f_lo + i as f64 * cfg.bin_width_hz;
        let w = 2.0 * PI * f * dt;
        let (mut re, mut im) = (0.0f64, 0.0f64);
        let (step_cos, step_sin) = (w.cos(), w.sin());
        let (mut c, mut s) = (1.0f64, 0.0f64);
        for &d in &diff {
            re += d * c;
            im += d * s;
            let (c2, s2) = (c * step_cos - s * step_sin, s * step_cos + c * step_sin);
            c = c2;
            s = s2;
        }
        magnitudes.push((re * re + im * im).sqrt());
    }

    // Smooth the power spectrum, then take the dominant lobe: contiguous
    // bins around the peak with smoothed power above half of the peak.
    let power: Vec<f64> = magnitudes.iter().map(|m| m * m).collect();
    let hw = cfg.smooth_halfwidth_bins;
    let smoothed: Vec<f64> = (0..power.len())
        .map(|i| {
            let lo = i.saturating_sub(hw);
            let hi = (i + hw).min(power.len() - 1);
            power[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let peak_idx = smoothed
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let half = 0.5 * smoothed[peak_idx];
    let mut lo = peak_idx;
    while lo > 0 && smoothed[lo - 1] >= half {
        lo -= 1;
    }
    let mut hi = peak_idx;
    while hi + 1 < smoothed.len() && smoothed[hi + 1] >= half {
        hi += 1;
    }
    let (mut w_sum, mut f_sum) = (0.0, 0.0);
    for i in lo..=hi {
        w_sum += smoothed[i];
        f_sum += smoothed[i] * (f_lo + i as f64 * cfg.bin_width_hz);
    }
    let coarse_center = f_sum / w_sum;
    let mut var = 0.0;
    for i in lo..=hi {
        let f = f_lo + i as f64 * cfg.bin_width_hz;
        var += smoothed[i] * (f - coarse_center) * (f - coarse_center);
    }
    let span = (var / w_sum).sqrt();

    // Coherent refinement: the lobe centroid of a single-record
    // periodogram jitters by a large fraction of the (phase-noise
    // broadened) lobe width. The weighted average of the demodulated
    // phase increments recovers the window-average beat frequency down to
    // the intrinsic spread of the phase walk itself. Phase wrapping
    // shrinks each pass toward the demodulation frequency, so iterate to
    // the self-consistent value.
    let mut center = coarse_center;
    for _ in 0..12 {
        let refined = refine_by_phase_increments(&diff, dt, center);
        let step = refined - center;
        center = refined;
        if step.abs() < 0.2 {
            break;
        }
    }

    Ok(BeatSpectrum {
        bin_width_hz: cfg.bin_width_hz,
        start_hz: f_lo,
        magnitudes,
        center_estimate_hz: center,
        span_estimate_hz: span,
        n_events: diff.len(),
    })
}

/// Average instantaneous frequency of `diff` around `f0`: demodulate at
/// `f0`, sum overlapping Hann-weighted blocks spanning one beat period,
/// and take the unweighted mean of the block-to-block phase increments.
///
/// The Hann window places a robust spectral null on the negative-frequency
/// image of the real series (at 2*f0 from the demodulation); without it a
/// residual image steers near-origin block phasors and biases the winding
/// of the increment sum. The unweighted mean telescopes to the endpoint
/// phase difference over the window, so per-block shot noise cancels.
/// Blocks in deeply faded stretches (low count activity) or with collapsed
/// coherence are skipped.
fn refine_by_phase_increments(diff: &[f64], dt: f64, f0: f64) -> f64 {
    let span = ((1.0 / (f0 * dt)).round() as usize).max(4);
    if diff.len() < span + 2 {
        return f0;
    }
    let window: Vec<f64> = (0..span)
        .map(|j| 0.5 - 0.5 * (2.0 * PI * (j as f64 + 1.0) / (span as f64 + 1.0)).cos())
        .collect();
    let demod: Vec<(f64, f64)> = diff
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let ph = -2.0 * PI * f0 * (j as f64 + 0.5) * dt;
            (d * ph.cos(), d * ph.sin())
        })
        .collect();
    let n_blocks = diff.len() - span + 1;
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut activity = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        let (mut re, mut im, mut act) = (0.0f64, 0.0f64, 0.0f64);
        for (j, &w) in window.iter().enumerate() {
            re += w * demod[k + j].0;
            im += w * demod[k + j].1;
            act += w * diff[k + j].abs();
        }
        blocks.push((re, im));
        activity.push(act);
    }
    let mut sorted = activity.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let act_floor = 0.25 * sorted[sorted.len() / 2];
    let keep: Vec<bool> = blocks
        .iter()
        .zip(&activity)
        .map(|(&(re, im), &act)| {
            act >= act_floor && (re * re + im * im).sqrt() >= 0.2 * act
        })
        .collect();

    let (mut n_incs, mut inc_sum) = (0u64, 0.0f64);
    for (k, pair) in blocks.windows(2).enumerate() {
        if !keep[k] || !keep[k + 1] {
            continue;
        }
        let (r0, i0) = pair[0];
        let (r1, i1) = pair[1];
        // angle(c1 * conj(c0)); consecutive blocks overlap all but one bin,
        // so the increment spacing is a single bin.
        let re = r1 * r0 + i1 * i0;
        let im = i1 * r0 - r1 * i0;
        inc_sum += im.atan2(re);
        n_incs += 1;
    }
    if n_incs == 0 {
        return f0;
    }
    f0 + inc_sum / n_incs as f64 / (2.0 * PI * dt)
}

/// Frequency correction to steer the beat onto `target_hz` (applied to the
/// sender-side modulator in the behavioral model).
pub fn calibrate_frequency(spectrum: &BeatSpectrum, target_hz: f64) -> f64 {
    target_hz - spectrum.center_estimate_hz
}

/// Behavioral clock model: white frequency noise matching the quoted 1 s
/// Allan deviation plus an optional deterministic rate offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub allan_dev_1s: f64,
    pub offset_s: f64,
    /// Deterministic fractional frequency offset, s/s.
    pub drift: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel {
            allan_dev_1s: 2e-11,
            offset_s: 0.0,
            drift: 0.0,
        }
    }
}

impl ClockModel {
    /// Advance the clock by `dt_s`, accumulating deterministic drift plus
    /// white frequency noise at the 1 s Allan level.
    pub fn advance(&mut self, dt_s: f64, rng: &mut impl Rng) {
        let y = self.drift + self.allan_dev_1s * rng.sample::<f64, _>(StandardNormal);
        self.offset_s += y * dt_s;
    }

    pub fn apply_correction(&mut self, measured_offset_s: f64) {
        self.offset_s -= measured_offset_s;
    }
}

/// Expected emission-intensity profile of one frame, binned at `bin_ns`.
pub fn frame_template(
    schedule: &FrameSchedule,
    reference_intensity: f64,
    mean_signal_intensity: f64,
    bin_ns: u32,
) -> Vec<f64> {
    let n_bins = (schedule.frame_ns / bin_ns) as usize;
    let mut tmpl = vec![0.0; n_bins];
    let period = schedule.pulse_period_ns;
    for (i, v) in tmpl.iter_mut().enumerate() {
        let t_ns = (i as u32) * bin_ns;
        if t_ns < schedule.reference_ns {
            // Reference pulses fill their slots end to end.
            *v = reference_intensity / period as f64;
        } else if t_ns >= schedule.reference_ns + schedule.gap_ns {
            let within = (t_ns - schedule.reference_ns - schedule.gap_ns) % period;
            if within < schedule.signal_pulse_width_ns.max(bin_ns) {
                *v = mean_signal_intensity / schedule.signal_pulse_width_ns as f64;
            }
        }
    }
    tmpl
}

/// Estimate the clock offset (in ticks, sub-tick resolution) of a probe
/// event stream against the frame template by circular cross-correlation
/// of the folded arrival-time histogram.
///
/// The offset is reported in (-frame/2, frame/2]. A multi-modal
/// correlation (a distant competing peak within 90% of the maximum) is a
/// synchronization failure.
pub fn synchronize_clocks(
    probe_events: &[DetectionEvent],
    schedule: &FrameSchedule,
    template: &[f64],
) -> Result<f64> {
    let bin_ns = schedule.frame_ns / template.len() as u32;
    let bin_ticks = (bin_ns as Ticks) * TICKS_PER_NS;
    let n = template.len();
    if probe_events.is_empty() {
        return Err(Error::Synchronization("no probe events".to_string()));
    }
    let frame_ticks = schedule.frame_ticks();
    let mut hist = vec![0.0f64; n];
    for e in probe_events {
        let within = e.time.rem_euclid(frame_ticks);
        hist[(within / bin_ticks) as usize % n] += 1.0;
    }
    let tmpl_mean = template.iter().sum::<f64>() / n as f64;
    let hist_mean = hist.iter().sum::<f64>() / n as f64;
    let tmpl: Vec<f64> = template.iter().map(|v| v - tmpl_mean).collect();
    let h: Vec<f64> = hist.iter().map(|v| v - hist_mean).collect();

    // corr(lag) = sum_b h[b] * tmpl[b - lag]; peak at the injected offset.
    let mut corr = vec![0.0f64; n];
    for (lag, c) in corr.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in 0..n {
            acc += h[b] * tmpl[(b + n - lag) % n];
        }
        *c = acc;
    }
    let peak = corr
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    // Contrast gate against the shot-noise floor of the correlation:
    // structureless data peaks within a few sigma of it, a real frame
    // alignment exceeds it by ~sqrt(N).
    let n_events = probe_events.len() as f64;
    let tmpl_ms = tmpl.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_floor = (n_events * tmpl_ms).sqrt();
    if !(corr[peak] > 5.0 * noise_floor) {
        return Err(Error::Synchronization(format!(
            "ambiguous alignment: peak contrast {:.2} below threshold",
            corr[peak] / noise_floor.max(1e-300)
        )));
    }

    // Multi-modality: a competing local maximum far from the peak. Nearby
    // bins belong to the same (broad) correlation peak of the reference
    // block and are not ambiguity.
    let exclusion = (schedule.reference_ns / bin_ns / 2) as usize;
    let mut second = f64::NEG_INFINITY;
    for (i, &c) in corr.iter().enumerate() {
        let dist = {
            let d = (i as i64 - peak as i64).rem_euclid(n as i64);
            d.min(n as i64 - d) as usize
        };
        if dist > exclusion {
            second = second.max(c);
        }
    }
    if second > 0.9 * corr[peak] {
        return Err(Error::Synchronization(
            "ambiguous alignment: multi-modal correlation".to_string(),
        ));
    }

    // Parabolic refinement around the discrete peak.
    let cm = corr[(peak + n - 1) % n];
    let c0 = corr[peak];
    let cp = corr[(peak + 1) % n];
    let denom = cm - 2.0 * c0 + cp;
    let frac = if denom.abs() > 1e-12 {
        (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let mut offset_bins = peak as f64 + frac;
    if offset_bins > n as f64 / 2.0 {
        offset_bins -= n as f64;
    }
    Ok(offset_bins * bin_ticks as f64)
}

/// One closed-loop calibration round.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationRound {
    pub round: usize,
    pub center_estimate_hz: f64,
    pub correction_hz: f64,
    /// Residual offset right after the correction is applied, Hz.
    pub residual_hz: f64,
}

/// Configuration of the closed-loop frequency-calibration demo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLoopConfig {
    pub rounds: usize,
    /// Measurement window per round, s.
    pub window_s: f64,
    /// Calibration cadence (one round every this many seconds), s.
    pub cadence_s: f64,
    /// Mean interference click rate summed over both detectors, counts/s.
    pub click_rate_cps: f64,
    /// Interference visibility of the beat.
    pub visibility: f64,
    /// Apply lognormal fading amplitude modulation to the click rate.
    pub with_fading: bool,
}

impl Default for CalibrationLoopConfig {
    fn default() -> Self {
        CalibrationLoopConfig {
            rounds: 1000,
            window_s: 1.0,
            cadence_s: 5.0,
            click_rate_cps: 200_000.0,
            visibility: 0.9,
            with_fading: true,
        }
    }
}

/// Run the closed-loop frequency calibration: each round synthesizes the
/// beat clicks of one measurement window from the true (drifting) offset,
/// estimates the beat center, and applies the correction to the offset
/// state. Returns the per-round log.
pub fn run_calibration_loop(
    noise: &PhaseNoiseParams,
    fading: &FadingParams,
    cfg: &CalibrationLoopConfig,
    seed: u64,
) -> Vec<CalibrationRound> {
    let mut rng = derive_stream(seed, StreamRole::Calibration, 0);
    let est_cfg = BeatEstimatorConfig::default();
    let bin_s = est_cfg.time_bin_ns * 1e-9;
    let n_bins = (cfg.window_s / bin_s).round() as usize;
    let window_ticks = (cfg.window_s * 1e10) as Ticks;

    let mut delta_nu = noise.initial_offset_hz;
    let mut rounds = Vec::with_capacity(cfg.rounds);

    // Fading AM state (OU in log-amplitude, shared by both detectors since
    // the difference series cancels it only partially through the beat).
    let fade_decay = (-bin_s * 1e3 / fading.correlation_time_ms).exp();
    let fade_innov = fading.scintillation_sigma * (1.0 - fade_decay * fade_decay).sqrt();
    let mut fade_log: f64 = 0.0;

    let mut phase: f64 = rng.random::<f64>() * 2.0 * PI;
    let walk_per_bin = noise.phase_drift_rad_per_ms * (bin_s * 1e3).sqrt();

    for round in 0..cfg.rounds {
        let mut events = Vec::new();
        for bin in 0..n_bins {
            let t_center = ((bin as f64 + 0.5) * bin_s * 1e10) as Ticks;
            let beat = noise.preset_offset_hz + delta_nu + noise.drift_rate_hz_per_s * bin as f64 * bin_s;
            phase += 2.0 * PI * beat * bin_s + walk_per_bin * rng.sample::<f64, _>(StandardNormal);
            let fade = if cfg.with_fading {
                fade_log = fade_log * fade_decay + fade_innov * rng.sample::<f64, _>(StandardNormal);
                fade_log.exp()
            } else {
                1.0
            };
            let base = cfg.click_rate_cps * bin_s * fade * 0.5;
            let r0 = base * (1.0 + cfg.visibility * phase.cos());
            let r1 = base * (1.0 - cfg.visibility * phase.cos());
            for (rate, det) in [(r0, DetectorId::D0), (r1, DetectorId::D1)] {
                if rate <= 0.0 {
                    continue;
                }
                let k = Poisson::new(rate).unwrap().sample(&mut rng) as u64;
                for _ in 0..k {
                    events.push(DetectionEvent {
                        time: t_center,
                        detector: det,
                        origin: crate::measurement::OriginKind::Reference,
                    });
                }
            }
        }
        // Drift across the measured window.
        delta_nu += noise.drift_rate_hz_per_s * cfg.window_s;

        match estimate_beat_frequency(&events, window_ticks, &est_cfg) {
            Ok(spectrum) => {
                let correction = calibrate_frequency(&spectrum, noise.preset_offset_hz);
                delta_nu += correction;
                rounds.push(CalibrationRound {
                    round,
                    center_estimate_hz: spectrum.center_estimate_hz,
                    correction_hz: correction,
                    residual_hz: delta_nu,
                });
            }
            Err(_) => {
                // Too few events: skip this round, state drifts on.
            }
        }
        // Drift between measurement windows.
        delta_nu += noise.drift_rate_hz_per_s * (cfg.cadence_s - cfg.window_s).max(0.0);
    }
    rounds
}

/// Standard deviation of the post-correction residual offsets.
pub fn residual_sigma(rounds: &[CalibrationRound]) -> f64 {
    let n = rounds.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = rounds.iter().map(|r| r.residual_hz).sum::<f64>() / n;
    (rounds
        .iter()
        .map(|r| (r.residual_hz - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0))
        .sqrt()
}

/// Export a calibration log as CSV.
pub fn write_calibration_log(
    path: impl AsRef<std::path::Path>,
    rounds: &[CalibrationRound],
) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &["round", "center_estimate_hz", "correction_hz", "residual_hz"],
    )?;
    for r in rounds {
        w.write_row(&[
            r.round.to_string(),
            format!("{:.4}", r.center_estimate_hz),
            format!("{:.4}", r.correction_hz),
            format!("{:.4}", r.residual_hz),
        ])?;
    }
    w.finish()
}

/// Correct slot assignment after synchronization: subtract the estimated
/// offset (rounded to the TDC grid) from every event time.
pub fn apply_time_correction(events: &mut [DetectionEvent], offset_ticks: f64) {
    let shift = offset_ticks.round() as Ticks;
    for e in events.iter_mut() {
        e.time -= shift;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::OriginKind;
    use crate::protocol::{SlotKind, SourceParams};

    fn tone_events(
        freq_hz: f64,
        drift_hz_per_s: f64,
        window_s: f64,
        rate_cps: f64,
        phase_walk_rad_per_ms: f64,
        seed: u64,
    ) -> Vec<DetectionEvent> {
        let mut rng = derive_stream(seed, StreamRole::Calibration, 1);
        let bin_s = BeatEstimatorConfig::default().time_bin_ns * 1e-9;
        let n_bins = (window_s / bin_s) as usize;
        let mut events = Vec::new();
        let mut phase = 0.3f64;
        let walk = phase_walk_rad_per_ms * (bin_s * 1e3).sqrt();
        for bin in 0..n_bins {
            let t = ((bin as f64 + 0.5) * bin_s * 1e10) as Ticks;
            let f = freq_hz + drift_hz_per_s * bin as f64 * bin_s;
            phase += 2.0 * PI * f * bin_s + walk * rng.sample::<f64, _>(StandardNormal);
            let base = rate_cps * bin_s * 0.5;
            for (rate, det) in [
                (base * (1.0 + phase.cos()), DetectorId::D0),
                (base * (1.0 - phase.cos()), DetectorId::D1),
            ] {
                if rate <= 0.0 {
                    continue;
                }
                let k = Poisson::new(rate).unwrap().sample(&mut rng) as u64;
                for _ in 0..k {
                    events.push(DetectionEvent {
                        time: t,
                        detector: det,
                        origin: OriginKind::Reference,
                    });
                }
            }
        }
        events
    }

    #[test]
    fn pure_tone_center_within_bin() {
        let events = tone_events(1000.0, 0.0, 1.0, 50_000.0, 0.0, 2);
        let spec =
            estimate_beat_frequency(&events, 10_000_000_000, &BeatEstimatorConfig::default())
                .unwrap();
        assert!(
            (spec.center_estimate_hz - 1000.0).abs() <= spec.bin_width_hz,
            "center {}",
            spec.center_estimate_hz
        );
        // A pure tone's lobe width is set by the smoothing boxcar alone.
        assert!(spec.span_estimate_hz < 20.0, "span {}", spec.span_estimate_hz);
    }

    #[test]
    fn atmospheric_broadening_span_below_300_hz() {
        // Default phase noise (2.1 rad/ms random walk) broadens the line;
        // the rms lobe width must stay below the 300 Hz budget.
        let events = tone_events(1000.0, 0.0, 1.0, 50_000.0, 2.1, 3);
        let spec =
            estimate_beat_frequency(&events, 10_000_000_000, &BeatEstimatorConfig::default())
                .unwrap();
        assert!(
            spec.span_estimate_hz < 300.0,
            "span {}",
            spec.span_estimate_hz
        );
        assert!(spec.span_estimate_hz > 30.0, "span {}", spec.span_estimate_hz);
    }

    #[test]
    fn drifting_tone_centers_midwindow() {
        // 1 kHz + 0.15 Hz/s over 10 s: mid-window average 1000.75 Hz.
        let events = tone_events(1000.0, 0.15, 10.0, 50_000.0, 0.0, 4);
        let spec =
            estimate_beat_frequency(&events, 100_000_000_000, &BeatEstimatorConfig::default())
                .unwrap();
        assert!(
            (spec.center_estimate_hz - 1000.75).abs() <= 1.0,
            "center {}",
            spec.center_estimate_hz
        );
    }

    #[test]
    fn too_few_events_is_estimation_failure() {
        let events = tone_events(1000.0, 0.0, 0.01, 1000.0, 0.0, 5);
        assert!(matches!(
            estimate_beat_frequency(&events, 10_000_000, &BeatEstimatorConfig::default()),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn correction_arithmetic() {
        let spec = BeatSpectrum {
            bin_width_hz: 1.0,
            start_hz: 0.0,
            magnitudes: vec![1.0],
            center_estimate_hz: 1050.0,
            span_estimate_hz: 1.0,
            n_events: 1,
        };
        assert_eq!(calibrate_frequency(&spec, 1000.0), -50.0);
        let spec0 = BeatSpectrum {
            center_estimate_hz: 1000.0,
            ..spec
        };
        assert_eq!(calibrate_frequency(&spec0, 1000.0), 0.0);
    }

    #[test]
    fn calibration_loop_smoke() {
        let noise = PhaseNoiseParams::default();
        let fading = FadingParams::default();
        let cfg = CalibrationLoopConfig {
            rounds: 1000,
            ..CalibrationLoopConfig::default()
        };
        let rounds = run_calibration_loop(&noise, &fading, &cfg, 11);
        assert!(rounds.len() >= 55);
        let sigma = residual_sigma(&rounds);
        assert!(sigma > 1.0 && sigma < 40.0, "sigma {sigma}");
    }

    #[test]
    fn calibration_residuals_mean_revert() {
        let noise = PhaseNoiseParams::default();
        let fading = FadingParams::default();
        let cfg = CalibrationLoopConfig {
            rounds: 200,
            ..CalibrationLoopConfig::default()
        };
        let rounds = run_calibration_loop(&noise, &fading, &cfg, 12);
        let res: Vec<f64> = rounds.iter().map(|r| r.residual_hz).collect();
        let n = res.len();
        let mean = res.iter().sum::<f64>() / n as f64;
        let var = res.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let mut lag1 = 0.0;
        for i in 0..n - 1 {
            lag1 += (res[i] - mean) * (res[i + 1] - mean);
        }
        lag1 /= (n - 1) as f64 * var;
        assert!(lag1.abs() < 0.3, "lag-1 autocorrelation {lag1}");
    }

    fn synthetic_probe_events(
        schedule: &FrameSchedule,
        template: &[f64],
        n_frames: u64,
        events_per_frame: f64,
        offset_ticks: f64,
        seed: u64,
    ) -> Vec<DetectionEvent> {
        let mut rng = derive_stream(seed, StreamRole::Calibration, 2);
        let bin_ns = schedule.frame_ns / template.len() as u32;
        let total: f64 = template.iter().sum();
        let mut events = Vec::new();
        for frame in 0..n_frames {
            for (i, &w) in template.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                let mean = events_per_frame * w / total;
                let k = if mean > 0.0 {
                    Poisson::new(mean).unwrap().sample(&mut rng) as u64
                } else {
                    0
                };
                for _ in 0..k {
                    let u: f64 = rng.random();
                    let t = frame as f64 * schedule.frame_ticks() as f64
                        + (i as f64 + u) * bin_ns as f64 * TICKS_PER_NS as f64
                        + offset_ticks;
                    events.push(DetectionEvent {
                        time: t as Ticks,
                        detector: DetectorId::ProbeA,
                        origin: OriginKind::Signal,
                    });
                }
            }
        }
        events
    }

    #[test]
    fn zero_offset_recovered_within_tdc_resolution() {
        let schedule = FrameSchedule::default();
        let params = SourceParams::default();
        let tmpl = frame_template(&schedule, 100.0, params.mean_signal_intensity(), 1);
        let events = synthetic_probe_events(&schedule, &tmpl, 2000, 100.0, 0.0, 21);
        let offset = synchronize_clocks(&events, &schedule, &tmpl).unwrap();
        assert!(offset.abs() < 5.0, "offset {offset} ticks"); // < 0.5 ns
    }

    #[test]
    fn injected_offset_recovered() {
        let schedule = FrameSchedule::default();
        let params = SourceParams::default();
        let tmpl = frame_template(&schedule, 100.0, params.mean_signal_intensity(), 1);
        // 3.7 ns = 37 ticks.
        let events = synthetic_probe_events(&schedule, &tmpl, 2000, 100.0, 37.0, 22);
        let offset = synchronize_clocks(&events, &schedule, &tmpl).unwrap();
        assert!(
            (offset - 37.0).abs() < 2.0,
            "offset {offset} ticks, expected 37 +- 2"
        );
    }

    #[test]
    fn uniform_events_are_ambiguous() {
        let schedule = FrameSchedule::default();
        let tmpl = frame_template(&schedule, 100.0, SourceParams::default().mean_signal_intensity(), 1);
        let mut rng = derive_stream(5, StreamRole::Calibration, 3);
        let events: Vec<DetectionEvent> = (0..100_000)
            .map(|_| DetectionEvent {
                time: (rng.random::<f64>() * 1e9) as Ticks,
                detector: DetectorId::ProbeA,
                origin: OriginKind::Signal,
            })
            .collect();
        assert!(synchronize_clocks(&events, &schedule, &tmpl).is_err());
    }

    #[test]
    fn clock_drift_accumulation_and_correction() {
        // 2e-11 fractional offset over 5 s accumulates 0.1 ns.
        let mut clock = ClockModel {
            allan_dev_1s: 0.0,
            offset_s: 0.0,
            drift: 2e-11,
        };
        let mut rng = derive_stream(1, StreamRole::Calibration, 4);
        clock.advance(5.0, &mut rng);
        assert!((clock.offset_s - 1e-10).abs() < 1e-15);
        clock.apply_correction(clock.offset_s);
        assert_eq!(clock.offset_s, 0.0);
    }

    #[test]
    fn slot_assignment_after_synchronization_is_exact() {
        // Noiseless synthetic data: signal clicks uniform within their 1 ns
        // gates, reference clicks spread over their 10 ns slots, everything
        // shifted by a whole-tick offset. After estimation and correction
        // the signal-slot mapping must be 100% correct.
        let schedule = FrameSchedule::default();
        let offset: Ticks = 23; // 2.3 ns
        let mut rng = derive_stream(9, StreamRole::Calibration, 6);
        let mut events = Vec::new();
        let mut truth = Vec::new();
        for frame in 0..400u64 {
            for slot in (0..255u32).step_by(17) {
                let gate: Ticks = (rng.random::<f64>() * 10.0) as Ticks;
                events.push(DetectionEvent {
                    time: schedule.signal_slot_time(frame, slot) + gate + offset,
                    detector: DetectorId::ProbeA,
                    origin: OriginKind::Signal,
                });
                truth.push((frame, slot));
            }
            for slot in 0..140u32 {
                let gate: Ticks = (rng.random::<f64>() * 100.0) as Ticks;
                events.push(DetectionEvent {
                    time: schedule.reference_slot_time(frame, slot) + gate + offset,
                    detector: DetectorId::ProbeA,
                    origin: OriginKind::Reference,
                });
                truth.push((frame, slot));
            }
        }
        let tmpl = frame_template(&schedule, 100.0, SourceParams::default().mean_signal_intensity(), 1);
        let est = synchronize_clocks(&events, &schedule, &tmpl).unwrap();
        assert!((est - offset as f64).abs() < 5.0, "estimate {est}");
        apply_time_correction(&mut events, est);
        for (e, (frame, slot)) in events.iter().zip(&truth) {
            if e.origin == OriginKind::Signal {
                let s = schedule.slot_of(e.time);
                assert_eq!(s.kind, SlotKind::Signal);
                assert_eq!((s.frame, s.slot), (*frame, *slot));
            }
        }
    }
}

