//! Scenario configuration, execution in both modes, loss sweeps, and the
//! artifact outputs (reports/, traces/, sweeps/).
//!
//! The Monte Carlo driver streams pulse pairs frame by frame (nothing is
//! precomputed per pulse), buffering only one phase-estimation window of
//! reference events plus the rare effective events, so runs of 1e9+ pulse
//! pairs stay in constant memory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{simulate_trajectory, ChannelTrajectory, FadingParams, PhaseNoiseParams};
use crate::error::{Error, Result};
use crate::io::CsvWriter;
use crate::keyrate::{
    aopp, decoy_bounds, expected_key_rate, key_rate, plob_bound, propagate_aopp_bounds,
    AoppResult, CountTable, DecoyBounds, KeyRateOutput, SecurityParams,
};
use crate::measurement::{
    DetectorParams, MeasurementConfig, PairClass, PairSampler, SignalOutcome,
};
use crate::phase::{estimate_phase, PhaseEstimatorConfig, RefEvent};
use crate::protocol::{
    draw_frame, terminal_stream, FrameSchedule, IntensityLabel, SimConditions, SourceParams,
    Terminal, Ticks,
};
use crate::sifting::{
    bit_values, windows_from_counts, Click, PostSelectionParams, ProbeNormalization, QberSummary,
    SiftedRecord, WindowEstimates,
};

/// Execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MonteCarlo,
    Expected,
}

/// One executable scenario. Loaded from TOML; unknown fields are rejected
/// with the offending path in the error message.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    #[serde(default)]
    pub conditions: SimConditions,
    #[serde(default)]
    pub source: SourceParams,
    #[serde(default)]
    pub fading: FadingParams,
    #[serde(default)]
    pub noise: PhaseNoiseParams,
    #[serde(default)]
    pub detectors: DetectorParams,
    #[serde(default)]
    pub postselection: PostSelectionParams,
    #[serde(default)]
    pub phase_estimator: PhaseEstimatorConfig,
    /// Mean photon number of one reference pulse.
    #[serde(default = "default_reference_intensity")]
    pub reference_intensity: f64,
    /// Phase estimation window, microseconds (must be a whole number of
    /// frames).
    #[serde(default = "default_phase_window_us")]
    pub phase_window_us: f64,
    /// Monte Carlo size: exactly one of n_pairs / duration_s.
    pub n_pairs: Option<u64>,
    pub duration_s: Option<f64>,
    /// Expected mode: replace the modeled X error rate with a measured one.
    pub inject_qber_x: Option<f64>,
    /// Expected mode: residual phase-estimate error width, rad.
    #[serde(default = "default_sigma_phase")]
    pub sigma_phase: f64,
    /// Aggregation period of the rate/QBER trace, seconds.
    #[serde(default = "default_aggregate_s")]
    pub aggregate_s: f64,
    /// Also dump the full binary event log (large; small runs only).
    #[serde(default)]
    pub write_event_log: bool,
}

fn default_reference_intensity() -> f64 {
    1500.0
}

fn default_phase_window_us() -> f64 {
    200.0
}

fn default_sigma_phase() -> f64 {
    0.05
}

fn default_aggregate_s() -> f64 {
    1.0
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.conditions.validate()?;
        self.source.validate()?;
        self.fading.validate()?;
        self.noise.validate()?;
        self.detectors.validate()?;
        self.postselection.validate()?;
        match (self.n_pairs, self.duration_s) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::config(
                    "exactly one of n_pairs / duration_s must be set".to_string(),
                ))
            }
            _ => {}
        }
        let schedule = FrameSchedule::default();
        let frame_us = schedule.frame_ns as f64 / 1000.0;
        let ratio = self.phase_window_us / frame_us;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::config(format!(
                "phase_window_us = {} must be a whole number of {frame_us} us frames",
                self.phase_window_us
            )));
        }
        if let Some(q) = self.inject_qber_x {
            if !(0.0..=0.5).contains(&q) {
                return Err(Error::config(format!("inject_qber_x = {q} outside [0, 0.5]")));
            }
        }
        Ok(())
    }

    /// Number of signal pulse pairs this scenario simulates/evaluates.
    pub fn total_pairs(&self) -> f64 {
        let schedule = FrameSchedule::default();
        match (self.n_pairs, self.duration_s) {
            (Some(n), _) => n as f64,
            (_, Some(d)) => d * schedule.signal_pairs_per_second(),
            _ => self.conditions.n_pairs,
        }
    }

    /// Wall-clock duration implied by the pair count.
    pub fn duration_s(&self) -> f64 {
        self.total_pairs() / FrameSchedule::default().signal_pairs_per_second()
    }

    pub fn measurement_config(&self) -> MeasurementConfig {
        MeasurementConfig {
            detectors: self.detectors,
            eta_m_db: self.conditions.eta_m_db,
            interference_fraction: self.fading.interference_fraction(),
            probe_fraction: self.fading.probe_tap_ratio,
            reference_intensity: self.reference_intensity,
            preset_offset_hz: self.noise.preset_offset_hz,
        }
    }

    /// Conditions for the analytic model that match this scenario's Monte
    /// Carlo detection path: the probe tap and detector efficiency fold
    /// into the per-arm attenuation, and the dark probability follows the
    /// signal gate.
    pub fn effective_conditions(&self, n_pairs: f64) -> SimConditions {
        let schedule = FrameSchedule::default();
        let extra_db = -10.0
            * (self.fading.interference_fraction().log10() + self.detectors.efficiency.log10());
        SimConditions {
            d0: self
                .detectors
                .dark_prob(schedule.signal_pulse_width_ns as f64),
            eta_a_db: self.fading.mean_loss_db + extra_db,
            eta_b_db: self.fading.mean_loss_db + extra_db,
            n_pairs,
            ..self.conditions
        }
    }
}

/// Load a scenario from TOML, reporting schema violations with field paths.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let scenario: Scenario = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.as_ref().display())))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Key-rate evaluation of one data selection (all data, or the kept
/// windows only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateSection {
    pub n_pairs: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub n1_before: f64,
    pub e1ph_before: f64,
    pub pairs_formed: f64,
    pub n_t: f64,
    pub e_t: f64,
    pub n1_after: f64,
    pub e1ph_after: f64,
    pub key_bits: f64,
    pub rate_per_pair: f64,
    pub bits_per_second: f64,
    pub clamped: bool,
    pub diagnostics: Vec<String>,
    pub effective: [[f64; 4]; 4],
    pub sent: [[f64; 4]; 4],
    /// Ground-truth untagged counts (Monte Carlo only; oracles only).
    pub truth_untagged_raw: Option<f64>,
    pub truth_untagged_survivors: Option<f64>,
}

/// Full scenario result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub duration_s: f64,
    pub total_loss_db: f64,
    pub plob_per_pair: f64,
    pub kept_fraction: f64,
    pub all_data: RateSection,
    /// Present for Monte Carlo runs (post-selected re-evaluation).
    pub post_selected: Option<RateSection>,
}

impl ScenarioReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.name);
        let _ = writeln!(s, "mode: {:?}   seed: {}", self.mode, self.seed);
        let _ = writeln!(s, "duration: {:.3} s", self.duration_s);
        let _ = writeln!(
            s,
            "total loss: {:.2} dB   PLOB bound: {:.4e} /pair",
            self.total_loss_db, self.plob_per_pair
        );
        let _ = writeln!(s, "kept-window fraction: {:.4}", self.kept_fraction);
        let mut section = |title: &str, r: &RateSection| {
            let _ = writeln!(s, "\n[{title}]");
            let _ = writeln!(s, "  pulse pairs: {:.4e}", r.n_pairs);
            let _ = writeln!(
                s,
                "  QBER_Z: {:.4}   QBER_X: {:.4}",
                r.qber_z, r.qber_x
            );
            let _ = writeln!(
                s,
                "  untagged before pairing: {:.4e} (e1ph {:.4})",
                r.n1_before, r.e1ph_before
            );
            let _ = writeln!(
                s,
                "  pairs: {:.4e}   survivors n_t: {:.4e}   E_t: {:.6}",
                r.pairs_formed, r.n_t, r.e_t
            );
            let _ = writeln!(
                s,
                "  untagged survivors n1: {:.4e} (e1ph {:.4})",
                r.n1_after, r.e1ph_after
            );
            let _ = writeln!(
                s,
                "  key: {:.4e} bits   R: {:.4e} /pair   {:.2} bps{}",
                r.key_bits,
                r.rate_per_pair,
                r.bits_per_second,
                if r.clamped { "   [clamped]" } else { "" }
            );
            let labels = ["v", "x", "y", "z"];
            let _ = writeln!(s, "  effective counts n_lr (rows: Alice, cols: Bob):");
            for (i, row) in r.effective.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.4e}")).collect();
                let _ = writeln!(s, "    {} | {}", labels[i], cells.join(" "));
            }
            for d in &r.diagnostics {
                let _ = writeln!(s, "  note: {d}");
            }
        };
        section("all data", &self.all_data);
        if let Some(ps) = &self.post_selected {
            section("post-selected", ps);
        }
        s
    }

    /// Machine-readable CSV: one row per section.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header = vec![
            "section".to_string(),
            "n_pairs".to_string(),
            "qber_z".to_string(),
            "qber_x".to_string(),
            "n1_before".to_string(),
            "e1ph_before".to_string(),
            "n_t".to_string(),
            "e_t".to_string(),
            "n1_after".to_string(),
            "e1ph_after".to_string(),
            "key_bits".to_string(),
            "rate_per_pair".to_string(),
            "bits_per_second".to_string(),
            "plob_per_pair".to_string(),
            "kept_fraction".to_string(),
        ];
        for l in ["v", "x", "y", "z"] {
            for r in ["v", "x", "y", "z"] {
                header.push(format!("n_{l}{r}"));
            }
        }
        let header_refs: Vec<&str> = header.iter().map(|h| h.as_str()).collect();
        let mut w = CsvWriter::create(path, &header_refs)?;
        let mut row = |name: &str, r: &RateSection| -> Result<()> {
            let mut fields = vec![
                name.to_string(),
                format!("{:.6e}", r.n_pairs),
                format!("{:.6}", r.qber_z),
                format!("{:.6}", r.qber_x),
                format!("{:.6e}", r.n1_before),
                format!("{:.6}", r.e1ph_before),
                format!("{:.6e}", r.n_t),
                format!("{:.6e}", r.e_t),
                format!("{:.6e}", r.n1_after),
                format!("{:.6}", r.e1ph_after),
                format!("{:.6e}", r.key_bits),
                format!("{:.6e}", r.rate_per_pair),
                format!("{:.4}", r.bits_per_second),
                format!("{:.6e}", self.plob_per_pair),
                format!("{:.6}", self.kept_fraction),
            ];
            for l in 0..4 {
                for c in 0..4 {
                    fields.push(format!("{:.6e}", r.effective[l][c]));
                }
            }
            w.write_row(&fields)
        };
        row("all", &self.all_data)?;
        if let Some(ps) = &self.post_selected {
            row("post_selected", ps)?;
        }
        w.finish()
    }
}

/// Run a scenario end to end and write its artifacts under `out_dir`
/// (reports/, traces/, sweeps/). Deterministic for a fixed seed.
pub fn run_scenario(scenario: &Scenario, out_dir: impl AsRef<Path>) -> Result<ScenarioReport> {
    scenario.validate()?;
    let out_dir = out_dir.as_ref();
    let report = match scenario.mode {
        Mode::Expected => run_expected(scenario)?,
        Mode::MonteCarlo => run_monte_carlo(scenario, out_dir)?,
    };
    let reports_dir = out_dir.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    write_text_atomic(
        reports_dir.join(format!("{}.txt", scenario.name)),
        &report.render_text(),
    )?;
    report.write_csv(reports_dir.join(format!("{}.csv", scenario.name)))?;
    Ok(report)
}

fn write_text_atomic(path: PathBuf, text: &str) -> Result<()> {
    let tmp = path.with_extension("txt.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

fn section_from_evaluation(
    eval: &crate::keyrate::ExpectedEvaluation,
    n_pairs: f64,
    duration_s: f64,
) -> RateSection {
    RateSection {
        n_pairs,
        qber_z: eval.qber_z,
        qber_x: eval.qber_x,
        n1_before: eval.decoy.n1_before,
        e1ph_before: eval.decoy.e1ph_before,
        pairs_formed: eval.pairs_formed,
        n_t: eval.aopp.n_t,
        e_t: eval.aopp.e_t,
        n1_after: eval.aopp.n1,
        e1ph_after: eval.aopp.e1_ph,
        key_bits: eval.output.key_bits,
        rate_per_pair: eval.output.rate,
        bits_per_second: eval.output.rate * n_pairs / duration_s,
        clamped: eval.output.clamped,
        diagnostics: eval.output.diagnostics.clone(),
        effective: eval.table.effective,
        sent: eval.table.sent,
        truth_untagged_raw: None,
        truth_untagged_survivors: None,
    }
}

fn run_expected(scenario: &Scenario) -> Result<ScenarioReport> {
    let n_pairs = scenario.total_pairs();
    let cond = SimConditions {
        n_pairs,
        ..scenario.conditions
    };
    let eval = expected_key_rate(
        &scenario.source,
        &cond,
        scenario.postselection.lambda,
        scenario.sigma_phase,
        scenario.inject_qber_x,
    )?;
    let duration = scenario.duration_s();
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        mode: Mode::Expected,
        seed: scenario.seed,
        duration_s: duration,
        total_loss_db: cond.total_loss_db(),
        plob_per_pair: plob_bound(10f64.powf(-cond.total_loss_db() / 10.0))?,
        kept_fraction: 1.0,
        all_data: section_from_evaluation(&eval, n_pairs, duration),
        post_selected: None,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo driver
// ---------------------------------------------------------------------------

/// Raw accumulation of one Monte Carlo run.
struct MonteCarloTallies {
    records: Vec<SiftedRecord>,
    estimates: WindowEstimates,
    sent: [[u64; 4]; 4],
    /// Accepted xx windows per efficiency window (denominator of the
    /// phase-flip error rate; binned so the post-selected evaluation can
    /// restrict to kept windows).
    accepted_xx_per_window: Vec<u64>,
    probe_counts: Vec<(u64, u64)>,
    low_confidence_windows: u64,
    phase_windows: u64,
}

fn run_monte_carlo(scenario: &Scenario, out_dir: &Path) -> Result<ScenarioReport> {
    let schedule = FrameSchedule::default();
    let n_pairs_req = scenario.total_pairs();
    let slots_per_frame = schedule.signal_slots_per_frame() as u64;
    let n_frames = ((n_pairs_req / slots_per_frame as f64).ceil() as u64).max(1);
    let n_pairs = (n_frames * slots_per_frame) as f64;
    let frames_per_window = (scenario.phase_window_us * 1000.0 / schedule.frame_ns as f64) as u64;
    let n_windows = n_frames.div_ceil(frames_per_window);
    let duration_ticks = n_frames as Ticks * schedule.frame_ticks() + schedule.frame_ticks();

    // Channel realization sampled on a 10 us grid.
    let sample_period: Ticks = 100_000;
    let traj = simulate_trajectory(
        &scenario.fading,
        &scenario.noise,
        duration_ticks,
        sample_period,
        scenario.seed,
    )?;

    let mc_cfg = scenario.measurement_config();
    mc_cfg.validate()?;
    let tallies = stream_frames(
        scenario,
        &schedule,
        &traj,
        &mc_cfg,
        n_frames,
        frames_per_window,
        n_windows,
    )?;

    // Efficiency post-selection from probe counts alone.
    let eff_window_ticks = scenario.postselection.window_ticks();
    let norm = probe_normalization(scenario, &schedule);
    let n_eff_windows =
        ((n_frames as Ticks * schedule.frame_ticks()) / eff_window_ticks).max(1) as usize;
    let mut counts = tallies.probe_counts.clone();
    counts.truncate(n_eff_windows);
    let windows = windows_from_counts(&counts, &scenario.postselection, &norm);
    let kept_fraction = if windows.is_empty() {
        1.0
    } else {
        windows.iter().filter(|w| w.kept).count() as f64 / windows.len() as f64
    };

    let qber = crate::sifting::compute_qbers(&tallies.records, &windows, &scenario.postselection)?;

    // Key-rate evaluation on all data and on the kept fraction.
    let kept_flags: Vec<bool> = windows.iter().map(|w| w.kept).collect();
    let in_kept = |r: &SiftedRecord| -> bool {
        let idx = (r.time / eff_window_ticks) as usize;
        idx < kept_flags.len() && kept_flags[idx]
    };
    let duration = scenario.duration_s();
    let accepted_xx_all: u64 = tallies.accepted_xx_per_window.iter().sum();
    let accepted_xx_kept: u64 = tallies
        .accepted_xx_per_window
        .iter()
        .zip(kept_flags.iter().chain(std::iter::repeat(&false)))
        .filter_map(|(&n, &k)| k.then_some(n))
        .sum();
    let mut all_section = evaluate_mc_section(
        scenario,
        &tallies,
        &qber,
        None,
        n_pairs,
        duration,
        accepted_xx_all as f64,
    )?;
    all_section.diagnostics.push(format!(
        "{} of {} phase windows low-confidence",
        tallies.low_confidence_windows, tallies.phase_windows
    ));
    let kept_section = evaluate_mc_section(
        scenario,
        &tallies,
        &qber,
        Some(&in_kept),
        n_pairs * kept_fraction,
        duration * kept_fraction,
        accepted_xx_kept as f64,
    )?;

    // Artifacts.
    let traces = out_dir.join("traces");
    std::fs::create_dir_all(&traces)?;
    write_decimated_trajectory(&traj, traces.join(format!("{}_trajectory.csv", scenario.name)))?;
    let estimates: Vec<crate::phase::PhaseEstimate> =
        tallies.estimates.iter().map(|(_, e)| *e).collect();
    crate::phase::write_phase_track(
        traces.join(format!("{}_phase_track.csv", scenario.name)),
        &estimates,
    )?;
    crate::sifting::write_sifted_csv(
        traces.join(format!("{}_sifted.csv", scenario.name)),
        &tallies.records,
    )?;
    crate::sifting::write_sifted_binary(
        traces.join(format!("{}_sifted.bin", scenario.name)),
        &tallies.records,
    )?;
    write_aggregate_trace(scenario, &tallies.records, traces.as_path())?;

    let cond = scenario.effective_conditions(n_pairs);
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        mode: Mode::MonteCarlo,
        seed: scenario.seed,
        duration_s: duration,
        total_loss_db: cond.total_loss_db(),
        plob_per_pair: plob_bound(10f64.powf(-cond.total_loss_db() / 10.0))?,
        kept_fraction,
        all_data: all_section,
        post_selected: Some(kept_section),
    })
}

fn probe_normalization(scenario: &Scenario, schedule: &FrameSchedule) -> ProbeNormalization {
    let frames_per_eff_window =
        scenario.postselection.window_ticks() as f64 / schedule.frame_ticks() as f64;
    let n_ref = schedule.reference_slots_per_frame() as f64;
    let n_sig = schedule.signal_slots_per_frame() as f64;
    let flux_per_frame = (n_ref * scenario.reference_intensity
        + n_sig * scenario.source.mean_signal_intensity())
        * scenario.fading.probe_tap_ratio
        * scenario.detectors.efficiency;
    let dead_slots = scenario.detectors.dead_time_ns / schedule.pulse_period_ns as f64;
    ProbeNormalization {
        unit_flux: flux_per_frame * frames_per_eff_window,
        slots_per_window: (n_ref + n_sig) * frames_per_eff_window,
        dead_slots_per_click: dead_slots,
    }
}

#[allow(clippy::too_many_arguments)]
fn stream_frames(
    scenario: &Scenario,
    schedule: &FrameSchedule,
    traj: &ChannelTrajectory,
    mc_cfg: &MeasurementConfig,
    n_frames: u64,
    frames_per_window: u64,
    n_windows: u64,
) -> Result<MonteCarloTallies> {
    let mut alice = terminal_stream(scenario.seed, Terminal::Alice);
    let mut bob = terminal_stream(scenario.seed, Terminal::Bob);
    let mut sampler = PairSampler::new(mc_cfg, schedule, scenario.seed);

    let preset = scenario.noise.preset_offset_hz;
    let lambda = scenario.postselection.lambda;
    let eff_window_ticks = scenario.postselection.window_ticks();
    let n_eff_windows =
        ((n_frames as Ticks * schedule.frame_ticks()) / eff_window_ticks + 1) as usize;

    let mut tallies = MonteCarloTallies {
        records: Vec::new(),
        estimates: WindowEstimates::default(),
        sent: [[0u64; 4]; 4],
        accepted_xx_per_window: vec![0; n_eff_windows],
        probe_counts: vec![(0u64, 0u64); n_eff_windows],
        low_confidence_windows: 0,
        phase_windows: n_windows,
    };

    // Per-phase-window buffers.
    let mut ref_events: Vec<RefEvent> = Vec::new();
    let mut window_records: Vec<SiftedRecord> = Vec::new();
    // (time, phi_a + beat, phi_b) of every xx slot in the window.
    let mut window_xx: Vec<(Ticks, f64, f64)> = Vec::new();

    for frame in 0..n_frames {
        let frame_a = draw_frame(&scenario.source, schedule, &mut alice);
        let frame_b = draw_frame(&scenario.source, schedule, &mut bob);

        for slot in 0..schedule.reference_slots_per_frame() {
            let t = schedule.reference_slot_time(frame, slot);
            let ch = traj.at(t);
            let beat = crate::phase::beat_phase(preset, t);
            let phi_a = frame_a.reference_phases[slot as usize];
            let phi_b = frame_b.reference_phases[slot as usize];
            let theta = phi_a - phi_b + ch.relative_phase + beat;
            let out = sampler.sample_reference_slot(t, theta, &ch);
            // The estimator's sine model is the cosine interferometer
            // response shifted by a quarter turn; fold the shift into the
            // known modulated phase so the estimate is directly the
            // channel's relative phase.
            let phi_mod = phi_a - phi_b + std::f64::consts::FRAC_PI_2;
            if out.click0 {
                ref_events.push(RefEvent {
                    time: out.t0,
                    channel: 0,
                    phi_mod,
                });
            }
            if out.click1 {
                ref_events.push(RefEvent {
                    time: out.t1,
                    channel: 1,
                    phi_mod,
                });
            }
            accumulate_probe(&mut tallies.probe_counts, eff_window_ticks, &out_probe(&out));
        }

        for slot in 0..schedule.signal_slots_per_frame() {
            let t = schedule.signal_slot_time(frame, slot);
            let ch = traj.at(t);
            let beat = crate::phase::beat_phase(preset, t);
            let la = frame_a.signal_labels[slot as usize];
            let lb = frame_b.signal_labels[slot as usize];
            let phi_a = frame_a.signal_phases[slot as usize];
            let phi_b = frame_b.signal_phases[slot as usize];
            let theta = phi_a - phi_b + ch.relative_phase + beat;
            let out = sampler.sample_signal_slot(
                t,
                scenario.source.intensity(la),
                scenario.source.intensity(lb),
                theta,
                &ch,
                scenario.conditions.ed_x,
            );
            tallies.sent[la.index()][lb.index()] += 1;
            accumulate_probe(
                &mut tallies.probe_counts,
                eff_window_ticks,
                &(out.probe_a, out.t_probe_a, out.probe_b, out.t_probe_b),
            );
            if la == IntensityLabel::X && lb == IntensityLabel::X {
                window_xx.push((t, phi_a + beat, phi_b));
            }
            if out.click0 != out.click1 {
                window_records.push(signal_record(
                    schedule,
                    frame,
                    slot,
                    la,
                    lb,
                    phi_a,
                    phi_b,
                    &out,
                    scenario.phase_window_ticks(),
                ));
            }
        }

        // Window boundary: estimate the phase, flag acceptance.
        if (frame + 1) % frames_per_window == 0 || frame + 1 == n_frames {
            finish_window(
                scenario,
                &mut tallies,
                &mut ref_events,
                &mut window_records,
                &mut window_xx,
                preset,
                lambda,
                eff_window_ticks,
            );
        }
    }
    Ok(tallies)
}

impl Scenario {
    fn phase_window_ticks(&self) -> Ticks {
        (self.phase_window_us * 1000.0) as Ticks * 10
    }
}

fn out_probe(out: &crate::measurement::RefOutcome) -> (bool, Ticks, bool, Ticks) {
    (out.probe_a, out.t_probe_a, out.probe_b, out.t_probe_b)
}

fn accumulate_probe(
    counts: &mut [(u64, u64)],
    window_ticks: Ticks,
    probe: &(bool, Ticks, bool, Ticks),
) {
    let (a, ta, b, tb) = *probe;
    if a {
        let idx = (ta / window_ticks) as usize;
        if idx < counts.len() {
            counts[idx].0 += 1;
        }
    }
    if b {
        let idx = (tb / window_ticks) as usize;
        if idx < counts.len() {
            counts[idx].1 += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn signal_record(
    schedule: &FrameSchedule,
    frame: u64,
    slot: u32,
    la: IntensityLabel,
    lb: IntensityLabel,
    phi_a: f64,
    phi_b: f64,
    out: &SignalOutcome,
    phase_window_ticks: Ticks,
) -> SiftedRecord {
    let (bit_a, bit_b, z_eligible) = bit_values(la, lb);
    let (click, time, origin) = if out.click0 {
        (Click::D0, out.t0, out.origin0)
    } else {
        (Click::D1, out.t1, out.origin1)
    };
    let untagged_truth = matches!(out.class, PairClass::OneSide { photons: 1, .. });
    SiftedRecord {
        slot_index: schedule.signal_slot_index(frame, slot),
        time,
        label_a: la,
        label_b: lb,
        phi_a,
        phi_b,
        click,
        window_id: (time / phase_window_ticks) as usize,
        accepted_x: false,
        x_error: None,
        bit_a,
        bit_b,
        z_eligible,
        origin,
        untagged_truth,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_window(
    scenario: &Scenario,
    tallies: &mut MonteCarloTallies,
    ref_events: &mut Vec<RefEvent>,
    window_records: &mut Vec<SiftedRecord>,
    window_xx: &mut Vec<(Ticks, f64, f64)>,
    preset: f64,
    lambda: f64,
    eff_window_ticks: Ticks,
) {
    let window_id = ref_events
        .first()
        .map(|e| (e.time / scenario.phase_window_ticks()) as usize)
        .or_else(|| {
            window_records
                .first()
                .map(|r| (r.time / scenario.phase_window_ticks()) as usize)
        });
    let estimate = estimate_phase(ref_events, preset, &scenario.phase_estimator).ok();
    if let (Some(id), Some(est)) = (window_id, estimate) {
        tallies.estimates.insert(id, est);
        if est.low_confidence {
            tallies.low_confidence_windows += 1;
        } else {
            // Count accepted xx windows and flag records now that the
            // window's phase is known.
            for &(t, phi_a_beat, phi_b) in window_xx.iter() {
                if crate::sifting::accept_x(phi_a_beat, phi_b, est.phi_c, lambda) {
                    let idx = (t / eff_window_ticks) as usize;
                    if idx < tallies.accepted_xx_per_window.len() {
                        tallies.accepted_xx_per_window[idx] += 1;
                    }
                }
            }
            for r in window_records.iter_mut() {
                let phi_a_eff = r.phi_a + crate::phase::beat_phase(preset, r.time);
                r.accepted_x = crate::sifting::accept_x(phi_a_eff, r.phi_b, est.phi_c, lambda);
                r.x_error = if r.accepted_x {
                    let aligned = (phi_a_eff - r.phi_b + est.phi_c).cos();
                    let expected = if aligned > 0.0 { Click::D0 } else { Click::D1 };
                    Some(r.click != expected)
                } else {
                    None
                };
            }
        }
    } else if window_id.is_some() {
        tallies.low_confidence_windows += 1;
    }
    tallies.records.append(window_records);
    ref_events.clear();
    window_xx.clear();
}

/// Assemble the count table and run the post-processing chain for one data
/// selection.
#[allow(clippy::too_many_arguments)]
fn evaluate_mc_section(
    scenario: &Scenario,
    tallies: &MonteCarloTallies,
    qber: &QberSummary,
    selection: Option<&dyn Fn(&SiftedRecord) -> bool>,
    n_pairs: f64,
    duration_s: f64,
    accepted_xx_windows: f64,
) -> Result<RateSection> {
    let select = |r: &SiftedRecord| selection.map_or(true, |f| f(r));
    let fraction = n_pairs / (tallies.sent.iter().flatten().sum::<u64>() as f64).max(1.0);

    let mut table = CountTable::default();
    for l in 0..4 {
        for r in 0..4 {
            // Source choices are independent of fading, so the kept
            // fraction scales the sent counts uniformly.
            table.sent[l][r] = tallies.sent[l][r] as f64 * fraction;
        }
    }
    let mut bits_a = Vec::new();
    let mut bits_b = Vec::new();
    let mut untagged_flags = Vec::new();
    let mut truth_untagged_raw = 0.0;
    for r in tallies.records.iter().filter(|r| select(r)) {
        table.effective[r.label_a.index()][r.label_b.index()] += 1.0;
        if r.label_a == IntensityLabel::X && r.label_b == IntensityLabel::X && r.accepted_x {
            table.accepted_xx_effective += 1.0;
            if r.x_error == Some(true) {
                table.accepted_xx_errors += 1.0;
            }
        }
        if r.z_eligible {
            bits_a.push(r.bit_a);
            bits_b.push(r.bit_b);
            untagged_flags.push(r.untagged_truth);
            if r.untagged_truth {
                truth_untagged_raw += 1.0;
            }
        }
    }
    table.accepted_xx_windows = accepted_xx_windows;

    let sec = SecurityParams::from_total(scenario.conditions.epsilon, scenario.conditions.f);
    let decoy: DecoyBounds = decoy_bounds(&table, &scenario.source, &scenario.conditions, &sec);

    let n0 = table.bob_zero_count();
    let n1 = table.bob_one_count();
    let (aopp_result, truth_survivors, pairs_formed) = if !bits_a.is_empty()
        && bits_b.iter().any(|&b| b == 0)
        && bits_b.iter().any(|&b| b == 1)
    {
        let outcome = aopp(&bits_a, &bits_b, scenario.seed)?;
        let truth = outcome
            .survivors
            .iter()
            .filter(|&&(i, j)| untagged_flags[i] && untagged_flags[j])
            .count() as f64;
        (
            propagate_aopp_bounds(&decoy, n0, n1, outcome.n_t as f64, outcome.e_t, &sec),
            truth,
            outcome.pairs_formed as f64,
        )
    } else {
        (
            AoppResult {
                n_t: 0.0,
                e_t: 0.0,
                n1: 0.0,
                e1_ph: 0.5,
            },
            0.0,
            0.0,
        )
    };

    let output: KeyRateOutput = key_rate(&aopp_result, &table, &sec, n_pairs)?;
    let (qber_z, qber_x) = if selection.is_some() {
        (qber.qber_z_kept(), qber.qber_x_kept())
    } else {
        (qber.qber_z(), qber.qber_x())
    };
    Ok(RateSection {
        n_pairs,
        qber_z,
        qber_x,
        n1_before: decoy.n1_before,
        e1ph_before: decoy.e1ph_before,
        pairs_formed,
        n_t: aopp_result.n_t,
        e_t: aopp_result.e_t,
        n1_after: aopp_result.n1,
        e1ph_after: aopp_result.e1_ph,
        key_bits: output.key_bits,
        rate_per_pair: output.rate,
        bits_per_second: output.rate * n_pairs / duration_s.max(1e-12),
        clamped: output.clamped,
        diagnostics: output.diagnostics,
        effective: table.effective,
        sent: table.sent,
        truth_untagged_raw: Some(truth_untagged_raw),
        truth_untagged_survivors: Some(truth_survivors),
    })
}

fn write_decimated_trajectory(traj: &ChannelTrajectory, path: PathBuf) -> Result<()> {
    let stride = (traj.len() / 20_000).max(1);
    let mut w = CsvWriter::create(
        path,
        &["time_s", "eff_a", "eff_b", "delta_phi_rad", "delta_nu_hz"],
    )?;
    let dt = traj.sample_period as f64 * 1e-10;
    for i in (0..traj.len()).step_by(stride) {
        w.write_row(&[
            format!("{:.9}", i as f64 * dt),
            format!("{:.6e}", traj.efficiency_a[i]),
            format!("{:.6e}", traj.efficiency_b[i]),
            format!("{:.6}", traj.relative_phase[i]),
            format!("{:.4}", traj.freq_offset_hz[i]),
        ])?;
    }
    w.finish()
}

/// Periodic aggregate of sifted rate and X error rate (Fig. 3a-style
/// trace, period configurable for desk-scale runs).
fn write_aggregate_trace(
    scenario: &Scenario,
    records: &[SiftedRecord],
    traces: &Path,
) -> Result<()> {
    let period_ticks = (scenario.aggregate_s * 1e10) as Ticks;
    if period_ticks <= 0 {
        return Ok(());
    }
    let mut w = CsvWriter::create(
        traces.join(format!("{}_aggregate.csv", scenario.name)),
        &["period_start_s", "sifted_bits", "x_events", "x_errors"],
    )?;
    use std::collections::BTreeMap;
    let mut bins: BTreeMap<Ticks, (u64, u64, u64)> = BTreeMap::new();
    for r in records {
        let bin = r.time / period_ticks;
        let e = bins.entry(bin).or_default();
        if r.z_eligible {
            e.0 += 1;
        }
        if r.accepted_x && r.label_a == IntensityLabel::X && r.label_b == IntensityLabel::X {
            e.1 += 1;
            if r.x_error == Some(true) {
                e.2 += 1;
            }
        }
    }
    for (bin, (sifted, xe, xerr)) in bins {
        w.write_row(&[
            format!("{:.3}", bin as f64 * scenario.aggregate_s),
            sifted.to_string(),
            xe.to_string(),
            xerr.to_string(),
        ])?;
    }
    w.finish()
}

// ---------------------------------------------------------------------------
// Loss sweep
// ---------------------------------------------------------------------------

/// One row of a rate-vs-loss sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepRow {
    pub total_loss_db: f64,
    /// Expected rate with the lower reference X error rate (0.07).
    pub rate_qx_low: f64,
    /// Expected rate with the higher reference X error rate (0.14).
    pub rate_qx_high: f64,
    pub plob: f64,
}

/// X error rates of the two reference curves.
pub const SWEEP_QX_LOW: f64 = 0.07;
pub const SWEEP_QX_HIGH: f64 = 0.14;

/// Evaluate the expected key rate across a grid of total losses (dB) for
/// the two reference X error rates, with the repeaterless bound alongside.
/// Points run in parallel; output order follows the grid.
pub fn sweep_loss(
    scenario: &Scenario,
    grid_db: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SweepRow>> {
    if scenario.mode != Mode::Expected {
        return Err(Error::config(
            "loss sweeps run in expected mode".to_string(),
        ));
    }
    if grid_db.is_empty() {
        return Err(Error::config("sweep grid is empty".to_string()));
    }
    scenario.validate()?;
    let n_pairs = scenario.total_pairs();
    let rows: Vec<Result<SweepRow>> = grid_db
        .par_iter()
        .map(|&loss| {
            let arm = (loss - scenario.conditions.eta_m_db) / 2.0;
            if arm < 0.0 {
                return Err(Error::config(format!(
                    "total loss {loss} dB below the measurement-module loss"
                )));
            }
            let cond = SimConditions {
                eta_a_db: arm,
                eta_b_db: arm,
                n_pairs,
                ..scenario.conditions
            };
            let rate_at = |qx: f64| -> Result<f64> {
                Ok(expected_key_rate(
                    &scenario.source,
                    &cond,
                    scenario.postselection.lambda,
                    scenario.sigma_phase,
                    Some(qx),
                )?
                .output
                .rate)
            };
            Ok(SweepRow {
                total_loss_db: loss,
                rate_qx_low: rate_at(SWEEP_QX_LOW)?,
                rate_qx_high: rate_at(SWEEP_QX_HIGH)?,
                plob: plob_bound(10f64.powf(-loss / 10.0))?,
            })
        })
        .collect();
    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<_>>()?;

    let sweeps = out_dir.as_ref().join("sweeps");
    std::fs::create_dir_all(&sweeps)?;
    let mut w = CsvWriter::create(
        sweeps.join(format!("{}_rate_vs_loss.csv", scenario.name)),
        &[
            "total_loss_db",
            "rate_qx_007",
            "rate_qx_014",
            "plob_per_pair",
        ],
    )?;
    for r in &rows {
        w.write_row(&[
            format!("{:.2}", r.total_loss_db),
            format!("{:.6e}", r.rate_qx_low),
            format!("{:.6e}", r.rate_qx_high),
            format!("{:.6e}", r.plob),
        ])?;
    }
    w.finish()?;
    Ok(rows)
}

/// Run the closed-loop frequency-calibration demo and write its log.
pub fn run_calibration_demo(
    scenario: &Scenario,
    rounds: usize,
    out_dir: impl AsRef<Path>,
) -> Result<(Vec<crate::sync::CalibrationRound>, f64)> {
    let cfg = crate::sync::CalibrationLoopConfig {
        rounds,
        ..crate::sync::CalibrationLoopConfig::default()
    };
    let log = crate::sync::run_calibration_loop(&scenario.noise, &scenario.fading, &cfg, scenario.seed);
    let sigma = crate::sync::residual_sigma(&log);
    let traces = out_dir.as_ref().join("traces");
    std::fs::create_dir_all(&traces)?;
    crate::sync::write_calibration_log(
        traces.join(format!("{}_calibration.csv", scenario.name)),
        &log,
    )?;
    Ok((log, sigma))
}
