//! Joining detection events back to pulse-pair metadata, effective-event
//! classification, the X-basis phase acceptance criterion, per-millisecond
//! efficiency post-selection from probe counts, and QBER accounting.
//!
//! Post-selection is decided solely from probe detections: the operation
//! receives nothing but probe events, so the interference outcomes cannot
//! leak into the keep/discard decision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvWriter;
use crate::measurement::{DetectionEvent, DetectorId, OriginKind};
use crate::phase::{beat_phase, PhaseEstimate};
use crate::protocol::{FrameSchedule, IntensityLabel, SlotKind, Ticks};

/// Post-selection and X-acceptance tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostSelectionParams {
    /// Efficiency-ratio threshold r_p: windows kept when the estimated
    /// ratio lies in [r_p, 1/r_p].
    pub ratio_threshold: f64,
    /// Efficiency estimation window, ms.
    pub window_ms: f64,
    /// X-basis tolerance: accept when 1 - |cos(phase)| < lambda.
    pub lambda: f64,
    /// Windows with fewer probe counts than this on either channel are
    /// unmeasurable and dropped.
    pub min_probe_counts: u64,
}

impl Default for PostSelectionParams {
    fn default() -> Self {
        PostSelectionParams {
            ratio_threshold: 0.23,
            window_ms: 1.0,
            lambda: 0.07,
            min_probe_counts: 10,
        }
    }
}

impl PostSelectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio_threshold) || self.ratio_threshold == 0.0 {
            return Err(Error::config(format!(
                "ratio_threshold {} outside (0, 1]",
                self.ratio_threshold
            )));
        }
        if self.window_ms <= 0.0 {
            return Err(Error::config("window_ms must be > 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || self.lambda == 0.0 {
            return Err(Error::config(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        Ok(())
    }

    pub fn window_ticks(&self) -> Ticks {
        (self.window_ms * 1e6) as Ticks * 10
    }
}

/// Which interference detector clicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Click {
    D0,
    D1,
}

/// Pulse-pair metadata of one signal slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeta {
    pub label_a: IntensityLabel,
    pub label_b: IntensityLabel,
    pub phi_a: f64,
    pub phi_b: f64,
}

/// One effective event joined with its pulse-pair metadata.
#[derive(Debug, Clone, Copy)]
pub struct SiftedRecord {
    pub slot_index: u64,
    pub time: Ticks,
    pub label_a: IntensityLabel,
    pub label_b: IntensityLabel,
    pub phi_a: f64,
    pub phi_b: f64,
    pub click: Click,
    /// Phase-estimation window this record belongs to.
    pub window_id: usize,
    pub accepted_x: bool,
    /// For accepted X events: whether the click landed on the wrong
    /// detector given the aligned phase.
    pub x_error: Option<bool>,
    pub bit_a: u8,
    pub bit_b: u8,
    /// Both labels in {v, y, z} (x windows are announced and excluded from
    /// the raw key).
    pub z_eligible: bool,
    /// Simulator-truth tag; never read by protocol logic.
    pub origin: OriginKind,
    /// Simulator-truth tag: exactly one side sent and its pulse carried a
    /// single photon. Only the streaming Monte Carlo runner can set this
    /// (event-level classification has no photon-number access).
    pub untagged_truth: bool,
}

/// Raw-key bit mapping: Alice takes v as 0 and y/z as 1; Bob takes v as 1
/// and y/z as 0, so exactly-one-sender events agree.
pub fn bit_values(label_a: IntensityLabel, label_b: IntensityLabel) -> (u8, u8, bool) {
    let z_eligible = label_a != IntensityLabel::X && label_b != IntensityLabel::X;
    let bit_a = if label_a == IntensityLabel::V { 0 } else { 1 };
    let bit_b = if label_b == IntensityLabel::V { 1 } else { 0 };
    (bit_a, bit_b, z_eligible)
}

/// Classify detection events into effective events: one record per signal
/// slot in which exactly one interference detector clicked. Double clicks
/// and reference/gap-slot clicks are excluded; probe events are ignored.
///
/// `meta` resolves the global signal-slot index to the pulse-pair
/// metadata; events must already be slot-aligned (see `sync`).
pub fn classify_effective(
    events: &[DetectionEvent],
    schedule: &FrameSchedule,
    phase_window_ticks: Ticks,
    meta: &dyn Fn(u64) -> Option<PairMeta>,
) -> Result<Vec<SiftedRecord>> {
    use std::collections::BTreeMap;
    let mut per_slot: BTreeMap<u64, Vec<(Click, Ticks, OriginKind)>> = BTreeMap::new();
    for e in events {
        let click = match e.detector {
            DetectorId::D0 => Click::D0,
            DetectorId::D1 => Click::D1,
            _ => continue,
        };
        let slot = schedule.slot_of(e.time);
        if slot.kind != SlotKind::Signal {
            continue;
        }
        let idx = schedule.signal_slot_index(slot.frame, slot.slot);
        per_slot.entry(idx).or_default().push((click, e.time, e.origin));
    }
    let mut records = Vec::with_capacity(per_slot.len());
    for (idx, clicks) in per_slot {
        if clicks.len() != 1 {
            continue; // double click: not an effective event
        }
        let (click, time, origin) = clicks[0];
        let m = meta(idx).ok_or_else(|| {
            Error::Pipeline(format!("no pulse-pair metadata for signal slot {idx}"))
        })?;
        let (bit_a, bit_b, z_eligible) = bit_values(m.label_a, m.label_b);
        records.push(SiftedRecord {
            slot_index: idx,
            time,
            label_a: m.label_a,
            label_b: m.label_b,
            phi_a: m.phi_a,
            phi_b: m.phi_b,
            click,
            window_id: (time / phase_window_ticks) as usize,
            accepted_x: false,
            x_error: None,
            bit_a,
            bit_b,
            z_eligible,
            origin,
            untagged_truth: false,
        });
    }
    Ok(records)
}

/// X-basis acceptance criterion: `1 - |cos(phi_a - phi_b + phi_c)| < lambda`.
pub fn accept_x(phi_a: f64, phi_b: f64, phi_c: f64, lambda: f64) -> bool {
    1.0 - (phi_a - phi_b + phi_c).cos().abs() < lambda
}

/// Phase estimates indexed by window id.
#[derive(Debug, Default, Clone)]
pub struct WindowEstimates {
    map: std::collections::BTreeMap<usize, PhaseEstimate>,
}

impl WindowEstimates {
    pub fn insert(&mut self, window_id: usize, est: PhaseEstimate) {
        self.map.insert(window_id, est);
    }

    pub fn get(&self, window_id: usize) -> Option<&PhaseEstimate> {
        self.map.get(&window_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &PhaseEstimate)> {
        self.map.iter()
    }
}

/// Apply the phase acceptance to every record using the per-window phase
/// estimates. Records in windows without a confident estimate stay
/// excluded from X statistics. The heterodyne beat at the slot time is
/// part of Alice's known rotating frame and enters through her phase.
pub fn apply_phase_acceptance(
    records: &mut [SiftedRecord],
    estimates: &WindowEstimates,
    delta_nu_hz: f64,
    lambda: f64,
) {
    for r in records.iter_mut() {
        let est = match estimates.get(r.window_id) {
            Some(e) if !e.low_confidence => e,
            _ => {
                r.accepted_x = false;
                r.x_error = None;
                continue;
            }
        };
        let phi_a_eff = r.phi_a + beat_phase(delta_nu_hz, r.time);
        r.accepted_x = accept_x(phi_a_eff, r.phi_b, est.phi_c, lambda);
        r.x_error = if r.accepted_x {
            let aligned = (phi_a_eff - r.phi_b + est.phi_c).cos();
            let expected = if aligned > 0.0 { Click::D0 } else { Click::D1 };
            Some(r.click != expected)
        } else {
            None
        };
    }
}

/// Per-window transmittance estimate from probe counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyWindow {
    pub start: Ticks,
    pub probe_counts_a: u64,
    pub probe_counts_b: u64,
    pub eta_hat_a: f64,
    pub eta_hat_b: f64,
    pub kept: bool,
}

/// Probe-count normalization: converts window counts to transmittance
/// estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeNormalization {
    /// Expected probe detections per window at unit channel transmittance.
    pub unit_flux: f64,
    /// Gated probe slots per window (0 disables the saturation
    /// correction).
    pub slots_per_window: f64,
    /// Slots blinded per click by the detector dead time.
    pub dead_slots_per_click: f64,
}

impl ProbeNormalization {
    pub fn linear(unit_flux: f64) -> ProbeNormalization {
        ProbeNormalization {
            unit_flux,
            slots_per_window: 0.0,
            dead_slots_per_click: 0.0,
        }
    }

    /// Transmittance estimate from a window's click count. With slot
    /// accounting enabled, the count is first corrected for dead-time
    /// blinding (live-slot normalization) and then inverted through the
    /// per-slot Poisson click probability, which keeps the estimate linear
    /// in flux well into saturation.
    pub fn eta_hat(&self, counts: u64) -> f64 {
        let m = counts as f64;
        if self.slots_per_window <= 0.0 {
            return m / self.unit_flux;
        }
        let live = (self.slots_per_window - m * self.dead_slots_per_click)
            .max(self.slots_per_window * 1e-3);
        let p = (m / live).min(0.999);
        let mean_per_slot = -(-p).ln_1p();
        mean_per_slot * self.slots_per_window / self.unit_flux
    }
}

/// Build efficiency windows from per-window probe counts.
pub fn windows_from_counts(
    counts: &[(u64, u64)],
    params: &PostSelectionParams,
    norm: &ProbeNormalization,
) -> Vec<EfficiencyWindow> {
    let window_ticks = params.window_ticks();
    counts
        .iter()
        .enumerate()
        .map(|(i, &(ca, cb))| {
            let eta_a = norm.eta_hat(ca);
            let eta_b = norm.eta_hat(cb);
            let measurable = ca >= params.min_probe_counts && cb >= params.min_probe_counts;
            let kept = if measurable {
                let ratio = eta_a / eta_b;
                ratio >= params.ratio_threshold && ratio <= 1.0 / params.ratio_threshold
            } else {
                false
            };
            EfficiencyWindow {
                start: i as Ticks * window_ticks,
                probe_counts_a: ca,
                probe_counts_b: cb,
                eta_hat_a: eta_a,
                eta_hat_b: eta_b,
                kept,
            }
        })
        .collect()
}

/// Estimate per-window efficiencies from probe counts and flag the windows
/// whose ratio lies within [r_p, 1/r_p]. The operation sees probe events
/// only, so the interference outcomes cannot influence the selection.
pub fn post_select_windows(
    probe_events: &[DetectionEvent],
    n_windows: usize,
    params: &PostSelectionParams,
    norm: &ProbeNormalization,
) -> Vec<EfficiencyWindow> {
    let window_ticks = params.window_ticks();
    let mut counts = vec![(0u64, 0u64); n_windows];
    for e in probe_events {
        let idx = (e.time / window_ticks) as usize;
        if idx >= n_windows {
            continue;
        }
        match e.detector {
            DetectorId::ProbeA => counts[idx].0 += 1,
            DetectorId::ProbeB => counts[idx].1 += 1,
            _ => {}
        }
    }
    windows_from_counts(&counts, params, norm)
}

/// QBER summary before and after efficiency post-selection.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct QberSummary {
    pub z_events: u64,
    pub z_errors: u64,
    pub x_events: u64,
    pub x_errors: u64,
    pub z_events_kept: u64,
    pub z_errors_kept: u64,
    pub x_events_kept: u64,
    pub x_errors_kept: u64,
    pub kept_window_fraction: f64,
}

impl QberSummary {
    pub fn qber_z(&self) -> f64 {
        self.z_errors as f64 / self.z_events.max(1) as f64
    }

    pub fn qber_x(&self) -> f64 {
        self.x_errors as f64 / self.x_events.max(1) as f64
    }

    pub fn qber_z_kept(&self) -> f64 {
        self.z_errors_kept as f64 / self.z_events_kept.max(1) as f64
    }

    pub fn qber_x_kept(&self) -> f64 {
        self.x_errors_kept as f64 / self.x_events_kept.max(1) as f64
    }
}

/// Compute Z/X error rates over all records and over records inside kept
/// efficiency windows. Z errors follow the complementary bit mapping
/// (disagreeing bits), X errors are wrong-detector outcomes among accepted
/// xx events.
pub fn compute_qbers(
    records: &[SiftedRecord],
    windows: &[EfficiencyWindow],
    params: &PostSelectionParams,
) -> Result<QberSummary> {
    if records.is_empty() {
        return Err(Error::UndefinedStatistics(
            "no sifted records to compute QBERs from".to_string(),
        ));
    }
    let window_ticks = params.window_ticks();
    let kept: Vec<bool> = windows.iter().map(|w| w.kept).collect();
    let mut s = QberSummary {
        kept_window_fraction: if windows.is_empty() {
            1.0
        } else {
            kept.iter().filter(|&&k| k).count() as f64 / windows.len() as f64
        },
        ..QberSummary::default()
    };
    for r in records {
        let in_kept = if windows.is_empty() {
            true
        } else {
            let idx = (r.time / window_ticks) as usize;
            idx < kept.len() && kept[idx]
        };
        if r.z_eligible {
            let err = r.bit_a != r.bit_b;
            s.z_events += 1;
            s.z_errors += err as u64;
            if in_kept {
                s.z_events_kept += 1;
                s.z_errors_kept += err as u64;
            }
        }
        if r.label_a == IntensityLabel::X && r.label_b == IntensityLabel::X && r.accepted_x {
            let err = r.x_error.unwrap_or(false);
            s.x_events += 1;
            s.x_errors += err as u64;
            if in_kept {
                s.x_events_kept += 1;
                s.x_errors_kept += err as u64;
            }
        }
    }
    Ok(s)
}

/// Export sifted records as CSV.
pub fn write_sifted_csv(
    path: impl AsRef<std::path::Path>,
    records: &[SiftedRecord],
) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "slot_index",
            "time_ticks",
            "label_a",
            "label_b",
            "phi_a",
            "phi_b",
            "click",
            "window_id",
            "accepted_x",
            "x_error",
            "bit_a",
            "bit_b",
        ],
    )?;
    for r in records {
        w.write_row(&[
            r.slot_index.to_string(),
            r.time.to_string(),
            r.label_a.as_str().to_string(),
            r.label_b.as_str().to_string(),
            format!("{:.6}", r.phi_a),
            format!("{:.6}", r.phi_b),
            format!("{:?}", r.click),
            r.window_id.to_string(),
            (r.accepted_x as u8).to_string(),
            r.x_error.map_or("-".to_string(), |e| (e as u8).to_string()),
            r.bit_a.to_string(),
            r.bit_b.to_string(),
        ])?;
    }
    w.finish()
}

/// Compact binary export of sifted records: an 8-byte header then 9-byte
/// records of (slot_index u64 LE, packed flags u8: label_a bits 0-1,
/// label_b bits 2-3, click bit 4, accepted_x bit 5, x_error bit 6,
/// z_eligible bit 7).
pub fn write_sifted_binary(
    path: impl AsRef<std::path::Path>,
    records: &[SiftedRecord],
) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(b"TFSR")?;
        f.write_all(&1u16.to_le_bytes())?;
        f.write_all(&[0u8; 2])?;
        for r in records {
            f.write_all(&r.slot_index.to_le_bytes())?;
            let packed = (r.label_a.index() as u8)
                | ((r.label_b.index() as u8) << 2)
                | (((r.click == Click::D1) as u8) << 4)
                | ((r.accepted_x as u8) << 5)
                | ((r.x_error.unwrap_or(false) as u8) << 6)
                | ((r.z_eligible as u8) << 7);
            f.write_all(&[packed])?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
