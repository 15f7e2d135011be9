//! Shared domain types, the frame/timing schedule, and random pulse-train
//! generation for the two encoding terminals.
//!
//! All timestamps are integer ticks of 0.1 ns (the TDC resolution), so
//! frame arithmetic is exact for arbitrarily long runs.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_stream, StreamRole};

/// Timestamp/duration in TDC ticks of 0.1 ns.
pub type Ticks = i64;

/// Ticks per nanosecond (TDC resolution 0.1 ns).
pub const TICKS_PER_NS: Ticks = 10;

/// Number of distinct signal encoding phases (k*pi/8, k = 0..15).
pub const SIGNAL_PHASE_COUNT: u32 = 16;

/// Number of distinct reference phases (0, pi/2, pi, 3pi/2).
pub const REFERENCE_PHASE_COUNT: u32 = 4;

/// Encoding terminal identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminal {
    Alice,
    Bob,
}

/// Intensity label of a signal pulse: the vacuum source `v` plus the three
/// weak coherent state sources `x`, `y`, `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntensityLabel {
    V,
    X,
    Y,
    Z,
}

impl IntensityLabel {
    pub const ALL: [IntensityLabel; 4] = [
        IntensityLabel::V,
        IntensityLabel::X,
        IntensityLabel::Y,
        IntensityLabel::Z,
    ];

    /// Stable index used for count tables.
    pub fn index(self) -> usize {
        match self {
            IntensityLabel::V => 0,
            IntensityLabel::X => 1,
            IntensityLabel::Y => 2,
            IntensityLabel::Z => 3,
        }
    }

    pub fn from_index(i: usize) -> IntensityLabel {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntensityLabel::V => "v",
            IntensityLabel::X => "x",
            IntensityLabel::Y => "y",
            IntensityLabel::Z => "z",
        }
    }
}

/// Intensities and selection probabilities of the four sources.
///
/// The vacuum source has intensity 0 by definition and its probability is
/// the complement `p_v = 1 - p_x - p_y - p_z`. The same parameters apply
/// to both terminals (symmetric protocol).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub mu_z: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
}

impl Default for SourceParams {
    /// Reference operating point for a ~30 dB-per-arm link (the optimized
    /// working point used throughout the test suites).
    fn default() -> Self {
        SourceParams {
            mu_x: 0.030,
            mu_y: 0.483,
            mu_z: 0.494,
            p_x: 0.063,
            p_y: 0.209,
            p_z: 0.053,
        }
    }
}

impl SourceParams {
    pub fn new(mu_x: f64, mu_y: f64, mu_z: f64, p_x: f64, p_y: f64, p_z: f64) -> Result<Self> {
        let params = SourceParams {
            mu_x,
            mu_y,
            mu_z,
            p_x,
            p_y,
            p_z,
        };
        params.validate()?;
        Ok(params)
    }

    /// Check the source invariants: `0 < mu_x < mu_y <= mu_z` and all four
    /// probabilities in [0, 1].
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_x > 0.0 && self.mu_x < self.mu_y && self.mu_y <= self.mu_z) {
            return Err(Error::config(format!(
                "source intensities must satisfy 0 < mu_x < mu_y <= mu_z, got ({}, {}, {})",
                self.mu_x, self.mu_y, self.mu_z
            )));
        }
        for (name, p) in [("p_x", self.p_x), ("p_y", self.p_y), ("p_z", self.p_z)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let p_v = self.p_v();
        if !(0.0..=1.0).contains(&p_v) {
            return Err(Error::config(format!(
                "p_x + p_y + p_z = {} exceeds 1",
                self.p_x + self.p_y + self.p_z
            )));
        }
        Ok(())
    }

    pub fn p_v(&self) -> f64 {
        1.0 - self.p_x - self.p_y - self.p_z
    }

    pub fn intensity(&self, label: IntensityLabel) -> f64 {
        match label {
            IntensityLabel::V => 0.0,
            IntensityLabel::X => self.mu_x,
            IntensityLabel::Y => self.mu_y,
            IntensityLabel::Z => self.mu_z,
        }
    }

    pub fn probability(&self, label: IntensityLabel) -> f64 {
        match label {
            IntensityLabel::V => self.p_v(),
            IntensityLabel::X => self.p_x,
            IntensityLabel::Y => self.p_y,
            IntensityLabel::Z => self.p_z,
        }
    }

    /// Mean photon number of a signal pulse averaged over source choice.
    pub fn mean_signal_intensity(&self) -> f64 {
        self.p_x * self.mu_x + self.p_y * self.mu_y + self.p_z * self.mu_z
    }

    /// Draw an intensity label with probabilities (p_v, p_x, p_y, p_z).
    pub fn draw_label(&self, rng: &mut impl Rng) -> IntensityLabel {
        let u: f64 = rng.random();
        if u < self.p_x {
            IntensityLabel::X
        } else if u < self.p_x + self.p_y {
            IntensityLabel::Y
        } else if u < self.p_x + self.p_y + self.p_z {
            IntensityLabel::Z
        } else {
            IntensityLabel::V
        }
    }
}

/// Link and post-processing conditions for an operating point.
///
/// The dB fields describe the mean attenuation of each arm (`eta_a_db`,
/// `eta_b_db`) and of the measurement module at the middle node
/// (`eta_m_db`). A photon from either terminal traverses its own arm plus
/// the measurement module, so the per-arm detection-path transmittance is
/// `10^-((eta_arm + eta_m)/10)`, while the total loss quoted against the
/// repeaterless bound is `eta_a_db + eta_b_db + eta_m_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConditions {
    /// Dark count probability per pulse per detector.
    pub d0: f64,
    /// X-basis misalignment probability.
    pub ed_x: f64,
    /// Mean channel attenuation Alice -> node, dB.
    pub eta_a_db: f64,
    /// Mean channel attenuation Bob -> node, dB.
    pub eta_b_db: f64,
    /// Measurement-module attenuation, dB.
    pub eta_m_db: f64,
    /// Error-correction inefficiency factor.
    pub f: f64,
    /// Total security failure probability.
    pub epsilon: f64,
    /// Total number of pulse pairs.
    pub n_pairs: f64,
}

impl Default for SimConditions {
    /// Conditions of the reference optimization point (27 dB per arm,
    /// 3 dB measurement module, 1e12 pairs).
    fn default() -> Self {
        SimConditions {
            d0: 4e-8,
            ed_x: 0.05,
            eta_a_db: 27.0,
            eta_b_db: 27.0,
            eta_m_db: 3.0,
            f: 1.10,
            epsilon: 1e-10,
            n_pairs: 1e12,
        }
    }
}

impl SimConditions {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("d0", self.d0), ("ed_x", self.ed_x), ("epsilon", self.epsilon)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, db) in [
            ("eta_a_db", self.eta_a_db),
            ("eta_b_db", self.eta_b_db),
            ("eta_m_db", self.eta_m_db),
        ] {
            if db < 0.0 {
                return Err(Error::config(format!("{name} = {db} must be >= 0 dB")));
            }
        }
        if self.f < 1.0 {
            return Err(Error::config(format!(
                "error-correction inefficiency f = {} must be >= 1",
                self.f
            )));
        }
        if self.n_pairs < 1.0 {
            return Err(Error::config("n_pairs must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Linear detection-path transmittance of Alice's arm (channel plus
    /// measurement module).
    pub fn arm_transmittance_a(&self) -> f64 {
        10f64.powf(-(self.eta_a_db + self.eta_m_db) / 10.0)
    }

    /// Linear detection-path transmittance of Bob's arm.
    pub fn arm_transmittance_b(&self) -> f64 {
        10f64.powf(-(self.eta_b_db + self.eta_m_db) / 10.0)
    }

    /// Total loss in dB used for repeaterless-bound comparisons.
    pub fn total_loss_db(&self) -> f64 {
        self.eta_a_db + self.eta_b_db + self.eta_m_db
    }
}

/// Timing structure of one encoding frame: a block of strong reference
/// pulses, a recovery gap, then the quantum signal block, all on a common
/// 10 ns pulse grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSchedule {
    pub frame_ns: u32,
    pub reference_ns: u32,
    pub gap_ns: u32,
    pub signal_ns: u32,
    pub pulse_period_ns: u32,
    pub signal_pulse_width_ns: u32,
    pub reference_pulse_width_ns: u32,
}

impl Default for FrameSchedule {
    fn default() -> Self {
        FrameSchedule {
            frame_ns: 4000,
            reference_ns: 1400,
            gap_ns: 50,
            signal_ns: 2550,
            pulse_period_ns: 10,
            signal_pulse_width_ns: 1,
            reference_pulse_width_ns: 10,
        }
    }
}

impl FrameSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.reference_ns + self.gap_ns + self.signal_ns != self.frame_ns {
            return Err(Error::config(format!(
                "reference ({}) + gap ({}) + signal ({}) != frame ({})",
                self.reference_ns, self.gap_ns, self.signal_ns, self.frame_ns
            )));
        }
        if self.pulse_period_ns == 0
            || self.reference_ns % self.pulse_period_ns != 0
            || self.signal_ns % self.pulse_period_ns != 0
        {
            return Err(Error::config(
                "reference and signal blocks must be whole numbers of pulse periods".to_string(),
            ));
        }
        if self.signal_pulse_width_ns > self.pulse_period_ns
            || self.reference_pulse_width_ns > self.pulse_period_ns
        {
            return Err(Error::config(
                "pulse widths cannot exceed the pulse period".to_string(),
            ));
        }
        Ok(())
    }

    pub fn frame_ticks(&self) -> Ticks {
        self.frame_ns as Ticks * TICKS_PER_NS
    }

    pub fn pulse_period_ticks(&self) -> Ticks {
        self.pulse_period_ns as Ticks * TICKS_PER_NS
    }

    pub fn signal_slots_per_frame(&self) -> u32 {
        self.signal_ns / self.pulse_period_ns
    }

    pub fn reference_slots_per_frame(&self) -> u32 {
        self.reference_ns / self.pulse_period_ns
    }

    /// Fraction of the frame occupied by signal pulses (0.6375 by default).
    pub fn signal_fraction(&self) -> f64 {
        self.signal_ns as f64 / self.frame_ns as f64
    }

    /// Signal pulse repetition rate in pulses per second (within the signal
    /// block, i.e. before the duty-cycle factor).
    pub fn pulse_rate_hz(&self) -> f64 {
        1e9 / self.pulse_period_ns as f64
    }

    /// Mean signal pulse pairs emitted per second including the frame duty
    /// cycle.
    pub fn signal_pairs_per_second(&self) -> f64 {
        self.signal_slots_per_frame() as f64 / (self.frame_ns as f64 * 1e-9)
    }

    /// Emission time of reference slot `slot` in frame `frame`.
    pub fn reference_slot_time(&self, frame: u64, slot: u32) -> Ticks {
        frame as Ticks * self.frame_ticks() + slot as Ticks * self.pulse_period_ticks()
    }

    /// Emission time of signal slot `slot` in frame `frame`.
    pub fn signal_slot_time(&self, frame: u64, slot: u32) -> Ticks {
        frame as Ticks * self.frame_ticks()
            + (self.reference_ns + self.gap_ns) as Ticks * TICKS_PER_NS
            + slot as Ticks * self.pulse_period_ticks()
    }

    /// Global signal-slot index (counting signal slots only) of frame/slot.
    pub fn signal_slot_index(&self, frame: u64, slot: u32) -> u64 {
        frame * self.signal_slots_per_frame() as u64 + slot as u64
    }

    /// Classify an absolute timestamp into a slot.
    ///
    /// Reference slots gate over their full width, so flooring applies.
    /// Signal clicks sit inside a narrow gate at the slot start; assignment
    /// rounds to the nearest gate center so residual synchronization error
    /// below half a pulse period never flips the slot.
    pub fn slot_of(&self, t: Ticks) -> SlotRef {
        let frame_ticks = self.frame_ticks();
        let frame = t.div_euclid(frame_ticks) as u64;
        let within = t.rem_euclid(frame_ticks);
        let ref_end = self.reference_ns as Ticks * TICKS_PER_NS;
        let sig_start = (self.reference_ns + self.gap_ns) as Ticks * TICKS_PER_NS;
        let period = self.pulse_period_ticks();
        if within < ref_end {
            SlotRef {
                frame,
                kind: SlotKind::Reference,
                slot: (within / period) as u32,
            }
        } else if within >= sig_start - period / 2 {
            let gate_center = self.signal_pulse_width_ns as Ticks * TICKS_PER_NS / 2;
            let rel = within - sig_start - gate_center;
            let slot = ((rel + period / 2).div_euclid(period))
                .clamp(0, self.signal_slots_per_frame() as Ticks - 1) as u32;
            SlotRef {
                frame,
                kind: SlotKind::Signal,
                slot,
            }
        } else {
            SlotRef {
                frame,
                kind: SlotKind::Gap,
                slot: 0,
            }
        }
    }
}

/// Slot classification of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub frame: u64,
    pub kind: SlotKind,
    pub slot: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Reference,
    Gap,
    Signal,
}

/// Kind of emitted pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseKind {
    Signal,
    Reference,
}

/// One emitted pulse: when, from whom, what intensity and encoding phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseRecord {
    pub emit_time: Ticks,
    pub terminal: Terminal,
    pub kind: PulseKind,
    /// Intensity label; `None` for reference pulses.
    pub label: Option<IntensityLabel>,
    /// Encoding phase in radians. Signal: k*pi/8, reference: quadrant phases.
    pub phase: f64,
    /// Mean photon number of the pulse.
    pub intensity: f64,
}

/// Modulation of one frame for one terminal, in emission order. Produced
/// pulse-by-pulse so arbitrarily long trains never materialize in memory.
#[derive(Debug, Clone)]
pub struct FrameModulation {
    /// Reference phase per reference slot.
    pub reference_phases: Vec<f64>,
    /// Intensity label per signal slot.
    pub signal_labels: Vec<IntensityLabel>,
    /// Encoding phase per signal slot.
    pub signal_phases: Vec<f64>,
}

/// Draw the modulation of one frame from the terminal's RNG stream.
pub fn draw_frame(
    params: &SourceParams,
    schedule: &FrameSchedule,
    rng: &mut impl Rng,
) -> FrameModulation {
    let n_ref = schedule.reference_slots_per_frame() as usize;
    let n_sig = schedule.signal_slots_per_frame() as usize;
    let mut reference_phases = Vec::with_capacity(n_ref);
    for _ in 0..n_ref {
        let q: u32 = rng.random_range(0..REFERENCE_PHASE_COUNT);
        reference_phases.push(q as f64 * PI / 2.0);
    }
    let mut signal_labels = Vec::with_capacity(n_sig);
    let mut signal_phases = Vec::with_capacity(n_sig);
    for _ in 0..n_sig {
        signal_labels.push(params.draw_label(rng));
        let k: u32 = rng.random_range(0..SIGNAL_PHASE_COUNT);
        signal_phases.push(k as f64 * PI / 8.0);
    }
    FrameModulation {
        reference_phases,
        signal_labels,
        signal_phases,
    }
}

/// Per-terminal RNG stream for pulse modulation, derived from the master
/// seed so Alice's and Bob's trains are independently reproducible.
pub fn terminal_stream(master_seed: u64, terminal: Terminal) -> rand_chacha::ChaCha12Rng {
    let role = match terminal {
        Terminal::Alice => StreamRole::AliceSource,
        Terminal::Bob => StreamRole::BobSource,
    };
    derive_stream(master_seed, role, 0)
}

/// Generate the pulse train of one terminal for `n_frames` frames.
///
/// Each frame contributes the reference slots (contiguous 10 ns pulses with
/// independently drawn quadrant phases) followed by the signal slots with
/// i.i.d. intensity labels and 16-ary phases. Deterministic given the seed.
pub fn generate_pulse_train(
    params: &SourceParams,
    schedule: &FrameSchedule,
    terminal: Terminal,
    n_frames: u64,
    seed: u64,
) -> Result<Vec<PulseRecord>> {
    if n_frames == 0 {
        return Err(Error::config("n_frames must be >= 1".to_string()));
    }
    params.validate()?;
    schedule.validate()?;

    let mut rng = terminal_stream(seed, terminal);
    let per_frame =
        (schedule.reference_slots_per_frame() + schedule.signal_slots_per_frame()) as usize;
    let mut train = Vec::with_capacity(per_frame * n_frames as usize);
    // Reference intensity is a measurement-side model parameter; the train
    // records carry the phase and timing, intensity is filled by the caller
    // when interfering (see `measurement`). Here reference pulses carry the
    // conventional placeholder 1.0.
    for frame in 0..n_frames {
        let m = draw_frame(params, schedule, &mut rng);
        for (slot, &phase) in m.reference_phases.iter().enumerate() {
            train.push(PulseRecord {
                emit_time: schedule.reference_slot_time(frame, slot as u32),
                terminal,
                kind: PulseKind::Reference,
                label: None,
                phase,
                intensity: 1.0,
            });
        }
        for (slot, (&label, &phase)) in m.signal_labels.iter().zip(&m.signal_phases).enumerate() {
            train.push(PulseRecord {
                emit_time: schedule.signal_slot_time(frame, slot as u32),
                terminal,
                kind: PulseKind::Signal,
                label: Some(label),
                phase,
                intensity: params.intensity(label),
            });
        }
    }
    Ok(train)
}

/// Binary Shannon entropy H(x) in bits, with H(0) = H(1) = 0 by convention.
pub fn shannon_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || x.is_nan() {
        return Err(Error::domain(format!("entropy argument {x} outside [0, 1]")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}
