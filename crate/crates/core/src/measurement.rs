//! Interference of the two arriving pulse trains at the measurement node
//! and click generation in the two interference SNSPDs plus the two probe
//! SNSPDs.
//!
//! For a pulse pair with effective mean photon numbers `nu_a`, `nu_b` at
//! the beam splitter and total relative phase `theta`, the output ports
//! carry coherent states with mean photon numbers
//! `(nu_a + nu_b +- 2*sqrt(nu_a*nu_b)*cos(theta)) / 2`; clicks are
//! Poisson-thresholded, with dark counts and X-basis misalignment mixing.
//! Probe detectors see the tapped fraction of each arm with no
//! interference.
//!
//! [`expected_counts`] is the closed-form Poisson expectation of the same
//! statistics, used for experiment-scale operating points and as the
//! independent oracle for the Monte Carlo path.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSample, ChannelTrajectory};
use crate::error::{Error, Result};
use crate::phase::beat_phase;
use crate::protocol::{
    FrameSchedule, IntensityLabel, PulseKind, PulseRecord, SimConditions, SourceParams, Ticks,
    TICKS_PER_NS,
};
use crate::rng::{derive_stream, StreamRole};

/// SNSPD behavioral parameters (shared by all four detector channels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Detection efficiency.
    pub efficiency: f64,
    /// Dark count rate, counts per second (converted to a per-gate
    /// probability by the pulse width).
    pub dark_rate_cps: f64,
    /// Dead time after a click, ns (0 disables).
    pub dead_time_ns: f64,
    /// Recovery gap after the reference block, ns (part of the frame
    /// schedule; recorded here for reporting).
    pub recovery_gap_ns: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            efficiency: 0.80,
            dark_rate_cps: 20.0,
            dead_time_ns: 50.0,
            recovery_gap_ns: 50.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) || self.efficiency == 0.0 {
            return Err(Error::config(format!(
                "detector efficiency {} outside (0, 1]",
                self.efficiency
            )));
        }
        if self.dark_rate_cps < 0.0 || self.dead_time_ns < 0.0 {
            return Err(Error::config(
                "dark rate and dead time must be >= 0".to_string(),
            ));
        }
        Ok(())
    }

    /// Dark click probability within a gate of `gate_ns`.
    pub fn dark_prob(&self, gate_ns: f64) -> f64 {
        self.dark_rate_cps * gate_ns * 1e-9
    }
}

/// Detector channel identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorId {
    D0,
    D1,
    ProbeA,
    ProbeB,
}

impl DetectorId {
    pub fn index(self) -> usize {
        match self {
            DetectorId::D0 => 0,
            DetectorId::D1 => 1,
            DetectorId::ProbeA => 2,
            DetectorId::ProbeB => 3,
        }
    }
}

/// Simulator-truth cause of a click. Never consulted by the protocol
/// pipeline; only oracles read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OriginKind {
    Signal,
    Reference,
    Dark,
}

/// Timestamped detector click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub time: Ticks,
    pub detector: DetectorId,
    pub origin: OriginKind,
}

/// Optical/electronic configuration of the measurement node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub detectors: DetectorParams,
    /// Measurement-module attenuation on the interference path, dB.
    pub eta_m_db: f64,
    /// Fraction of arriving photons routed to the interference beam
    /// splitter.
    pub interference_fraction: f64,
    /// Fraction routed to the probe detector.
    pub probe_fraction: f64,
    /// Mean photon number of one reference pulse at emission.
    pub reference_intensity: f64,
    /// Preset heterodyne offset folded into every pulse's phase, Hz.
    pub preset_offset_hz: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig {
            detectors: DetectorParams::default(),
            eta_m_db: 3.0,
            interference_fraction: 0.10,
            probe_fraction: 0.90,
            reference_intensity: 100.0,
            preset_offset_hz: 1000.0,
        }
    }
}

impl MeasurementConfig {
    pub fn validate(&self) -> Result<()> {
        self.detectors.validate()?;
        if self.interference_fraction <= 0.0
            || self.probe_fraction < 0.0
            || self.interference_fraction + self.probe_fraction > 1.0 + 1e-12
        {
            return Err(Error::config(
                "interference_fraction + probe_fraction must lie in (0, 1]".to_string(),
            ));
        }
        if self.reference_intensity < 0.0 {
            return Err(Error::config("reference_intensity must be >= 0".to_string()));
        }
        Ok(())
    }

    pub fn eta_m_linear(&self) -> f64 {
        10f64.powf(-self.eta_m_db / 10.0)
    }
}

/// Mean photon numbers at the two beam splitter outputs for inputs with
/// mean photon numbers `nu_a`, `nu_b` and relative phase `theta`.
pub fn port_means(nu_a: f64, nu_b: f64, theta: f64) -> (f64, f64) {
    let cross = 2.0 * (nu_a * nu_b).sqrt() * theta.cos();
    let sum = nu_a + nu_b;
    (0.5 * (sum + cross), 0.5 * (sum - cross))
}

/// X-basis misalignment: a fraction `e` of the light exits the wrong port.
pub fn mix_misalignment(n0: f64, n1: f64, e: f64) -> (f64, f64) {
    ((1.0 - e) * n0 + e * n1, (1.0 - e) * n1 + e * n0)
}

/// Click probability of a detector seeing `mean_photons` (already thinned
/// by all efficiencies) with dark probability `dark` in the gate.
pub fn click_prob(mean_photons: f64, dark: f64) -> f64 {
    1.0 - (1.0 - dark) * (-mean_photons).exp()
}

/// Photon-number class of a pulse pair, for ground-truth tagging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairClass {
    BothVacuum,
    /// Exactly one side sent; carries the source photon number drawn for
    /// the sending pulse.
    OneSide { photons: u32, sender_is_a: bool },
    BothSend,
}

/// Outcome of sampling one signal slot. Click timestamps are spread
/// uniformly within the pulse gate (TDC-quantized).
#[derive(Debug, Clone, Copy)]
pub struct SignalOutcome {
    pub click0: bool,
    pub click1: bool,
    pub t0: Ticks,
    pub t1: Ticks,
    pub origin0: OriginKind,
    pub origin1: OriginKind,
    pub probe_a: bool,
    pub probe_b: bool,
    pub t_probe_a: Ticks,
    pub t_probe_b: Ticks,
    pub class: PairClass,
}

/// Outcome of sampling one reference slot.
#[derive(Debug, Clone, Copy)]
pub struct RefOutcome {
    pub click0: bool,
    pub click1: bool,
    pub t0: Ticks,
    pub t1: Ticks,
    pub probe_a: bool,
    pub probe_b: bool,
    pub t_probe_a: Ticks,
    pub t_probe_b: Ticks,
}

/// Stateful per-slot sampler: owns the detection RNG stream and the
/// per-detector dead-time bookkeeping. Slots must be fed in time order.
pub struct PairSampler<'a> {
    cfg: &'a MeasurementConfig,
    rng: ChaCha12Rng,
    dead_until: [Ticks; 4],
    dead_ticks: Ticks,
    eta_m: f64,
    dark_signal: f64,
    dark_reference: f64,
    det_eff: f64,
    signal_gate_ticks: Ticks,
    reference_gate_ticks: Ticks,
}

impl<'a> PairSampler<'a> {
    pub fn new(cfg: &'a MeasurementConfig, schedule: &FrameSchedule, seed: u64) -> PairSampler<'a> {
        PairSampler::with_stream(cfg, schedule, derive_stream(seed, StreamRole::Detection, 0))
    }

    pub fn with_stream(
        cfg: &'a MeasurementConfig,
        schedule: &FrameSchedule,
        rng: ChaCha12Rng,
    ) -> PairSampler<'a> {
        PairSampler {
            cfg,
            rng,
            dead_until: [Ticks::MIN; 4],
            dead_ticks: (cfg.detectors.dead_time_ns * TICKS_PER_NS as f64) as Ticks,
            eta_m: cfg.eta_m_linear(),
            dark_signal: cfg.detectors.dark_prob(schedule.signal_pulse_width_ns as f64),
            dark_reference: cfg
                .detectors
                .dark_prob(schedule.reference_pulse_width_ns as f64),
            det_eff: cfg.detectors.efficiency,
            signal_gate_ticks: schedule.signal_pulse_width_ns as Ticks * TICKS_PER_NS,
            reference_gate_ticks: schedule.reference_pulse_width_ns as Ticks * TICKS_PER_NS,
        }
    }

    /// Arrival time within the gate starting at `t` (uniform, quantized to
    /// the TDC grid).
    fn gate_time(&mut self, t: Ticks, gate: Ticks) -> Ticks {
        t + (self.rng.random::<f64>() * gate as f64) as Ticks
    }

    fn alive(&self, det: DetectorId, t: Ticks) -> bool {
        self.dead_ticks == 0 || t >= self.dead_until[det.index()]
    }

    fn register(&mut self, det: DetectorId, t: Ticks, clicked: bool) -> bool {
        if !clicked || !self.alive(det, t) {
            return false;
        }
        if self.dead_ticks > 0 {
            self.dead_until[det.index()] = t + self.dead_ticks;
        }
        true
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.random::<f64>() < p
    }

    /// Poisson draw; Knuth inversion below the crossover keeps the per-slot
    /// hot path free of distribution-object setup.
    fn poisson(&mut self, mean: f64) -> u32 {
        if mean <= 0.0 {
            return 0;
        }
        if mean < 12.0 {
            let limit = (-mean).exp();
            let mut product: f64 = self.rng.random();
            let mut count = 0u32;
            while product > limit {
                product *= self.rng.random::<f64>();
                count += 1;
            }
            return count;
        }
        Poisson::new(mean).unwrap().sample(&mut self.rng) as u32
    }

    fn binomial(&mut self, n: u32, p: f64) -> u32 {
        if n == 0 || p <= 0.0 {
            return 0;
        }
        if p >= 1.0 {
            return n;
        }
        if n <= 32 {
            let mut hits = 0u32;
            for _ in 0..n {
                hits += (self.rng.random::<f64>() < p) as u32;
            }
            return hits;
        }
        Binomial::new(n as u64, p).unwrap().sample(&mut self.rng) as u32
    }

    /// Sample one signal slot. `misalignment` is the X-basis wrong-port
    /// probability; `theta` must already include encoding phases, the
    /// channel phase and the heterodyne beat.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_signal_slot(
        &mut self,
        t: Ticks,
        mu_a: f64,
        mu_b: f64,
        theta: f64,
        ch: &ChannelSample,
        misalignment: f64,
    ) -> SignalOutcome {
        let int_a = ch.efficiency_a * self.cfg.interference_fraction * self.eta_m * self.det_eff;
        let int_b = ch.efficiency_b * self.cfg.interference_fraction * self.eta_m * self.det_eff;
        let probe_a_eff = ch.efficiency_a * self.cfg.probe_fraction * self.det_eff;
        let probe_b_eff = ch.efficiency_b * self.cfg.probe_fraction * self.det_eff;

        let a_sends = mu_a > 0.0;
        let b_sends = mu_b > 0.0;

        let (photon0, photon1, probe_a_photons, probe_b_photons, class) = match (a_sends, b_sends)
        {
            (false, false) => (false, false, 0, 0, PairClass::BothVacuum),
            (true, false) | (false, true) => {
                // One-sided emission: no interference, so the exact
                // per-photon path applies and the source photon number is
                // recorded as the ground-truth tag. Misalignment is a no-op
                // on the phase-independent 50/50 split.
                let (mu, eta_int, sender_is_a) = if a_sends {
                    (mu_a, int_a, true)
                } else {
                    (mu_b, int_b, false)
                };
                let eta_probe = if a_sends { probe_a_eff } else { probe_b_eff };
                let n_src = self.poisson(mu);
                let at_bs = self.binomial(n_src, eta_int);
                // Conditional routing of the photons that did not reach the
                // interference path.
                let at_probe =
                    self.binomial(n_src - at_bs, eta_probe / (1.0 - eta_int).max(1e-300));
                let to_d0 = self.binomial(at_bs, 0.5);
                (
                    to_d0 > 0,
                    at_bs - to_d0 > 0,
                    if a_sends { at_probe } else { 0 },
                    if a_sends { 0 } else { at_probe },
                    PairClass::OneSide {
                        photons: n_src,
                        sender_is_a,
                    },
                )
            }
            (true, true) => {
                let (n0, n1) = port_means(mu_a * int_a, mu_b * int_b, theta);
                let (n0m, n1m) = mix_misalignment(n0, n1, misalignment);
                (
                    self.poisson(n0m) > 0,
                    self.poisson(n1m) > 0,
                    self.poisson(mu_a * probe_a_eff),
                    self.poisson(mu_b * probe_b_eff),
                    PairClass::BothSend,
                )
            }
        };

        let dark0 = self.bernoulli(self.dark_signal);
        let dark1 = self.bernoulli(self.dark_signal);
        let dark_pa = self.bernoulli(self.dark_signal);
        let dark_pb = self.bernoulli(self.dark_signal);

        let click0 = self.register(DetectorId::D0, t, photon0 || dark0);
        let click1 = self.register(DetectorId::D1, t, photon1 || dark1);
        let probe_a = self.register(DetectorId::ProbeA, t, probe_a_photons > 0 || dark_pa);
        let probe_b = self.register(DetectorId::ProbeB, t, probe_b_photons > 0 || dark_pb);

        let gate = self.signal_gate_ticks;
        let t0 = if click0 { self.gate_time(t, gate) } else { t };
        let t1 = if click1 { self.gate_time(t, gate) } else { t };
        let t_probe_a = if probe_a { self.gate_time(t, gate) } else { t };
        let t_probe_b = if probe_b { self.gate_time(t, gate) } else { t };

        // A detector that saw photons is tagged Signal even if a dark count
        // also fired in the same gate.
        let origin0 = if photon0 { OriginKind::Signal } else { OriginKind::Dark };
        let origin1 = if photon1 { OriginKind::Signal } else { OriginKind::Dark };

        SignalOutcome {
            click0,
            click1,
            t0,
            t1,
            origin0,
            origin1,
            probe_a,
            probe_b,
            t_probe_a,
            t_probe_b,
            class,
        }
    }

    /// Sample one reference slot (both sides emit the strong reference
    /// intensity; no misalignment model on the reference path).
    pub fn sample_reference_slot(
        &mut self,
        t: Ticks,
        theta: f64,
        ch: &ChannelSample,
    ) -> RefOutcome {
        let mu = self.cfg.reference_intensity;
        let int_a = ch.efficiency_a * self.cfg.interference_fraction * self.eta_m * self.det_eff;
        let int_b = ch.efficiency_b * self.cfg.interference_fraction * self.eta_m * self.det_eff;
        let (n0, n1) = port_means(mu * int_a, mu * int_b, theta);
        let p0 = click_prob(n0, self.dark_reference);
        let p1 = click_prob(n1, self.dark_reference);
        let pa = click_prob(mu * ch.efficiency_a * self.cfg.probe_fraction * self.det_eff, self.dark_reference);
        let pb = click_prob(mu * ch.efficiency_b * self.cfg.probe_fraction * self.det_eff, self.dark_reference);
        let raw0 = self.bernoulli(p0);
        let raw1 = self.bernoulli(p1);
        let rawa = self.bernoulli(pa);
        let rawb = self.bernoulli(pb);
        let click0 = self.register(DetectorId::D0, t, raw0);
        let click1 = self.register(DetectorId::D1, t, raw1);
        let probe_a = self.register(DetectorId::ProbeA, t, rawa);
        let probe_b = self.register(DetectorId::ProbeB, t, rawb);
        let gate = self.reference_gate_ticks;
        RefOutcome {
            click0,
            click1,
            t0: if click0 { self.gate_time(t, gate) } else { t },
            t1: if click1 { self.gate_time(t, gate) } else { t },
            probe_a,
            probe_b,
            t_probe_a: if probe_a { self.gate_time(t, gate) } else { t },
            t_probe_b: if probe_b { self.gate_time(t, gate) } else { t },
        }
    }
}

/// Interfere two time-aligned pulse trains and produce the detection
/// events of all four detector channels.
pub fn interfere_and_detect(
    train_a: &[PulseRecord],
    train_b: &[PulseRecord],
    traj: &ChannelTrajectory,
    cfg: &MeasurementConfig,
    misalignment: f64,
    seed: u64,
) -> Result<Vec<DetectionEvent>> {
    cfg.validate()?;
    if train_a.len() != train_b.len() {
        return Err(Error::Pipeline(format!(
            "pulse trains differ in length: {} vs {}",
            train_a.len(),
            train_b.len()
        )));
    }
    if let Some(last) = train_a.last() {
        if last.emit_time >= traj.duration() {
            return Err(Error::config(format!(
                "trajectory ({} ticks) shorter than train ({} ticks)",
                traj.duration(),
                last.emit_time
            )));
        }
    }
    let schedule = FrameSchedule::default();
    let mut sampler = PairSampler::new(cfg, &schedule, seed);
    let mut events = Vec::new();
    for (a, b) in train_a.iter().zip(train_b) {
        if a.emit_time != b.emit_time || a.kind != b.kind {
            return Err(Error::Pipeline(
                "pulse trains are not slot-aligned".to_string(),
            ));
        }
        let t = a.emit_time;
        let ch = traj.at(t);
        let beat = beat_phase(cfg.preset_offset_hz, t);
        let theta = a.phase - b.phase + ch.relative_phase + beat;
        match a.kind {
            PulseKind::Signal => {
                let out =
                    sampler.sample_signal_slot(t, a.intensity, b.intensity, theta, &ch, misalignment);
                push_signal_events(&mut events, &out);
            }
            PulseKind::Reference => {
                let out = sampler.sample_reference_slot(t, theta, &ch);
                push_reference_events(&mut events, &out);
            }
        }
    }
    Ok(events)
}

pub(crate) fn push_signal_events(events: &mut Vec<DetectionEvent>, out: &SignalOutcome) {
    if out.click0 {
        events.push(DetectionEvent {
            time: out.t0,
            detector: DetectorId::D0,
            origin: out.origin0,
        });
    }
    if out.click1 {
        events.push(DetectionEvent {
            time: out.t1,
            detector: DetectorId::D1,
            origin: out.origin1,
        });
    }
    if out.probe_a {
        events.push(DetectionEvent {
            time: out.t_probe_a,
            detector: DetectorId::ProbeA,
            origin: OriginKind::Signal,
        });
    }
    if out.probe_b {
        events.push(DetectionEvent {
            time: out.t_probe_b,
            detector: DetectorId::ProbeB,
            origin: OriginKind::Signal,
        });
    }
}

pub(crate) fn push_reference_events(events: &mut Vec<DetectionEvent>, out: &RefOutcome) {
    for (clicked, t, det) in [
        (out.click0, out.t0, DetectorId::D0),
        (out.click1, out.t1, DetectorId::D1),
        (out.probe_a, out.t_probe_a, DetectorId::ProbeA),
        (out.probe_b, out.t_probe_b, DetectorId::ProbeB),
    ] {
        if clicked {
            events.push(DetectionEvent {
                time: t,
                detector: det,
                origin: OriginKind::Reference,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Expected-value model
// ---------------------------------------------------------------------------

/// Closed-form Poisson expectations of the per-window statistics for one
/// operating point. All rates are probabilities per pulse-pair window,
/// conditional on the named source pair.
#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    /// Effective-event probability per window for source pair (l, r).
    pub yield_lr: [[f64; 4]; 4],
    /// Probability that a window uses source pair (l, r).
    pub pair_prob: [[f64; 4]; 4],
    /// Z-basis error rate among Z-eligible effective events.
    pub qber_z: f64,
    /// X-basis error rate among phase-accepted xx effective events.
    pub qber_x: f64,
    /// Fraction of xx windows whose encoding passes the acceptance band.
    pub accepted_fraction: f64,
    /// Effective-event probability per accepted xx window.
    pub accepted_yield: f64,
    /// Yield of a window in which exactly one photon was emitted in total
    /// (the untagged single-photon yield).
    pub single_photon_yield: f64,
    /// Yield of a both-vacuum window.
    pub vacuum_yield: f64,
}

fn exactly_one_click(p0: f64, p1: f64) -> f64 {
    p0 * (1.0 - p1) + p1 * (1.0 - p0)
}

/// Phase-averaged effective probability for a both-send pair.
fn phase_averaged_yield(nu_a: f64, nu_b: f64, misalignment: f64, dark: f64) -> f64 {
    const STEPS: usize = 64;
    let mut acc = 0.0;
    for i in 0..STEPS {
        let theta = (i as f64 + 0.5) / STEPS as f64 * 2.0 * PI;
        let (n0, n1) = port_means(nu_a, nu_b, theta);
        let (n0m, n1m) = mix_misalignment(n0, n1, misalignment);
        acc += exactly_one_click(click_prob(n0m, dark), click_prob(n1m, dark));
    }
    acc / STEPS as f64
}

/// Expectations of all per-window counting statistics under Poisson
/// statistics, with the X basis evaluated inside the acceptance band
/// `1 - |cos(theta)| < lambda` and a Gaussian residual phase error of
/// width `sigma_phase` radians.
pub fn expected_counts(
    params: &SourceParams,
    cond: &SimConditions,
    lambda: f64,
    sigma_phase: f64,
) -> ExpectedCounts {
    let eta_a = cond.arm_transmittance_a();
    let eta_b = cond.arm_transmittance_b();
    let d = cond.d0;
    let e = cond.ed_x;

    let mut yield_lr = [[0.0; 4]; 4];
    let mut pair_prob = [[0.0; 4]; 4];
    for l in IntensityLabel::ALL {
        for r in IntensityLabel::ALL {
            let nu_a = params.intensity(l) * eta_a;
            let nu_b = params.intensity(r) * eta_b;
            let y = if nu_a == 0.0 || nu_b == 0.0 {
                // No interference: both ports see half of the arriving
                // light regardless of phase or misalignment.
                let half = 0.5 * (nu_a + nu_b);
                exactly_one_click(click_prob(half, d), click_prob(half, d))
            } else {
                phase_averaged_yield(nu_a, nu_b, e, d)
            };
            yield_lr[l.index()][r.index()] = y;
            pair_prob[l.index()][r.index()] = params.probability(l) * params.probability(r);
        }
    }

    // Z-basis composition: sources v, y, z on both sides; errors are the
    // both-send and both-vacuum classes (the complementary bit mapping
    // makes exactly-one-sender events agree).
    let z_labels = [IntensityLabel::V, IntensityLabel::Y, IntensityLabel::Z];
    let mut z_total = 0.0;
    let mut z_errors = 0.0;
    for l in z_labels {
        for r in z_labels {
            let w = pair_prob[l.index()][r.index()] * yield_lr[l.index()][r.index()];
            z_total += w;
            let a_sends = l != IntensityLabel::V;
            let b_sends = r != IntensityLabel::V;
            if a_sends == b_sends {
                z_errors += w;
            }
        }
    }
    let qber_z = if z_total > 0.0 { z_errors / z_total } else { 0.0 };

    // X basis: both sides chose x and the (estimated) aligned phase lies
    // within the acceptance band around 0 or pi. The residual estimation
    // error widens the actual interference phase by sigma_phase.
    let band = acceptance_halfwidth(lambda);
    let accepted_fraction = 2.0 * band / PI;
    let nu_ax = params.mu_x * eta_a;
    let nu_bx = params.mu_x * eta_b;
    let (mut err_acc, mut corr_acc) = (0.0, 0.0);
    const THETA_STEPS: usize = 33;
    const NOISE_STEPS: usize = 33;
    for i in 0..THETA_STEPS {
        let theta_t = (2.0 * (i as f64 + 0.5) / THETA_STEPS as f64 - 1.0) * band;
        let (mut w_err, mut w_corr) = (0.0, 0.0);
        if sigma_phase > 0.0 {
            let mut norm = 0.0;
            for j in 0..NOISE_STEPS {
                let z = (2.0 * (j as f64 + 0.5) / NOISE_STEPS as f64 - 1.0) * 4.0;
                let weight = (-0.5 * z * z).exp();
                let theta = theta_t + z * sigma_phase;
                let (qe, qc) = x_click_rates(nu_ax, nu_bx, theta, e, d);
                w_err += weight * qe;
                w_corr += weight * qc;
                norm += weight;
            }
            w_err /= norm;
            w_corr /= norm;
        } else {
            let (qe, qc) = x_click_rates(nu_ax, nu_bx, theta_t, e, d);
            w_err = qe;
            w_corr = qc;
        }
        err_acc += w_err;
        corr_acc += w_corr;
    }
    err_acc /= THETA_STEPS as f64;
    corr_acc /= THETA_STEPS as f64;
    let accepted_yield = err_acc + corr_acc;
    let qber_x = if accepted_yield > 0.0 {
        err_acc / accepted_yield
    } else {
        0.0
    };

    // Single-photon (untagged) yield: one photon in flight on one arm.
    // The symmetric-arm mean is used; with symmetric sources the two arms
    // contribute equally.
    let eta_mean = 0.5 * (eta_a + eta_b);
    let single_photon_yield =
        eta_mean * (1.0 - d) + (1.0 - eta_mean) * 2.0 * d * (1.0 - d);
    let vacuum_yield = 2.0 * d * (1.0 - d);

    ExpectedCounts {
        yield_lr,
        pair_prob,
        qber_z,
        qber_x,
        accepted_fraction,
        accepted_yield,
        single_photon_yield,
        vacuum_yield,
    }
}

/// Half-width of the phase acceptance band: `1 - |cos(theta)| < lambda`
/// accepts `|theta|` (mod pi) below `arccos(1 - lambda)`.
pub fn acceptance_halfwidth(lambda: f64) -> f64 {
    (1.0 - lambda).clamp(-1.0, 1.0).acos()
}

/// Error/correct click rates of an xx pair at interference phase `theta`
/// (correct detector is D0 near theta = 0; the pi band mirrors by
/// symmetry).
fn x_click_rates(nu_a: f64, nu_b: f64, theta: f64, misalignment: f64, dark: f64) -> (f64, f64) {
    let (n0, n1) = port_means(nu_a, nu_b, theta);
    let (n0m, n1m) = mix_misalignment(n0, n1, misalignment);
    let p0 = click_prob(n0m, dark);
    let p1 = click_prob(n1m, dark);
    (p1 * (1.0 - p0), p0 * (1.0 - p1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{simulate_trajectory, FadingParams, PhaseNoiseParams};
    use crate::protocol::{generate_pulse_train, Terminal};
    use approx::assert_abs_diff_eq;

    fn flat_trajectory(eff: f64, duration: Ticks) -> ChannelTrajectory {
        ChannelTrajectory {
            sample_period: duration.max(1),
            efficiency_a: vec![eff],
            efficiency_b: vec![eff],
            relative_phase: vec![0.0],
            freq_offset_hz: vec![0.0],
        }
    }

    #[test]
    fn port_means_conserve_energy() {
        for theta in [0.0, 0.3, 1.2, PI, 4.0] {
            let (n0, n1) = port_means(0.3, 0.7, theta);
            assert_abs_diff_eq!(n0 + n1, 1.0, epsilon = 1e-12);
            assert!(n0 >= 0.0 && n1 >= 0.0);
        }
    }

    #[test]
    fn perfect_interference_ports() {
        // Equal effective intensities, aligned phase: destructive port dark.
        let (n0, n1) = port_means(0.4, 0.4, 0.0);
        assert_abs_diff_eq!(n1, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(n0, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(click_prob(n0, 0.0), 1.0 - (-0.8f64).exp(), epsilon = 1e-15);
        assert_eq!(click_prob(n1, 0.0), 0.0);
    }

    #[test]
    fn phase_average_preserves_total_mean_photons() {
        // Averaged over a uniform relative phase, each port carries half of
        // the total mean photon number (the interference term integrates
        // to zero).
        const STEPS: usize = 256;
        let (mut m0, mut m1) = (0.0, 0.0);
        for i in 0..STEPS {
            let theta = (i as f64 + 0.5) / STEPS as f64 * 2.0 * PI;
            let (n0, n1) = port_means(0.25, 0.6, theta);
            m0 += n0;
            m1 += n1;
        }
        m0 /= STEPS as f64;
        m1 /= STEPS as f64;
        assert_abs_diff_eq!(m0, 0.5 * (0.25 + 0.6), epsilon = 1e-12);
        assert_abs_diff_eq!(m1, 0.5 * (0.25 + 0.6), epsilon = 1e-12);
    }

    #[test]
    fn single_arm_limit_splits_evenly() {
        // mu_b = 0, no darks: D0 and D1 equally likely over many slots.
        let cfg = MeasurementConfig {
            detectors: DetectorParams {
                efficiency: 1.0,
                dark_rate_cps: 0.0,
                dead_time_ns: 0.0,
                ..DetectorParams::default()
            },
            eta_m_db: 0.0,
            interference_fraction: 1.0,
            probe_fraction: 0.0,
            reference_intensity: 0.0,
            preset_offset_hz: 0.0,
        };
        let schedule = FrameSchedule::default();
        let mut sampler = PairSampler::new(&cfg, &schedule, 99);
        let ch = ChannelSample {
            efficiency_a: 1.0,
            efficiency_b: 1.0,
            relative_phase: 0.0,
            freq_offset_hz: 0.0,
        };
        let (mut c0, mut c1) = (0u64, 0u64);
        let n = 200_000;
        for i in 0..n {
            let out = sampler.sample_signal_slot(i as Ticks * 100, 0.2, 0.0, 0.7, &ch, 0.0);
            if out.click0 {
                c0 += 1;
            }
            if out.click1 {
                c1 += 1;
            }
        }
        let expected = (1.0 - (-0.1f64).exp()) * n as f64;
        let sigma = (expected * (1.0 - 0.095)).sqrt();
        assert!((c0 as f64 - expected).abs() < 5.0 * sigma, "c0 = {c0}");
        assert!((c1 as f64 - expected).abs() < 5.0 * sigma, "c1 = {c1}");
    }

    #[test]
    fn vacuum_and_no_darks_is_silent() {
        let cfg = MeasurementConfig {
            detectors: DetectorParams {
                dark_rate_cps: 0.0,
                ..DetectorParams::default()
            },
            reference_intensity: 0.0,
            ..MeasurementConfig::default()
        };
        let schedule = FrameSchedule::default();
        let mut sampler = PairSampler::new(&cfg, &schedule, 3);
        let ch = ChannelSample {
            efficiency_a: 0.5,
            efficiency_b: 0.5,
            relative_phase: 0.0,
            freq_offset_hz: 0.0,
        };
        for i in 0..10_000 {
            let out = sampler.sample_signal_slot(i * 100, 0.0, 0.0, 0.0, &ch, 0.05);
            assert!(!out.click0 && !out.click1 && !out.probe_a && !out.probe_b);
        }
    }

    #[test]
    fn dead_time_suppresses_consecutive_clicks() {
        let cfg = MeasurementConfig {
            detectors: DetectorParams {
                dark_rate_cps: 0.0,
                dead_time_ns: 50.0,
                ..DetectorParams::default()
            },
            eta_m_db: 0.0,
            interference_fraction: 1.0,
            probe_fraction: 0.0,
            reference_intensity: 1e6,
            preset_offset_hz: 0.0,
        };
        let schedule = FrameSchedule::default();
        let mut sampler = PairSampler::new(&cfg, &schedule, 1);
        let ch = ChannelSample {
            efficiency_a: 1.0,
            efficiency_b: 1.0,
            relative_phase: 0.0,
            freq_offset_hz: 0.0,
        };
        // Saturating reference slots every 100 ticks; dead time 500 ticks
        // allows at most one click per 5 slots.
        let mut clicks = 0;
        for slot in 0..100 {
            let out = sampler.sample_reference_slot(slot * 100, 0.4, &ch);
            if out.click0 {
                clicks += 1;
            }
        }
        assert_eq!(clicks, 20);
    }

    #[test]
    fn interfere_and_detect_checks_alignment() {
        let params = SourceParams::default();
        let schedule = FrameSchedule::default();
        let a = generate_pulse_train(&params, &schedule, Terminal::Alice, 1, 5).unwrap();
        let b = generate_pulse_train(&params, &schedule, Terminal::Bob, 2, 5).unwrap();
        let traj = flat_trajectory(1e-3, 100_000);
        let cfg = MeasurementConfig::default();
        assert!(interfere_and_detect(&a, &b, &traj, &cfg, 0.05, 1).is_err());
    }

    #[test]
    fn interfere_and_detect_requires_covering_trajectory() {
        let params = SourceParams::default();
        let schedule = FrameSchedule::default();
        let a = generate_pulse_train(&params, &schedule, Terminal::Alice, 10, 5).unwrap();
        let b = generate_pulse_train(&params, &schedule, Terminal::Bob, 10, 5).unwrap();
        let traj = flat_trajectory(1e-3, 40_000); // one frame only
        let cfg = MeasurementConfig::default();
        assert!(matches!(
            interfere_and_detect(&a, &b, &traj, &cfg, 0.05, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn events_are_time_ordered_per_detector() {
        let params = SourceParams::default();
        let schedule = FrameSchedule::default();
        let fading = FadingParams {
            mean_loss_db: 10.0,
            scintillation_sigma: 0.5,
            ..FadingParams::default()
        };
        let noise = PhaseNoiseParams::default();
        let n_frames = 50;
        let duration = schedule.frame_ticks() * n_frames as Ticks + 1;
        let traj = simulate_trajectory(&fading, &noise, duration, 100_000, 8).unwrap();
        let a = generate_pulse_train(&params, &schedule, Terminal::Alice, n_frames, 8).unwrap();
        let b = generate_pulse_train(&params, &schedule, Terminal::Bob, n_frames, 8).unwrap();
        let cfg = MeasurementConfig::default();
        let events = interfere_and_detect(&a, &b, &traj, &cfg, 0.05, 8).unwrap();
        assert!(!events.is_empty());
        let mut last = [Ticks::MIN; 4];
        for e in &events {
            assert!(e.time >= last[e.detector.index()]);
            last[e.detector.index()] = e.time;
        }
    }

    #[test]
    fn expected_counts_vacuum_limit() {
        // All intensities zero: every window clicks only on darks.
        let params = SourceParams {
            mu_x: 0.0,
            mu_y: 0.0,
            mu_z: 0.0,
            p_x: 0.1,
            p_y: 0.1,
            p_z: 0.1,
        };
        let cond = SimConditions::default();
        let exp = expected_counts(&params, &cond, 0.07, 0.0);
        for l in 0..4 {
            for r in 0..4 {
                assert_abs_diff_eq!(
                    exp.yield_lr[l][r],
                    2.0 * cond.d0 * (1.0 - cond.d0),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn expected_counts_ideal_interference_x_error_vanishes_with_band() {
        // With no darks, no misalignment and perfect phase knowledge the
        // X error comes only from the finite acceptance band: the
        // uniform-band average of (1 - cos)/2 is band^2/12, which goes to
        // zero as lambda does.
        let params = SourceParams::default();
        let cond = SimConditions {
            d0: 0.0,
            ed_x: 0.0,
            ..SimConditions::default()
        };
        let mut prev = f64::INFINITY;
        for lambda in [1e-2, 1e-4, 1e-6] {
            let exp = expected_counts(&params, &cond, lambda, 0.0);
            let band = acceptance_halfwidth(lambda);
            let predicted = band * band / 12.0;
            assert!(
                (exp.qber_x - predicted).abs() < 0.1 * predicted,
                "lambda {lambda}: qber_x {} vs predicted {predicted}",
                exp.qber_x
            );
            assert!(exp.qber_x < prev);
            prev = exp.qber_x;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn expected_counts_symmetric_under_swap() {
        let params = SourceParams::default();
        let cond = SimConditions {
            eta_a_db: 25.0,
            eta_b_db: 29.0,
            ..SimConditions::default()
        };
        let swapped = SimConditions {
            eta_a_db: 29.0,
            eta_b_db: 25.0,
            ..cond
        };
        let e1 = expected_counts(&params, &cond, 0.07, 0.02);
        let e2 = expected_counts(&params, &swapped, 0.07, 0.02);
        for l in 0..4 {
            for r in 0..4 {
                assert_abs_diff_eq!(e1.yield_lr[l][r], e2.yield_lr[r][l], epsilon = 1e-15);
            }
        }
        assert_abs_diff_eq!(e1.qber_z, e2.qber_z, epsilon = 1e-12);
        assert_abs_diff_eq!(e1.qber_x, e2.qber_x, epsilon = 1e-12);
    }

    #[test]
    fn acceptance_band_matches_arccos() {
        // Frozen: arccos(0.93) = 0.376383482...
        assert_abs_diff_eq!(
            acceptance_halfwidth(0.07),
            0.376_383_482_317_728,
            epsilon = 1e-12
        );
    }

    #[test]
    fn monte_carlo_matches_expected_counts() {
        // Modest statistics cross-check of the 4x4 yield table at a low-loss
        // working point; the full-scale 3-sigma gate lives in the
        // acceptance suite.
        let params = SourceParams {
            mu_x: 0.05,
            mu_y: 0.3,
            mu_z: 0.4,
            p_x: 0.25,
            p_y: 0.25,
            p_z: 0.25,
        };
        let cond = SimConditions {
            d0: 1e-6,
            ed_x: 0.03,
            eta_a_db: 13.0,
            eta_b_db: 13.0,
            eta_m_db: 0.0,
            ..SimConditions::default()
        };
        let exp = expected_counts(&params, &cond, 0.07, 0.0);

        let schedule = FrameSchedule::default();
        let cfg = MeasurementConfig {
            detectors: DetectorParams {
                efficiency: 1.0,
                dark_rate_cps: 1e-6 / 1e-9, // d0 = 1e-6 per 1 ns gate
                dead_time_ns: 0.0,
                ..DetectorParams::default()
            },
            eta_m_db: 0.0,
            interference_fraction: 1.0,
            probe_fraction: 0.0,
            reference_intensity: 0.0,
            preset_offset_hz: 0.0,
        };
        let mut sampler = PairSampler::new(&cfg, &schedule, 77);
        let eta = 10f64.powf(-1.3);
        let ch = ChannelSample {
            efficiency_a: eta,
            efficiency_b: eta,
            relative_phase: 0.0,
            freq_offset_hz: 0.0,
        };
        let mut rng = derive_stream(123, StreamRole::AliceSource, 9);
        let n = 400_000u64;
        let mut effective = [[0u64; 4]; 4];
        let mut sent = [[0u64; 4]; 4];
        for i in 0..n {
            let la = params.draw_label(&mut rng);
            let lb = params.draw_label(&mut rng);
            let pa: f64 = rng.random::<f64>() * 2.0 * PI;
            let pb: f64 = rng.random::<f64>() * 2.0 * PI;
            let out = sampler.sample_signal_slot(
                i as Ticks * 100,
                params.intensity(la),
                params.intensity(lb),
                pa - pb,
                &ch,
                cond.ed_x,
            );
            sent[la.index()][lb.index()] += 1;
            if out.click0 != out.click1 {
                effective[la.index()][lb.index()] += 1;
            }
        }
        for l in 0..4 {
            for r in 0..4 {
                let y = exp.yield_lr[l][r];
                let m = sent[l][r] as f64;
                if m < 1000.0 {
                    continue;
                }
                let sigma = (m * y * (1.0 - y)).sqrt().max(1.0);
                let diff = effective[l][r] as f64 - m * y;
                assert!(
                    diff.abs() < 4.0 * sigma,
                    "class ({l},{r}): observed {} expected {} sigma {sigma}",
                    effective[l][r],
                    m * y
                );
            }
        }
    }
}
