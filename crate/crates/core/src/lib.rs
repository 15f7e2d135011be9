//! Discrete-event simulator and post-processing engine for free-space
//! twin-field QKD with the four-intensity sending-or-not-sending protocol.
//!
//! The crate models two independent coherent-state sources, turbulent
//! atmospheric channels, single-photon interference at an untrusted
//! measurement node, and the full classical pipeline: frequency
//! calibration, clock synchronization, phase estimation from reference
//! pulses, sifting with efficiency post-selection, actively-odd-parity
//! pairing (AOPP), decoy-state bounds and the finite-key secure rate.
//!
//! Two execution modes are supported:
//! - **Monte Carlo**: pulse-by-pulse event simulation, practical up to
//!   ~1e9 pulse pairs on a desktop.
//! - **Expected**: closed-form Poisson expectations of the same counts,
//!   used to evaluate operating points at experiment scale (1e12+ pairs).
//!
//! Entry points: [`scenario::run_scenario`] drives the full pipeline from
//! a TOML configuration; the individual stages are usable standalone.

pub mod channel;
pub mod error;
pub mod io;
pub mod keyrate;
pub mod measurement;
pub mod phase;
pub mod protocol;
pub mod rng;
pub mod scenario;
pub mod sifting;
pub mod sync;

pub use error::{Error, Result};
