//! Simulation and analysis toolkit for a heralded ion-photon entanglement link.
//!
//! The crate models a single trapped-ion node emitting a polarization-encoded
//! infrared photon entangled with a metastable Zeeman qubit, the fiber that
//! carries the photon, the two-pass shelving readout of the ion, and the
//! tomography and rate analysis applied to the resulting data.
//!
//! | module | contents |
//! |---|---|
//! | [`qdm`] | density matrices, channels, fidelity, purity, the purity bound |
//! | [`source`] | emitted ion-photon state, emission-time densities, leakage |
//! | [`obe`] | multi-level Lindblad integrator and the excitation/shelving models built on it |
//! | [`photon`] | waveplates, fiber transmission/latency/noise, detection windows |
//! | [`readout`] | forward error matrices and inversion for the two-pass readout |
//! | [`tomography`] | dataset simulation, linear inversion, constrained MLE, bootstrap, error budget |
//! | [`rate`] | success probability, attempt/entanglement rates, Monte Carlo loop |
//! | [`scenario`] | JSON scenario files and validation |
//! | [`cli`] | subcommand implementations behind the `ionlink` binary |
//!
//! Joint states are always ordered photon ⊗ ion with photon basis `{H, V}` and
//! ion basis `{|0⟩, |1⟩}`.

pub mod cli;
pub mod obe;
pub mod photon;
pub mod qdm;
pub mod rate;
pub mod readout;
pub mod rng;
pub mod scenario;
pub mod source;
pub mod tomography;

mod error;

pub use error::{Error, Result};
pub use nalgebra::Complex;

/// Complex scalar used throughout.
pub type C64 = Complex<f64>;
