//! Scenario files: every parameter of one link configuration in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::obe::excitation::ExcitationConfig;
use crate::photon::{DetectorModel, DriftModel, FiberModel, JonesMatrix};
use crate::rate::TimingBudget;
use crate::readout::ReadoutErrors;
use crate::source::EmissionAmplitudes;
use crate::{Error, Result};

fn one() -> f64 {
    1.0
}
fn default_h0() -> f64 {
    EmissionAmplitudes::default().amp_h0
}
fn default_v1() -> f64 {
    EmissionAmplitudes::default().amp_v1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_h0")]
    pub amp_h0: f64,
    #[serde(default = "default_v1")]
    pub amp_v1: f64,
    /// Fraction `S` of in-window heralds from the desired excitation branch.
    /// The rest leave the qubit manifold.
    #[serde(default = "one")]
    pub state_prep_success: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            amp_h0: default_h0(),
            amp_v1: default_v1(),
            state_prep_success: 1.0,
        }
    }
}

impl SourceConfig {
    pub fn amplitudes(&self) -> EmissionAmplitudes {
        EmissionAmplitudes {
            amp_h0: self.amp_h0,
            amp_v1: self.amp_v1,
        }
    }
}

fn default_t2() -> f64 {
    1360.0
}

/// Noise mechanisms acting on the heralded state. Each can be switched off on
/// its own for the error budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Photon depolarization from birefringence in the collection optics.
    #[serde(default)]
    pub polarization_mixing: f64,
    /// Ion coherence time, µs.
    #[serde(default = "default_t2")]
    pub t2_us: f64,
    /// Time from emission to the ion basis rotation, µs, fiber delay excluded.
    #[serde(default)]
    pub wait_us: f64,
    /// Whether the ion also dephases while the photon is in the fiber.
    #[serde(default)]
    pub travel_dephasing: bool,
    /// Relative retardance error of every analysis waveplate.
    #[serde(default)]
    pub waveplate_retardance_error: f64,
    /// Bit-flip probability after each ion basis rotation.
    #[serde(default)]
    pub pi2_error: f64,
    /// Time since the polarization calibration, s; drives `fiber.drift`.
    #[serde(default)]
    pub wall_time_s: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            polarization_mixing: 0.0,
            t2_us: default_t2(),
            wait_us: 0.0,
            travel_dephasing: false,
            waveplate_retardance_error: 0.0,
            pi2_error: 0.0,
            wall_time_s: 0.0,
        }
    }
}

fn default_pp() -> f64 {
    0.056
}

/// Inputs to the success-probability product and the rate estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateInputs {
    #[serde(default = "default_pp")]
    pub p_p: f64,
    /// Collection times detection efficiency, measured as one number.
    pub p_c_p_q: f64,
    /// Window capture; `None` computes it from the excitation model.
    #[serde(default)]
    pub p_w: Option<f64>,
    /// Measured per-attempt herald probability; overrides the product when set.
    #[serde(default)]
    pub measured_success_probability: Option<f64>,
    #[serde(default)]
    pub leakage_fraction: f64,
}

/// Where readout correction enters the reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutCorrection {
    None,
    /// Invert the two-pass readout on the counts, then reconstruct.
    BeforeMle,
    /// Fold the readout errors into the measurement operators.
    InsideMle,
}

impl ReadoutCorrection {
    pub const ALL: [ReadoutCorrection; 3] =
        [ReadoutCorrection::None, ReadoutCorrection::BeforeMle, ReadoutCorrection::InsideMle];
}

fn default_resamples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_correction")]
    pub correction: ReadoutCorrection,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn default_correction() -> ReadoutCorrection {
    ReadoutCorrection::None
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            correction: default_correction(),
            bootstrap_resamples: default_resamples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Heralds per tomography setting, split evenly over the two readout passes.
    /// Roughly half are retained, since each pass keeps only bright events.
    #[serde(default)]
    pub shots: u64,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub fiber: FiberModel,
    pub detector: DetectorModel,
    #[serde(default = "ReadoutErrors::default")]
    pub readout: ReadoutErrors,
    pub timing: TimingBudget,
    pub rate: RateInputs,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Ion qubit splitting that turns photon arrival time into qubit phase.
    #[serde(default)]
    pub qubit_splitting_mhz: Option<f64>,
    /// Excitation model for window sweeps; the built-in default when absent.
    #[serde(default)]
    pub excitation: Option<ExcitationConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Travel time of the photon to the detector, µs.
    pub fn travel_us(&self) -> f64 {
        self.timing.travel_us.unwrap_or_else(|| self.fiber.latency_us())
    }

    /// Coherence factor of the ion qubit at the basis rotation.
    pub fn ion_coherence(&self) -> f64 {
        let n = &self.noise;
        let travel = if n.travel_dephasing { self.fiber.latency_us() } else { 0.0 };
        (-(n.wait_us + travel) / n.t2_us).exp()
    }

    /// Per-attempt probability of a signal herald. `p_c_p_q` already holds
    /// the detector efficiency.
    pub fn signal_probability(&self) -> f64 {
        self.rate
            .measured_success_probability
            .unwrap_or_else(|| self.predicted_success_probability(self.rate.p_w.unwrap_or(1.0)))
    }

    /// `P_p · P_c P_q · P_w` times the fiber transmission.
    pub fn predicted_success_probability(&self, p_w: f64) -> f64 {
        self.rate.p_p * self.rate.p_c_p_q * p_w * self.fiber.survival()
    }

    /// Fraction of heralds caused by detector dark counts.
    pub fn background_fraction(&self) -> f64 {
        let dark = self.detector.dark_herald_probability();
        let sig = self.signal_probability();
        if dark + sig > 0.0 {
            dark / (dark + sig)
        } else {
            0.0
        }
    }

    /// Problems with the scenario, one message each. `stochastic` adds the
    /// checks needed before sampling.
    pub fn violations(&self, stochastic: bool) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let s = &self.source;
        check(
            (s.amp_h0 * s.amp_h0 + s.amp_v1 * s.amp_v1 - 1.0).abs() < 1e-9,
            "source amplitudes must be normalized",
        );
        check(unit(s.state_prep_success), "source.state_prep_success must be in [0, 1]");
        let n = &self.noise;
        check(unit(n.polarization_mixing), "noise.polarization_mixing must be in [0, 1]");
        check(n.t2_us > 0.0, "noise.t2_us must be > 0");
        check(n.wait_us >= 0.0, "noise.wait_us must be ≥ 0");
        check(n.waveplate_retardance_error.abs() < 1.0, "noise.waveplate_retardance_error must be in (−1, 1)");
        check(unit(n.pi2_error), "noise.pi2_error must be in [0, 1]");
        check(n.wall_time_s >= 0.0, "noise.wall_time_s must be ≥ 0");
        let r = &self.rate;
        check(unit(r.p_p), "rate.p_p must be in [0, 1]");
        check(unit(r.p_c_p_q), "rate.p_c_p_q must be in [0, 1]");
        check(r.p_w.is_none_or(unit), "rate.p_w must be in [0, 1]");
        check(r.measured_success_probability.is_none_or(unit), "rate.measured_success_probability must be in [0, 1]");
        check(unit(r.leakage_fraction), "rate.leakage_fraction must be in [0, 1]");
        check(
            self.qubit_splitting_mhz.is_none_or(|f| f.is_finite() && f >= 0.0),
            "qubit_splitting_mhz must be finite and ≥ 0",
        );
        check(self.analysis.bootstrap_resamples == 0 || self.analysis.bootstrap_resamples >= 100, "analysis.bootstrap_resamples must be 0 or ≥ 100");
        if stochastic {
            check(self.seed.is_some(), "seed is required for stochastic commands");
        }
        v.extend(self.fiber.violations());
        v.extend(self.detector.violations());
        v.extend(self.timing.violations());
        if let Err(e) = self.readout.validate() {
            v.push(format!("readout: {e}"));
        }
        v
    }

    pub fn validate(&self, stochastic: bool) -> Result<()> {
        let v = self.violations(stochastic);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Copy with one mechanism switched off.
    pub fn without(&self, m: Mechanism) -> Scenario {
        let mut s = self.clone();
        match m {
            Mechanism::PolarizationMixing => s.noise.polarization_mixing = 0.0,
            Mechanism::Dephasing => s.noise.wait_us = 0.0,
            Mechanism::TravelDephasing => s.noise.travel_dephasing = false,
            Mechanism::Readout => s.readout = ReadoutErrors::NONE,
            Mechanism::PhotonPath => s.noise.waveplate_retardance_error = 0.0,
            Mechanism::Pi2Pulse => s.noise.pi2_error = 0.0,
            Mechanism::Background => s.detector.dark_count_rate_per_s = 0.0,
            Mechanism::PolarizationInstability => {
                s.fiber.static_rotation = JonesMatrix::identity();
                s.fiber.drift = DriftModel {
                    rate_rad_per_s: 0.0,
                    ..s.fiber.drift
                };
            }
            Mechanism::FiberDepolarization => s.fiber.depolarization = 0.0,
        }
        s
    }

    /// Copy with every mechanism switched off.
    pub fn noiseless(&self) -> Scenario {
        Mechanism::ALL.iter().fold(self.clone(), |s, &m| s.without(m))
    }

    /// Copy with only `m` left on.
    pub fn only(&self, m: Mechanism) -> Scenario {
        Mechanism::ALL
            .iter()
            .filter(|&&x| x != m)
            .fold(self.clone(), |s, &x| s.without(x))
    }
}

/// Independently switchable sources of infidelity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    PolarizationMixing,
    Dephasing,
    TravelDephasing,
    Readout,
    PhotonPath,
    Pi2Pulse,
    Background,
    PolarizationInstability,
    FiberDepolarization,
}

impl Mechanism {
    pub const ALL: [Mechanism; 9] = [
        Mechanism::PolarizationMixing,
        Mechanism::Dephasing,
        Mechanism::TravelDephasing,
        Mechanism::Readout,
        Mechanism::PhotonPath,
        Mechanism::Pi2Pulse,
        Mechanism::Background,
        Mechanism::PolarizationInstability,
        Mechanism::FiberDepolarization,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Mechanism::PolarizationMixing => "polarization_mixing",
            Mechanism::Dephasing => "dephasing",
            Mechanism::TravelDephasing => "travel_dephasing",
            Mechanism::Readout => "readout",
            Mechanism::PhotonPath => "photon_path",
            Mechanism::Pi2Pulse => "pi2_pulse",
            Mechanism::Background => "background",
            Mechanism::PolarizationInstability => "polarization_instability",
            Mechanism::FiberDepolarization => "fiber_depolarization",
        }
    }
}
