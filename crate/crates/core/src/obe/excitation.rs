//! The eight-level S1/2, P1/2, D3/2 system: optical pumping, the short 422 nm
//! excitation pulse that produces the 1092 nm photon, and the long-probe
//! calibration used to measure 422 nm polarization purity.
//!
//! Beam strengths and the pulse shape are not published; the defaults are
//! chosen so the emission profile, window capture and state-preparation error
//! land near the measured values. They are illustrative, not authoritative.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    build_generator, emission_pdf, evolve_exact, evolve_strided, Envelope, LaserBeam, LevelSystem, Manifold,
    Polarization, Transition,
};
use crate::qdm::ZERO;
use crate::source::EmissionTimePdf;
use crate::{Error, Result, C64};

pub const S12: &str = "S1/2";
pub const P12: &str = "P1/2";
pub const D32: &str = "D3/2";

/// Detection windows open this long after the excitation pulse starts, once
/// the AOM rise has driven the first excitation.
pub const WINDOW_START_NS: f64 = 1.25;

/// 422 nm light whose polarization error is expressed as a transition
/// strength: the squared Rabi frequency of an error component relative to the
/// main σ component on `S1/2 ↔ P1/2`. π lines there carry half the σ weight,
/// so a π error needs twice the beam power. `pi_share` of the error is π, the
/// rest the opposite circular component.
pub fn polarization_422(q: i32, error: f64, pi_share: f64) -> Result<Polarization> {
    if !(0.0..=1.0).contains(&pi_share) || !(error >= 0.0) {
        return Err(Error::Config(format!("polarization error {error} / split {pi_share} out of range")));
    }
    let pi = 2.0 * error * pi_share;
    let other = error * (1.0 - pi_share);
    let main = 1.0 - pi - other;
    if main < 0.0 {
        return Err(Error::Config(format!("polarization error {error} leaves no main component")));
    }
    Ok(match q {
        1 => Polarization([main, pi, other]),
        -1 => Polarization([other, pi, main]),
        _ => return Err(Error::Config(format!("q = {q} is not circular"))),
    })
}

/// `S1/2`, `P1/2`, `D3/2` with the 422/1092 nm decay channels.
pub fn level_system(b_field_gauss: f64, p12_lifetime_ns: f64, branching_1092: f64) -> LevelSystem {
    LevelSystem {
        manifolds: vec![
            Manifold {
                label: S12.into(),
                two_j: 1,
                lande_g: 2.0,
                lifetime_ns: None,
            },
            Manifold {
                label: P12.into(),
                two_j: 1,
                lande_g: 2.0 / 3.0,
                lifetime_ns: Some(p12_lifetime_ns),
            },
            Manifold {
                label: D32.into(),
                two_j: 3,
                lande_g: 0.8,
                lifetime_ns: None,
            },
        ],
        transitions: vec![
            Transition {
                name: "422".into(),
                upper: P12.into(),
                lower: S12.into(),
                branching: 1.0 - branching_1092,
            },
            Transition {
                name: "1092".into(),
                upper: P12.into(),
                lower: D32.into(),
                branching: branching_1092,
            },
        ],
        b_field_gauss,
    }
}

fn default_b() -> f64 {
    5.0
}
fn default_tau() -> f64 {
    7.39
}
fn default_branching() -> f64 {
    0.056
}
fn default_split() -> f64 {
    0.5
}
fn default_step() -> f64 {
    0.05
}
fn default_t_end() -> f64 {
    60.0
}

/// Atomic constants shared by the excitation and calibration models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    #[serde(default = "default_b")]
    pub b_field_gauss: f64,
    #[serde(default = "default_tau")]
    pub p12_lifetime_ns: f64,
    #[serde(default = "default_branching")]
    pub branching_1092: f64,
}

impl Default for Atom {
    fn default() -> Self {
        Self {
            b_field_gauss: default_b(),
            p12_lifetime_ns: default_tau(),
            branching_1092: default_branching(),
        }
    }
}

impl Atom {
    pub fn system(&self) -> LevelSystem {
        level_system(self.b_field_gauss, self.p12_lifetime_ns, self.branching_1092)
    }
}

/// The excitation pulse: nominally σ−, shaped by an AOM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseConfig {
    pub rabi_mhz: f64,
    #[serde(default)]
    pub detuning_mhz: f64,
    pub polarization_error: f64,
    /// Share of the polarization error in π light; the rest is σ+.
    #[serde(default = "default_split")]
    pub pi_share: f64,
    pub start_ns: f64,
    pub rise_ns: f64,
    pub hold_ns: f64,
    pub fall_ns: f64,
}

/// Optical pumping into `S1/2(+1/2)` with σ+ 422 nm light and a 1092 nm repump
/// that stays on for `repump_tail_ns` after the 422 nm light is off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpingConfig {
    pub duration_ns: f64,
    pub rabi_422_mhz: f64,
    #[serde(default)]
    pub detuning_422_mhz: f64,
    pub polarization_error: f64,
    #[serde(default = "default_split")]
    pub pi_share: f64,
    pub repump_rabi_mhz: f64,
    pub repump_tail_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    #[serde(default)]
    pub atom: Atom,
    pub pulse: PulseConfig,
    /// `None` starts from a perfectly pumped `S1/2(+1/2)`.
    #[serde(default)]
    pub pumping: Option<PumpingConfig>,
    #[serde(default = "default_step")]
    pub grid_step_ns: f64,
    #[serde(default = "default_t_end")]
    pub t_end_ns: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            atom: Atom::default(),
            pulse: PulseConfig {
                rabi_mhz: 350.0,
                detuning_mhz: 0.0,
                polarization_error: 0.0088,
                pi_share: 1.0,
                start_ns: 0.0,
                rise_ns: 2.0,
                hold_ns: 10.0,
                fall_ns: 2.0,
            },
            pumping: Some(PumpingConfig {
                duration_ns: 1000.0,
                rabi_422_mhz: 20.0,
                detuning_422_mhz: 0.0,
                polarization_error: 0.016,
                pi_share: 0.5,
                repump_rabi_mhz: 20.0,
                repump_tail_ns: 200.0,
            }),
            grid_step_ns: default_step(),
            t_end_ns: default_t_end(),
        }
    }
}

/// Outcome of one simulated excitation attempt.
#[derive(Clone, Debug)]
pub struct ExcitationResult {
    pub pdf: EmissionTimePdf,
    /// Expected number of spontaneous decays from `P1/2` (excitations).
    pub excitations: f64,
    /// Absolute probability of a 1092 nm decay during the run.
    pub emission_probability: f64,
    /// `D3/2` population at the end of the run.
    pub final_d32_population: f64,
    /// Populations of `S1/2(−1/2)` and `S1/2(+1/2)` after pumping.
    pub initial_s: [f64; 2],
}

fn diag_state(n: usize, pops: &[(usize, f64)]) -> DMatrix<C64> {
    let mut rho = DMatrix::from_element(n, n, ZERO);
    for &(i, p) in pops {
        rho[(i, i)] = C64::new(p, 0.0);
    }
    rho
}

/// Populations of the two ground sublevels after the pumping stage.
pub fn pumped_ground_state(atom: &Atom, pump: &PumpingConfig) -> Result<[f64; 2]> {
    let sys = atom.system();
    let n = sys.dim();
    let s_minus = sys.index(S12, -1)?;
    let s_plus = sys.index(S12, 1)?;
    let t1 = pump.duration_ns * 1e-3;
    let t2 = t1 + pump.repump_tail_ns * 1e-3;
    let beams = vec![
        LaserBeam {
            transition: "422".into(),
            rabi_mhz: pump.rabi_422_mhz,
            detuning_mhz: pump.detuning_422_mhz,
            polarization: polarization_422(1, pump.polarization_error, pump.pi_share)?,
            envelope: Envelope::Square { start_us: 0.0, end_us: t1 },
        },
        LaserBeam {
            transition: "1092".into(),
            rabi_mhz: pump.repump_rabi_mhz,
            detuning_mhz: 0.0,
            polarization: Polarization([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
            envelope: Envelope::Square { start_us: 0.0, end_us: t2 },
        },
    ];
    let gen = build_generator(&sys, &beams)?;
    let rho0 = diag_state(n, &[(s_minus, 0.5), (s_plus, 0.5)]);
    // exact steps aligned with both switch-off times
    let dt = pump.repump_tail_ns.min(pump.duration_ns).max(1.0) * 1e-3 / 10.0;
    let a = evolve_exact(&rho0, &gen, (0.0, t1), t1 / (t1 / dt).ceil())?;
    let b = evolve_exact(a.final_state(), &gen, (t1, t2), (t2 - t1) / ((t2 - t1) / dt).ceil().max(1.0))?;
    let rho = b.final_state();
    let (pm, pp) = (rho[(s_minus, s_minus)].re, rho[(s_plus, s_plus)].re);
    let norm = pm + pp;
    Ok([pm / norm, pp / norm])
}

/// Runs pumping (if configured) and the excitation pulse, returning the 1092 nm
/// emission-time densities on the configured grid.
pub fn simulate_excitation(cfg: &ExcitationConfig) -> Result<ExcitationResult> {
    let sys = cfg.atom.system();
    let n = sys.dim();
    let s_minus = sys.index(S12, -1)?;
    let s_plus = sys.index(S12, 1)?;
    let initial_s = match &cfg.pumping {
        Some(p) => pumped_ground_state(&cfg.atom, p)?,
        None => [0.0, 1.0],
    };
    let p = &cfg.pulse;
    let beam = LaserBeam {
        transition: "422".into(),
        rabi_mhz: p.rabi_mhz,
        detuning_mhz: p.detuning_mhz,
        polarization: polarization_422(-1, p.polarization_error, p.pi_share)?,
        envelope: Envelope::Smooth {
            start_us: p.start_ns * 1e-3,
            rise_us: p.rise_ns * 1e-3,
            hold_us: p.hold_ns * 1e-3,
            fall_us: p.fall_ns * 1e-3,
        },
    };
    let gen = build_generator(&sys, &[beam])?;
    if !(cfg.grid_step_ns > 0.0) || !(cfg.t_end_ns > cfg.grid_step_ns) {
        return Err(Error::Config("excitation grid needs 0 < step < t_end".into()));
    }
    let record = cfg.grid_step_ns * 1e-3;
    let sub = (record / gen.max_step()).ceil().max(1.0) as usize;
    let rho0 = diag_state(n, &[(s_minus, initial_s[0]), (s_plus, initial_s[1])]);
    let run = evolve_strided(&rho0, &gen, (0.0, cfg.t_end_ns * 1e-3), record / sub as f64, sub)?;
    let pdf = emission_pdf(&run, &sys, "1092")?;
    let gamma = 1e3 / cfg.atom.p12_lifetime_ns;
    let p_idx = sys.indices_of(P12)?;
    let mut excitations = 0.0;
    for k in 0..run.times.len() - 1 {
        let pa: f64 = p_idx.iter().map(|&i| run.states[k][(i, i)].re).sum();
        let pb: f64 = p_idx.iter().map(|&i| run.states[k + 1][(i, i)].re).sum();
        excitations += 0.5 * (run.times[k + 1] - run.times[k]) * gamma * (pa + pb);
    }
    let final_d32_population = sys.indices_of(D32)?.iter().map(|&i| run.final_state()[(i, i)].re).sum();
    Ok(ExcitationResult {
        emission_probability: pdf.emission_probability().unwrap_or(0.0),
        pdf,
        excitations,
        final_d32_population,
        initial_s,
    })
}

fn default_probe_end() -> f64 {
    100.0
}
fn default_fit_start() -> f64 {
    0.5
}
fn default_probe_step() -> f64 {
    0.5
}

/// Long constant 422 nm probe of a pumped ion without repump. A perfect σ
/// beam leaves the pumped state dark, so the 1092 nm emission comes from the
/// polarization impurity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub atom: Atom,
    /// +1 for σ+ (ion prepared in `S1/2(+1/2)`), −1 for σ− (prepared in `S1/2(−1/2)`).
    pub handedness: i32,
    pub rabi_mhz: f64,
    #[serde(default)]
    pub detuning_mhz: f64,
    #[serde(default = "default_split")]
    pub pi_share: f64,
    #[serde(default = "default_fit_start")]
    pub fit_start_us: f64,
    #[serde(default = "default_probe_end")]
    pub fit_end_us: f64,
    #[serde(default = "default_probe_step")]
    pub step_us: f64,
}

impl CalibrationConfig {
    pub fn sigma(handedness: i32) -> Self {
        Self {
            atom: Atom::default(),
            handedness,
            rabi_mhz: 40.0,
            detuning_mhz: 0.0,
            pi_share: default_split(),
            fit_start_us: default_fit_start(),
            fit_end_us: default_probe_end(),
            step_us: default_probe_step(),
        }
    }

    /// Sample times inside the fit range.
    pub fn times(&self) -> Vec<f64> {
        let k0 = (self.fit_start_us / self.step_us).ceil() as usize;
        let k1 = (self.fit_end_us / self.step_us).floor() as usize;
        (k0..=k1).map(|k| k as f64 * self.step_us).collect()
    }
}

/// 1092 nm emission density at `times` (µs, on the step grid) for polarization
/// error `eps`, normalized to unit trapezoid integral over those times.
pub fn calibration_trace(cfg: &CalibrationConfig, eps: f64, times: &[f64]) -> Result<Vec<f64>> {
    let sys = cfg.atom.system();
    let n = sys.dim();
    let start = sys.index(S12, if cfg.handedness > 0 { 1 } else { -1 })?;
    let beam = LaserBeam {
        transition: "422".into(),
        rabi_mhz: cfg.rabi_mhz,
        detuning_mhz: cfg.detuning_mhz,
        polarization: polarization_422(cfg.handedness, eps, cfg.pi_share)?,
        envelope: Envelope::Constant,
    };
    let gen = build_generator(&sys, &[beam])?;
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let run = evolve_exact(&diag_state(n, &[(start, 1.0)]), &gen, (0.0, t_max), cfg.step_us)?;
    let p_idx = sys.indices_of(P12)?;
    let mut y = Vec::with_capacity(times.len());
    for &t in times {
        let k = (t / cfg.step_us).round() as usize;
        if (k as f64 * cfg.step_us - t).abs() > 1e-9 {
            return Err(Error::Config(format!("time {t} µs is not on the {} µs grid", cfg.step_us)));
        }
        y.push(p_idx.iter().map(|&i| run.states[k][(i, i)].re).sum::<f64>());
    }
    let mut area = 0.0;
    for k in 0..times.len().saturating_sub(1) {
        area += 0.5 * (times[k + 1] - times[k]) * (y[k] + y[k + 1]);
    }
    if !(area > 0.0) {
        return Err(Error::Config("calibration trace has no emission".into()));
    }
    Ok(y.into_iter().map(|v| v / area).collect())
}
