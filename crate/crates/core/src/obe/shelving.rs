//! Electron shelving of `D3/2(+1/2)` into `D5/2` for state readout.
//!
//! 408 nm σ+ light moves `S1/2` population through `P3/2`, a fraction of which
//! lands in the long-lived `D5/2` manifold; 1004 nm σ− light on `D3/2 ↔ P3/2`
//! carries `D3/2(+1/2)` along the same path. `D3/2(−3/2)` is dark to ideal σ−
//! light and stays put (bright in fluorescence detection).

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_generator, to_real, Envelope, LaserBeam, LevelSystem, Manifold, Polarization, Propagator, Transition};
use crate::{Error, Result};

fn default_b() -> f64 {
    5.0
}
fn default_tau() -> f64 {
    6.63
}
fn default_branching() -> [f64; 3] {
    [0.9441, 0.0493, 0.0066]
}
fn default_d52() -> f64 {
    395.0
}
fn default_detection() -> f64 {
    0.5
}
fn default_split() -> f64 {
    0.5
}

/// Which qubit state starts the shelving sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QubitState {
    /// `D3/2(−3/2)`
    Zero,
    /// `D3/2(+1/2)`
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShelvingConfig {
    #[serde(default = "default_b")]
    pub b_field_gauss: f64,
    #[serde(default = "default_tau")]
    pub p32_lifetime_ns: f64,
    /// `P3/2` decay branching to `S1/2`, `D5/2`, `D3/2`.
    #[serde(default = "default_branching")]
    pub branching: [f64; 3],
    #[serde(default = "default_d52")]
    pub d52_lifetime_ms: f64,
    #[serde(default = "default_detection")]
    pub detection_time_ms: f64,
    pub rabi_408_mhz: f64,
    #[serde(default)]
    pub detuning_408_mhz: f64,
    pub rabi_1004_mhz: f64,
    /// Share of the 1004 nm polarization error in π light.
    #[serde(default = "default_split")]
    pub pi_share_1004: f64,
    /// Candidate shelving times, µs.
    pub time_start_us: f64,
    pub time_stop_us: f64,
    pub time_step_us: f64,
}

impl Default for ShelvingConfig {
    fn default() -> Self {
        Self {
            b_field_gauss: default_b(),
            p32_lifetime_ns: default_tau(),
            branching: default_branching(),
            d52_lifetime_ms: default_d52(),
            detection_time_ms: default_detection(),
            rabi_408_mhz: 40.0,
            detuning_408_mhz: 0.0,
            rabi_1004_mhz: 5.0,
            pi_share_1004: default_split(),
            time_start_us: 0.5,
            time_stop_us: 8.0,
            time_step_us: 0.1,
        }
    }
}

impl ShelvingConfig {
    pub fn system(&self) -> LevelSystem {
        let [b_s, b_d52, b_d32] = self.branching;
        let m = |label: &str, two_j: u32, g: f64, tau: Option<f64>| Manifold {
            label: label.into(),
            two_j,
            lande_g: g,
            lifetime_ns: tau,
        };
        let t = |name: &str, lower: &str, b: f64| Transition {
            name: name.into(),
            upper: "P3/2".into(),
            lower: lower.into(),
            branching: b,
        };
        LevelSystem {
            manifolds: vec![
                m("S1/2", 1, 2.0, None),
                m("P3/2", 3, 4.0 / 3.0, Some(self.p32_lifetime_ns)),
                m("D3/2", 3, 0.8, None),
                m("D5/2", 5, 1.2, None),
            ],
            transitions: vec![t("408", "S1/2", b_s), t("1033", "D5/2", b_d52), t("1004", "D3/2", b_d32)],
            b_field_gauss: self.b_field_gauss,
        }
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        let (a, b, h) = (self.time_start_us, self.time_stop_us, self.time_step_us);
        if !(h > 0.0) || !(a >= 0.0) || !(b >= a) {
            return Err(Error::Config(format!("bad shelving time grid {a}..{b} step {h}")));
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| a + k as f64 * h).collect())
    }
}

/// Bright probability after shelving for `times.len()` grid points, for both
/// qubit states: `(bright(|0⟩), bright(|1⟩))`.
fn bright_curves(cfg: &ShelvingConfig, detuning_mhz: f64, pol_error: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let times = cfg.times()?;
    let sys = cfg.system();
    let beams = [
        LaserBeam {
            transition: "408".into(),
            rabi_mhz: cfg.rabi_408_mhz,
            detuning_mhz: cfg.detuning_408_mhz,
            polarization: Polarization::SIGMA_PLUS,
            envelope: Envelope::Constant,
        },
        LaserBeam {
            transition: "1004".into(),
            rabi_mhz: cfg.rabi_1004_mhz,
            detuning_mhz,
            polarization: Polarization::circular_with_error(-1, pol_error, cfg.pi_share_1004)?,
            envelope: Envelope::Constant,
        },
    ];
    let gen = build_generator(&sys, &beams)?;
    let n = sys.dim();
    let p32 = sys.indices_of("P3/2")?;
    let d52 = sys.indices_of("D5/2")?;
    let survive = (-cfg.detection_time_ms / cfg.d52_lifetime_ms).exp();
    let b_d52 = cfg.branching[1];
    let bright = |r: &DVector<f64>| {
        // diagonal real coordinates are the populations
        let pop = |idx: &[usize]| idx.iter().map(|&i| r[i * n + i]).sum::<f64>();
        (1.0 - pop(&d52) * survive - b_d52 * pop(&p32)).clamp(0.0, 1.0)
    };
    let mut r0 = to_real(&sys.pure_population("D3/2", -3)?);
    let mut r1 = to_real(&sys.pure_population("D3/2", 1)?);
    let lead = Propagator::new(&gen, 0.0, times[0]);
    if times[0] > 0.0 {
        r0 = lead.step_real(&r0);
        r1 = lead.step_real(&r1);
    }
    let step = Propagator::new(&gen, 0.0, cfg.time_step_us);
    let (mut c0, mut c1) = (Vec::with_capacity(times.len()), Vec::with_capacity(times.len()));
    for k in 0..times.len() {
        if k > 0 {
            r0 = step.step_real(&r0);
            r1 = step.step_real(&r1);
        }
        c0.push(bright(&r0));
        c1.push(bright(&r1));
    }
    Ok((c0, c1))
}

/// Probability of a bright detection after shelving for `shelve_time_us`.
pub fn shelving_outcome(
    cfg: &ShelvingConfig,
    detuning_mhz: f64,
    pol_error: f64,
    shelve_time_us: f64,
    initial: QubitState,
) -> Result<f64> {
    let mut one = cfg.clone();
    one.time_start_us = shelve_time_us;
    one.time_stop_us = shelve_time_us;
    one.time_step_us = 1.0;
    let (c0, c1) = bright_curves(&one, detuning_mhz, pol_error)?;
    Ok(match initial {
        QubitState::Zero => c0[0],
        QubitState::One => c1[0],
    })
}

/// Best point on the shelving-time grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShelvingOptimum {
    pub shelve_time_us: f64,
    pub contrast: f64,
    pub bright_zero: f64,
    pub bright_one: f64,
}

/// Maximizes `bright(|0⟩) − bright(|1⟩)` over the time grid; ties go to the
/// shorter time.
pub fn optimize_shelve_time(cfg: &ShelvingConfig, detuning_mhz: f64, pol_error: f64) -> Result<ShelvingOptimum> {
    let times = cfg.times()?;
    let (c0, c1) = bright_curves(cfg, detuning_mhz, pol_error)?;
    let mut best = 0;
    for k in 1..times.len() {
        if c0[k] - c1[k] > c0[best] - c1[best] + 1e-12 {
            best = k;
        }
    }
    Ok(ShelvingOptimum {
        shelve_time_us: times[best],
        contrast: c0[best] - c1[best],
        bright_zero: c0[best],
        bright_one: c1[best],
    })
}

/// Optimized contrast at each 1004 nm detuning.
pub fn contrast_scan(cfg: &ShelvingConfig, detunings_mhz: &[f64], pol_error: f64) -> Result<Vec<ShelvingOptimum>> {
    detunings_mhz
        .par_iter()
        .map(|&d| optimize_shelve_time(cfg, d, pol_error))
        .collect()
}
