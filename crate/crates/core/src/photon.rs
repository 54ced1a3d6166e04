//! Polarization optics, fiber transmission and detection gating.
//!
//! Jones convention: `|R⟩ = (|H⟩ − i|V⟩)/√2`, and a retarder of retardance δ
//! with fast axis at θ acts as `R(θ)·diag(e^{−iδ/2}, e^{iδ/2})·R(−θ)`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::qdm::{kron, partial_trace, tensor, DensityMatrix, Subsystem, ZERO};
use crate::source::{EmissionTimePdf, JointLinkState};
use crate::{Error, Result, C64};

/// Speed of light in vacuum, km/µs.
pub const C_KM_PER_US: f64 = 0.299_792_458;

/// Group index that turns 2.8 km into a 13.613 µs delay.
pub const DEFAULT_GROUP_INDEX: f64 = 1.457_525;

const UNITARY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveplateSetting {
    /// Radians; π for a half-wave plate, π/2 for a quarter-wave plate.
    pub retardance: f64,
    /// Fast-axis angle from H, radians.
    pub angle: f64,
}

impl WaveplateSetting {
    pub fn half(angle: f64) -> Self {
        Self { retardance: PI, angle }
    }

    pub fn quarter(angle: f64) -> Self {
        Self { retardance: FRAC_PI_2, angle }
    }

    /// Same plate with its retardance scaled by `1 + rel_error`.
    pub fn with_retardance_error(self, rel_error: f64) -> Self {
        Self {
            retardance: self.retardance * (1.0 + rel_error),
            ..self
        }
    }
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn waveplate_unitary(w: WaveplateSetting) -> DMatrix<C64> {
    let (s, co) = w.angle.sin_cos();
    let rot = |sgn: f64| DMatrix::from_row_slice(2, 2, &[c(co, 0.0), c(-sgn * s, 0.0), c(sgn * s, 0.0), c(co, 0.0)]);
    let half = w.retardance / 2.0;
    let ret = DMatrix::from_row_slice(2, 2, &[C64::from_polar(1.0, -half), ZERO, ZERO, C64::from_polar(1.0, half)]);
    rot(1.0) * ret * rot(-1.0)
}

/// Photon analysis basis; the listed state exits the splitter's H port.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhotonBasis {
    H,
    D,
    R,
}

impl PhotonBasis {
    pub const ALL: [PhotonBasis; 3] = [PhotonBasis::H, PhotonBasis::D, PhotonBasis::R];

    /// `(|+⟩, |−⟩)` of the basis as Jones vectors.
    pub fn states(self) -> [[C64; 2]; 2] {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            PhotonBasis::H => [[c(1.0, 0.0), ZERO], [ZERO, c(1.0, 0.0)]],
            PhotonBasis::D => [[c(r, 0.0), c(r, 0.0)], [c(r, 0.0), c(-r, 0.0)]],
            PhotonBasis::R => [[c(r, 0.0), c(0.0, -r)], [c(r, 0.0), c(0.0, r)]],
        }
    }
}

/// `(λ/4, λ/2, λ/4)` settings in the order the photon meets them.
pub fn analysis_setting(basis: PhotonBasis) -> [WaveplateSetting; 3] {
    let (q1, h) = match basis {
        PhotonBasis::H => (0.0, 0.0),
        PhotonBasis::D => (FRAC_PI_4, FRAC_PI_8),
        PhotonBasis::R => (FRAC_PI_4, FRAC_PI_4),
    };
    [WaveplateSetting::quarter(q1), WaveplateSetting::half(h), WaveplateSetting::quarter(0.0)]
}

/// Composite operator of a waveplate stack.
pub fn stack_unitary(plates: &[WaveplateSetting]) -> DMatrix<C64> {
    plates
        .iter()
        .fold(DMatrix::identity(2, 2), |acc, &w| waveplate_unitary(w) * acc)
}

/// 2×2 complex matrix serialized as `[[[re, im], [re, im]], [[re, im], [re, im]]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[[f64; 2]; 2]; 2]", into = "[[[f64; 2]; 2]; 2]")]
pub struct JonesMatrix(DMatrix<C64>);

impl JonesMatrix {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != 2 || m.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: m.nrows() });
        }
        let defect = (m.adjoint() * &m - DMatrix::<C64>::identity(2, 2))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if defect > UNITARY_TOL {
            return Err(Error::Config(format!("Jones matrix not unitary (defect {defect:e})")));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(DMatrix::identity(2, 2))
    }

    /// `exp(−i θ n·σ/2)` for a unit Poincaré-sphere axis `n` (normalized here).
    pub fn rotation(axis: [f64; 3], angle: f64) -> Result<Self> {
        let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Config("rotation axis must be nonzero".into()));
        }
        let [x, y, z] = axis.map(|a| a / norm);
        let (s, co) = (angle / 2.0).sin_cos();
        Self::new(DMatrix::from_row_slice(
            2,
            2,
            &[c(co, -s * z), c(-s * y, -s * x), c(s * y, -s * x), c(co, s * z)],
        ))
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }
}

impl TryFrom<[[[f64; 2]; 2]; 2]> for JonesMatrix {
    type Error = Error;

    fn try_from(a: [[[f64; 2]; 2]; 2]) -> Result<Self> {
        let m = DMatrix::from_fn(2, 2, |i, j| c(a[i][j][0], a[i][j][1]));
        Self::new(m)
    }
}

impl From<JonesMatrix> for [[[f64; 2]; 2]; 2] {
    fn from(m: JonesMatrix) -> Self {
        let e = |i: usize, j: usize| [m.0[(i, j)].re, m.0[(i, j)].im];
        [[e(0, 0), e(0, 1)], [e(1, 0), e(1, 1)]]
    }
}

/// Slow polarization drift: rotation about a fixed axis by `rate · t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub axis: [f64; 3],
    pub rate_rad_per_s: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            rate_rad_per_s: 0.0,
        }
    }
}

impl DriftModel {
    pub fn unitary(&self, wall_time_s: f64) -> Result<JonesMatrix> {
        JonesMatrix::rotation(self.axis, self.rate_rad_per_s * wall_time_s)
    }
}

fn default_group_index() -> f64 {
    DEFAULT_GROUP_INDEX
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberModel {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    /// Transmission factor for splices and connectors on top of attenuation.
    #[serde(default = "one")]
    pub extra_loss: f64,
    #[serde(default = "JonesMatrix::identity")]
    pub static_rotation: JonesMatrix,
    #[serde(default)]
    pub drift: DriftModel,
    #[serde(default)]
    pub depolarization: f64,
    #[serde(default = "default_group_index")]
    pub group_index: f64,
}

impl Default for FiberModel {
    fn default() -> Self {
        Self {
            length_km: 0.0,
            attenuation_db_per_km: 0.0,
            extra_loss: 1.0,
            static_rotation: JonesMatrix::identity(),
            drift: DriftModel::default(),
            depolarization: 0.0,
            group_index: DEFAULT_GROUP_INDEX,
        }
    }
}

impl FiberModel {
    /// Problems with the parameters, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        check(self.length_km >= 0.0, "fiber.length_km must be ≥ 0");
        check(self.attenuation_db_per_km >= 0.0, "fiber.attenuation_db_per_km must be ≥ 0");
        check((0.0..=1.0).contains(&self.extra_loss), "fiber.extra_loss must be in [0, 1]");
        check((0.0..=1.0).contains(&self.depolarization), "fiber.depolarization must be in [0, 1]");
        check(self.group_index > 0.0, "fiber.group_index must be > 0");
        check(
            self.drift.axis.iter().any(|a| *a != 0.0) && self.drift.rate_rad_per_s.is_finite(),
            "fiber.drift needs a nonzero axis and finite rate",
        );
        v
    }

    pub fn survival(&self) -> f64 {
        fiber_survival(self.length_km, self.attenuation_db_per_km, self.extra_loss)
    }

    pub fn latency_us(&self) -> f64 {
        fiber_latency(self.length_km, self.group_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub efficiency: f64,
    #[serde(default)]
    pub dark_count_rate_per_s: f64,
    /// Detection gate `(t_i, t_f)` in ns relative to the excitation pulse start.
    pub window_ns: (f64, f64),
}

impl DetectorModel {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.efficiency) {
            v.push("detector.efficiency must be in [0, 1]".into());
        }
        if !(self.dark_count_rate_per_s >= 0.0) {
            v.push("detector.dark_count_rate_per_s must be ≥ 0".into());
        }
        if !(self.window_ns.0 < self.window_ns.1) {
            v.push("detector.window_ns must satisfy t_i < t_f".into());
        }
        v
    }

    pub fn window_len_ns(&self) -> f64 {
        self.window_ns.1 - self.window_ns.0
    }

    /// Probability of at least one dark count inside the gate.
    pub fn dark_herald_probability(&self) -> f64 {
        -(-self.dark_count_rate_per_s * self.window_len_ns() * 1e-9).exp_m1()
    }
}

/// Transmission of `length` km at `attenuation` dB/km times an extra factor.
pub fn fiber_survival(length_km: f64, attenuation_db_per_km: f64, extra_loss: f64) -> f64 {
    10f64.powf(-length_km * attenuation_db_per_km / 10.0) * extra_loss
}

/// One-way propagation delay in µs.
pub fn fiber_latency(length_km: f64, group_index: f64) -> f64 {
    length_km * group_index / C_KM_PER_US
}

/// Photon-side depolarization with probability `p`: `ρ → (1−p)ρ + p·I/2 ⊗ Tr_ph ρ`.
pub fn depolarize_photon(rho: &DensityMatrix, p: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::out_of_range("depolarization", p));
    }
    let ion = partial_trace(rho, Subsystem::Ion)?;
    let mixed = tensor(&DensityMatrix::maximally_mixed(2), &ion);
    DensityMatrix::from_hermitian(&(rho.matrix() * c(1.0 - p, 0.0) + mixed.matrix() * c(p, 0.0)))
}

/// Applies a photon-only unitary to a joint state.
pub fn rotate_photon(rho: &DensityMatrix, u: &DMatrix<C64>) -> Result<DensityMatrix> {
    rho.conjugate(&kron(u, &DMatrix::identity(2, 2)))
}

/// Transmits the photon of `state`; returns the conditional state and the survival probability.
pub fn apply_fiber(state: &JointLinkState, model: &FiberModel, wall_time_s: f64) -> Result<(JointLinkState, f64)> {
    let u = model.static_rotation.matrix() * model.drift.unitary(wall_time_s)?.matrix();
    let rho = rotate_photon(&state.rho, &u)?;
    let rho = depolarize_photon(&rho, model.depolarization)?;
    Ok((JointLinkState::new(rho, state.p_leak)?, model.survival()))
}

fn check_window(pdf: &EmissionTimePdf, det: &DetectorModel) -> Result<(f64, f64)> {
    let (a, b) = pdf.support();
    let (t_i, t_f) = (det.window_ns.0.max(a), det.window_ns.1.min(b));
    if t_f <= t_i {
        return Err(Error::EmptyWindow(format!(
            "gate {:?} ns does not overlap emission support [{a}, {b}] ns",
            det.window_ns
        )));
    }
    Ok((t_i, t_f))
}

/// Fraction of the emission density that falls inside the detection gate.
pub fn window_capture(pdf: &EmissionTimePdf, det: &DetectorModel) -> Result<f64> {
    let (t_i, t_f) = check_window(pdf, det)?;
    let (m, p) = pdf.window_integrals(t_i, t_f);
    Ok((m + p) / pdf.total_integral())
}

const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
];

/// Magnitude of the arrival-time-averaged qubit phase factor inside the gate.
///
/// `qubit_splitting_mhz` converts arrival-time spread into ion phase.
pub fn arrival_phase_coherence(pdf: &EmissionTimePdf, det: &DetectorModel, qubit_splitting_mhz: f64) -> Result<f64> {
    let (t_i, t_f) = check_window(pdf, det)?;
    let omega = 2.0 * PI * qubit_splitting_mhz * 1e-3; // rad/ns
    let t = pdf.times();
    let mut edges: Vec<f64> = vec![t_i];
    edges.extend(t.iter().copied().filter(|&x| x > t_i && x < t_f));
    edges.push(t_f);
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
        for (x, wt) in GL5 {
            let tt = mid + half * x;
            let p = pdf.density(tt);
            num += C64::from_polar(p * wt * half, omega * tt);
            den += p * wt * half;
        }
    }
    if den <= 0.0 {
        return Err(Error::EmptyWindow("no emission inside gate".into()));
    }
    Ok((num.norm() / den).min(1.0))
}
