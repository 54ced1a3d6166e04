//! Multi-level Lindblad master equation for atoms driven by a few lasers.
//!
//! A [`LevelSystem`] is a set of fine-structure manifolds whose Zeeman
//! sublevels form the basis. Dipole decays between manifolds get one jump
//! operator per photon polarization with Clebsch-Gordan weights. Beams are
//! treated in the rotating-wave approximation in a frame where every manifold
//! connected by a beam rotates at the laser frequency.
//!
//! Units: time in µs, rates in 1/µs, frequencies given in MHz and converted to
//! rad/µs internally.

pub mod excitation;
pub mod fit;
pub mod shelving;

use std::collections::{HashMap, VecDeque};
use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::qdm::{hermitian_eigenvalues, ZERO};
use crate::source::EmissionTimePdf;
use crate::{Error, Result, C64};

/// Bohr magneton over h, MHz/G.
pub const BOHR_MHZ_PER_GAUSS: f64 = 1.399_624_6;

const BRANCHING_TOL: f64 = 1e-9;

fn factorial(n2: i64) -> f64 {
    debug_assert!(n2 % 2 == 0 && n2 >= 0);
    (1..=n2 / 2).map(|k| k as f64).product()
}

/// `⟨j1 m1; j2 m2 | J M⟩` with every argument doubled (so half-integers are odd).
pub fn clebsch_gordan(tj1: i64, tm1: i64, tj2: i64, tm2: i64, tj: i64, tm: i64) -> f64 {
    if tm1 + tm2 != tm || tm1.abs() > tj1 || tm2.abs() > tj2 || tm.abs() > tj {
        return 0.0;
    }
    if (tj1 + tm1) % 2 != 0 || (tj2 + tm2) % 2 != 0 || (tj + tm) % 2 != 0 {
        return 0.0;
    }
    if tj > tj1 + tj2 || tj < (tj1 - tj2).abs() || (tj1 + tj2 + tj) % 2 != 0 {
        return 0.0;
    }
    let pre = ((tj + 1) as f64 * factorial(tj + tj1 - tj2) * factorial(tj - tj1 + tj2) * factorial(tj1 + tj2 - tj)
        / factorial(tj1 + tj2 + tj + 2))
    .sqrt();
    let norm = (factorial(tj + tm)
        * factorial(tj - tm)
        * factorial(tj1 - tm1)
        * factorial(tj1 + tm1)
        * factorial(tj2 - tm2)
        * factorial(tj2 + tm2))
    .sqrt();
    let mut sum = 0.0;
    let mut k2 = 0;
    loop {
        let args = [
            tj1 + tj2 - tj - k2,
            tj1 - tm1 - k2,
            tj2 + tm2 - k2,
            tj - tj2 + tm1 + k2,
            tj - tj1 - tm2 + k2,
        ];
        if args[..3].iter().any(|&a| a < 0) {
            break;
        }
        if args[3..].iter().all(|&a| a >= 0) {
            let sign = if (k2 / 2) % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign / (factorial(k2) * args.iter().map(|&a| factorial(a)).product::<f64>());
        }
        k2 += 2;
    }
    pre * norm * sum
}

/// Dipole matrix-element weight for `|J_l m_l⟩ ↔ |J_u m_u⟩` with `q = m_u − m_l`.
pub fn dipole_cg(two_jl: i64, two_ml: i64, two_ju: i64, two_mu: i64) -> f64 {
    clebsch_gordan(two_jl, two_ml, 2, two_mu - two_ml, two_ju, two_mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifold {
    pub label: String,
    /// Twice the total angular momentum J.
    pub two_j: u32,
    pub lande_g: f64,
    /// Radiative lifetime; `None` for levels that are stable on simulation timescales.
    #[serde(default)]
    pub lifetime_ns: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub name: String,
    pub upper: String,
    pub lower: String,
    /// Fraction of decays of `upper` that go to `lower`.
    pub branching: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSystem {
    pub manifolds: Vec<Manifold>,
    pub transitions: Vec<Transition>,
    pub b_field_gauss: f64,
}

/// One Zeeman sublevel.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub manifold: usize,
    pub label: String,
    pub two_j: i64,
    pub two_m: i64,
    /// Zeeman shift, rad/µs.
    pub zeeman: f64,
}

impl Level {
    pub fn name(&self) -> String {
        format!("{}({}{}/2)", self.label, if self.two_m >= 0 { "+" } else { "" }, self.two_m)
    }
}

impl LevelSystem {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, m) in self.manifolds.iter().enumerate() {
            if seen.insert(m.label.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate manifold {}", m.label)));
            }
            if let Some(t) = m.lifetime_ns {
                if !(t > 0.0) {
                    return Err(Error::Config(format!("{}: lifetime must be positive", m.label)));
                }
            }
        }
        let mut sums: HashMap<&str, f64> = HashMap::new();
        let mut names = HashMap::new();
        for t in &self.transitions {
            if names.insert(t.name.as_str(), ()).is_some() {
                return Err(Error::Config(format!("duplicate transition {}", t.name)));
            }
            let up = self.manifold(&t.upper)?;
            self.manifold(&t.lower)?;
            if up.lifetime_ns.is_none() {
                return Err(Error::Config(format!("transition {} decays from a stable manifold", t.name)));
            }
            if !(t.branching >= 0.0) {
                return Err(Error::Config(format!("transition {}: negative branching", t.name)));
            }
            *sums.entry(t.upper.as_str()).or_default() += t.branching;
        }
        for m in &self.manifolds {
            if m.lifetime_ns.is_some() {
                let s = sums.get(m.label.as_str()).copied().unwrap_or(0.0);
                if (s - 1.0).abs() > BRANCHING_TOL {
                    return Err(Error::Config(format!("branching fractions of {} sum to {s}", m.label)));
                }
            }
        }
        if !self.b_field_gauss.is_finite() {
            return Err(Error::Config("b_field_gauss must be finite".into()));
        }
        Ok(())
    }

    fn manifold(&self, label: &str) -> Result<&Manifold> {
        self.manifolds
            .iter()
            .find(|m| m.label == label)
            .ok_or_else(|| Error::Config(format!("unknown manifold {label}")))
    }

    fn manifold_index(&self, label: &str) -> Result<usize> {
        self.manifolds
            .iter()
            .position(|m| m.label == label)
            .ok_or_else(|| Error::Config(format!("unknown manifold {label}")))
    }

    pub fn transition(&self, name: &str) -> Result<&Transition> {
        self.transitions
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown transition {name}")))
    }

    /// Decay rate of a transition, 1/µs.
    pub fn rate(&self, t: &Transition) -> Result<f64> {
        let tau = self.manifold(&t.upper)?.lifetime_ns.unwrap_or(f64::INFINITY);
        Ok(t.branching / tau * 1e3)
    }

    /// Sublevels, manifold by manifold with `m` ascending.
    pub fn levels(&self) -> Vec<Level> {
        let mut out = Vec::new();
        for (i, m) in self.manifolds.iter().enumerate() {
            let tj = m.two_j as i64;
            for tm in (-tj..=tj).step_by(2) {
                out.push(Level {
                    manifold: i,
                    label: m.label.clone(),
                    two_j: tj,
                    two_m: tm,
                    zeeman: 2.0 * PI * BOHR_MHZ_PER_GAUSS * m.lande_g * (tm as f64 / 2.0) * self.b_field_gauss,
                });
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.manifolds.iter().map(|m| m.two_j as usize + 1).sum()
    }

    /// Basis index of `|label, m⟩` with `m = two_m/2`.
    pub fn index(&self, label: &str, two_m: i64) -> Result<usize> {
        self.levels()
            .iter()
            .position(|l| l.label == label && l.two_m == two_m)
            .ok_or_else(|| Error::Config(format!("no sublevel {label} m={two_m}/2")))
    }

    /// Basis indices of one manifold.
    pub fn indices_of(&self, label: &str) -> Result<Vec<usize>> {
        self.manifold_index(label)?;
        Ok(self
            .levels()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.label == label)
            .map(|(i, _)| i)
            .collect())
    }

    /// Pure population in one sublevel.
    pub fn pure_population(&self, label: &str, two_m: i64) -> Result<DMatrix<C64>> {
        let n = self.dim();
        let i = self.index(label, two_m)?;
        let mut rho = DMatrix::from_element(n, n, ZERO);
        rho[(i, i)] = C64::new(1.0, 0.0);
        Ok(rho)
    }
}

/// Time profile of a beam's field amplitude, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Envelope {
    Constant,
    /// On for `start ≤ t < end`.
    Square { start_us: f64, end_us: f64 },
    /// `sin²` rise, flat top, `sin²` fall.
    Smooth {
        start_us: f64,
        rise_us: f64,
        hold_us: f64,
        fall_us: f64,
    },
}

impl Envelope {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Envelope::Constant => 1.0,
            Envelope::Square { start_us, end_us } => {
                if t >= start_us && t < end_us {
                    1.0
                } else {
                    0.0
                }
            }
            Envelope::Smooth {
                start_us,
                rise_us,
                hold_us,
                fall_us,
            } => {
                let x = t - start_us;
                if x < 0.0 {
                    0.0
                } else if x < rise_us {
                    (PI / 2.0 * x / rise_us).sin().powi(2)
                } else if x < rise_us + hold_us {
                    1.0
                } else if x < rise_us + hold_us + fall_us {
                    (PI / 2.0 * (x - rise_us - hold_us) / fall_us).cos().powi(2)
                } else {
                    0.0
                }
            }
        }
    }

    /// Instants where the profile is not smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            Envelope::Constant => vec![],
            Envelope::Square { start_us, end_us } => vec![start_us, end_us],
            Envelope::Smooth {
                start_us,
                rise_us,
                hold_us,
                fall_us,
            } => vec![
                start_us,
                start_us + rise_us,
                start_us + rise_us + hold_us,
                start_us + rise_us + hold_us + fall_us,
            ],
        }
    }

    /// Whether the value is the same at every instant of `[a, b)`.
    pub fn is_constant_on(&self, a: f64, b: f64) -> bool {
        match *self {
            Envelope::Constant => true,
            Envelope::Square { start_us, end_us } => b <= start_us || a >= end_us || (a >= start_us && b <= end_us),
            Envelope::Smooth { .. } => {
                let bp = self.breakpoints();
                b <= bp[0] || a >= bp[3] || (a >= bp[1] && b <= bp[2])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Envelope::Constant => true,
            Envelope::Square { start_us, end_us } => start_us.is_finite() && end_us >= start_us,
            Envelope::Smooth {
                start_us,
                rise_us,
                hold_us,
                fall_us,
            } => start_us.is_finite() && rise_us >= 0.0 && hold_us >= 0.0 && fall_us >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid envelope {self:?}")))
        }
    }
}

/// Relative power in `(σ+, π, σ−)` components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polarization(pub [f64; 3]);

impl Polarization {
    pub const SIGMA_PLUS: Polarization = Polarization([1.0, 0.0, 0.0]);
    pub const PI: Polarization = Polarization([0.0, 1.0, 0.0]);
    pub const SIGMA_MINUS: Polarization = Polarization([0.0, 0.0, 1.0]);

    /// Nominal `σ±` light with a fraction `error` in the other components;
    /// `split` of it goes to π and the rest to the opposite circular component.
    pub fn circular_with_error(q: i32, error: f64, split: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&error) || !(0.0..=1.0).contains(&split) {
            return Err(Error::Config(format!("polarization error {error} / split {split} outside [0, 1]")));
        }
        let (main, pi, other) = (1.0 - error, error * split, error * (1.0 - split));
        match q {
            1 => Ok(Polarization([main, pi, other])),
            -1 => Ok(Polarization([other, pi, main])),
            _ => Err(Error::Config(format!("q = {q} is not circular"))),
        }
    }

    /// Power fraction of component `q ∈ {+1, 0, −1}`.
    pub fn fraction(&self, q: i64) -> f64 {
        match q {
            1 => self.0[0],
            0 => self.0[1],
            -1 => self.0[2],
            _ => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&f| f < 0.0) || (self.0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("polarization fractions {:?} must be ≥ 0 and sum to 1", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserBeam {
    pub transition: String,
    /// Rabi frequency for unit Clebsch-Gordan weight, MHz.
    pub rabi_mhz: f64,
    /// Laser minus transition frequency, MHz.
    pub detuning_mhz: f64,
    pub polarization: Polarization,
    pub envelope: Envelope,
}

/// Sparse jump operator.
#[derive(Clone, Debug)]
struct Jump {
    entries: Vec<(usize, usize, f64)>,
}

/// Time-dependent Lindblad generator.
#[derive(Clone, Debug)]
pub struct Generator {
    n: usize,
    h0: DMatrix<C64>,
    drives: Vec<(Envelope, DMatrix<C64>)>,
    jumps: Vec<Jump>,
    decay: DMatrix<C64>,
    rate_scale: f64,
}

pub fn build_generator(system: &LevelSystem, beams: &[LaserBeam]) -> Result<Generator> {
    system.validate()?;
    let levels = system.levels();
    let n = levels.len();
    let nm = system.manifolds.len();

    // rotating-frame offsets per manifold, propagated along beams
    let mut offset: Vec<Option<f64>> = vec![None; nm];
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nm];
    let mut scale: f64 = 0.0;
    for b in beams {
        let t = system.transition(&b.transition)?;
        b.polarization.validate()?;
        b.envelope.validate()?;
        if !(b.rabi_mhz >= 0.0) || !b.detuning_mhz.is_finite() {
            return Err(Error::Config(format!("beam on {}: bad Rabi frequency or detuning", b.transition)));
        }
        let (u, l) = (system.manifold_index(&t.upper)?, system.manifold_index(&t.lower)?);
        let d = -2.0 * PI * b.detuning_mhz;
        edges[l].push((u, d));
        edges[u].push((l, -d));
        scale = scale.max(2.0 * PI * b.rabi_mhz).max(d.abs());
    }
    for root in 0..nm {
        if offset[root].is_some() {
            continue;
        }
        offset[root] = Some(0.0);
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            let oa = offset[a].unwrap();
            for &(b, d) in &edges[a] {
                match offset[b] {
                    None => {
                        offset[b] = Some(oa + d);
                        queue.push_back(b);
                    }
                    Some(ob) if (ob - oa - d).abs() > 1e-9 * (1.0 + d.abs()) => {
                        return Err(Error::Config("beam detunings do not define a consistent rotating frame".into()));
                    }
                    Some(_) => {}
                }
            }
        }
    }

    let mut h0 = DMatrix::from_element(n, n, ZERO);
    for (i, l) in levels.iter().enumerate() {
        h0[(i, i)] = C64::new(l.zeeman + offset[l.manifold].unwrap(), 0.0);
        scale = scale.max(l.zeeman.abs());
    }

    let mut drives = Vec::with_capacity(beams.len());
    for b in beams {
        let t = system.transition(&b.transition)?;
        let mut v = DMatrix::from_element(n, n, ZERO);
        let half_omega = PI * b.rabi_mhz;
        for (il, l) in levels.iter().enumerate().filter(|(_, l)| l.label == t.lower) {
            for (iu, u) in levels.iter().enumerate().filter(|(_, u)| u.label == t.upper) {
                let q = (u.two_m - l.two_m) / 2;
                if (u.two_m - l.two_m).abs() > 2 {
                    continue;
                }
                let f = b.polarization.fraction(q);
                if f == 0.0 {
                    continue;
                }
                let g = half_omega * f.sqrt() * dipole_cg(l.two_j, l.two_m, u.two_j, u.two_m);
                v[(iu, il)] += C64::new(g, 0.0);
                v[(il, iu)] += C64::new(g, 0.0);
            }
        }
        drives.push((b.envelope.clone(), v));
    }

    let mut jumps = Vec::new();
    let mut decay = DMatrix::from_element(n, n, ZERO);
    for t in &system.transitions {
        let rate = system.rate(t)?;
        if rate == 0.0 {
            continue;
        }
        scale = scale.max(rate);
        for q in [-1i64, 0, 1] {
            let mut entries = Vec::new();
            for (iu, u) in levels.iter().enumerate().filter(|(_, u)| u.label == t.upper) {
                for (il, l) in levels.iter().enumerate().filter(|(_, l)| l.label == t.lower) {
                    if u.two_m - l.two_m != 2 * q {
                        continue;
                    }
                    let c = dipole_cg(l.two_j, l.two_m, u.two_j, u.two_m);
                    if c != 0.0 {
                        entries.push((il, iu, rate.sqrt() * c));
                    }
                }
            }
            if entries.is_empty() {
                continue;
            }
            for &(r1, c1, v1) in &entries {
                for &(r2, c2, v2) in &entries {
                    if r1 == r2 {
                        decay[(c2, c1)] += C64::new(v1 * v2, 0.0);
                    }
                }
            }
            jumps.push(Jump { entries });
        }
    }
    // summed decay rate per sublevel
    for i in 0..n {
        scale = scale.max(decay[(i, i)].re);
    }

    Ok(Generator {
        n,
        h0,
        drives,
        jumps,
        decay,
        rate_scale: scale,
    })
}

impl Generator {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Largest angular frequency or rate in the problem, 1/µs.
    pub fn rate_scale(&self) -> f64 {
        self.rate_scale
    }

    /// Largest step accepted by [`evolve`].
    pub fn max_step(&self) -> f64 {
        if self.rate_scale > 0.0 {
            0.01 / self.rate_scale
        } else {
            f64::INFINITY
        }
    }

    pub fn hamiltonian(&self, t: f64) -> DMatrix<C64> {
        let mut h = self.h0.clone();
        for (env, v) in &self.drives {
            let a = env.value(t);
            if a != 0.0 {
                h += v * C64::new(a, 0.0);
            }
        }
        h
    }

    /// Every instant where some envelope changes form.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.drives.iter().flat_map(|(e, _)| e.breakpoints()).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn is_constant_on(&self, a: f64, b: f64) -> bool {
        self.drives.iter().all(|(e, _)| e.is_constant_on(a, b))
    }

    fn apply_with(&self, h: &DMatrix<C64>, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let i = C64::new(0.0, 1.0);
        let half = C64::new(0.5, 0.0);
        let heff = h - &self.decay * (i * half);
        let hr = &heff * rho;
        let mut out = (&hr - hr.adjoint()) * (-i);
        // hr.adjoint() = ρ Heff†, valid because ρ is Hermitian
        for j in &self.jumps {
            for &(r1, c1, v1) in &j.entries {
                for &(r2, c2, v2) in &j.entries {
                    out[(r1, r2)] += rho[(c1, c2)] * (v1 * v2);
                }
            }
        }
        out
    }

    /// `dρ/dt` at time `t`.
    pub fn apply(&self, t: f64, rho: &DMatrix<C64>) -> DMatrix<C64> {
        self.apply_with(&self.hamiltonian(t), rho)
    }

    /// Column-stacked complex superoperator at time `t`.
    pub fn superoperator(&self, t: f64) -> DMatrix<C64> {
        let n = self.n;
        let h = self.hamiltonian(t);
        let mut s = DMatrix::from_element(n * n, n * n, ZERO);
        for a in 0..n {
            for b in 0..n {
                let mut e = DMatrix::from_element(n, n, ZERO);
                e[(a, b)] = C64::new(1.0, 0.0);
                // apply() assumes Hermitian input; split E_ab into Hermitian parts
                let (herm, anti) = hermitian_parts(&e);
                let out = self.apply_with(&h, &herm) + self.apply_with(&h, &anti) * C64::new(0.0, 1.0);
                let col = b * n + a;
                for c in 0..n {
                    for d in 0..n {
                        s[(d * n + c, col)] = out[(c, d)];
                    }
                }
            }
        }
        s
    }

    /// Real generator in the orthonormal Hermitian basis of [`to_real`].
    pub fn real_liouvillian(&self, t: f64) -> DMatrix<f64> {
        let n2 = self.n * self.n;
        let h = self.hamiltonian(t);
        let mut m = DMatrix::zeros(n2, n2);
        for k in 0..n2 {
            let b = hermitian_basis(self.n, k);
            let col = to_real(&self.apply_with(&h, &b));
            m.set_column(k, &col);
        }
        m
    }
}

fn hermitian_parts(e: &DMatrix<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let half = C64::new(0.5, 0.0);
    let herm = (e + e.adjoint()) * half;
    let anti = (e - e.adjoint()) * C64::new(0.0, -0.5);
    (herm, anti)
}

/// Basis element `k = i·n + j`: `E_ii`, `(E_ij + E_ji)/√2` for `i < j`, `i(E_ji − E_ij)/√2` for `i > j`.
pub fn hermitian_basis(n: usize, k: usize) -> DMatrix<C64> {
    let (i, j) = (k / n, k % n);
    let mut b = DMatrix::from_element(n, n, ZERO);
    let r = 1.0 / SQRT_2;
    match i.cmp(&j) {
        std::cmp::Ordering::Equal => b[(i, i)] = C64::new(1.0, 0.0),
        std::cmp::Ordering::Less => {
            b[(i, j)] = C64::new(r, 0.0);
            b[(j, i)] = C64::new(r, 0.0);
        }
        std::cmp::Ordering::Greater => {
            // Hermitian antisymmetric part for the pair (j, i), j < i
            b[(j, i)] = C64::new(0.0, r);
            b[(i, j)] = C64::new(0.0, -r);
        }
    }
    b
}

/// Coordinates of a Hermitian matrix in the basis of [`hermitian_basis`].
pub fn to_real(rho: &DMatrix<C64>) -> DVector<f64> {
    let n = rho.nrows();
    DVector::from_fn(n * n, |k, _| {
        let (i, j) = (k / n, k % n);
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => rho[(i, i)].re,
            std::cmp::Ordering::Less => SQRT_2 * rho[(i, j)].re,
            std::cmp::Ordering::Greater => SQRT_2 * rho[(j, i)].im,
        }
    })
}

pub fn from_real(r: &DVector<f64>, n: usize) -> DMatrix<C64> {
    let mut rho = DMatrix::from_element(n, n, ZERO);
    for i in 0..n {
        rho[(i, i)] = C64::new(r[i * n + i], 0.0);
        for j in i + 1..n {
            let z = C64::new(r[i * n + j], r[j * n + i]) / SQRT_2;
            rho[(i, j)] = z;
            rho[(j, i)] = z.conj();
        }
    }
    rho
}

/// Exact one-step map `exp(L·dt)` for a stretch where the generator is constant.
#[derive(Clone, Debug)]
pub struct Propagator {
    n: usize,
    map: DMatrix<f64>,
}

impl Propagator {
    pub fn new(gen: &Generator, t_eval: f64, dt: f64) -> Self {
        let m = gen.real_liouvillian(t_eval) * dt;
        Self { n: gen.n, map: m.exp() }
    }

    pub fn step_real(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.map * r
    }

    pub fn step(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        from_real(&self.step_real(&to_real(rho)), self.n)
    }
}

/// Recorded trajectory.
#[derive(Clone, Debug)]
pub struct LindbladRun {
    /// µs
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<C64>>,
}

impl LindbladRun {
    pub fn final_state(&self) -> &DMatrix<C64> {
        self.states.last().expect("non-empty run")
    }

    pub fn populations(&self, k: usize) -> Vec<f64> {
        self.states[k].diagonal().iter().map(|z| z.re).collect()
    }

    /// Population of basis state `i` along the run.
    pub fn population_series(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[(i, i)].re).collect()
    }

    pub fn max_trace_drift(&self) -> f64 {
        self.states
            .iter()
            .map(|s| (s.trace().re - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.states
            .iter()
            .map(|s| hermitian_eigenvalues(s).into_iter().fold(f64::INFINITY, f64::min))
            .fold(f64::INFINITY, f64::min)
    }

    /// CSV with `t_us` and one population column per level.
    pub fn write_csv<W: Write>(&self, system: &LevelSystem, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut header = vec!["t_us".to_string()];
        header.extend(system.levels().iter().map(Level::name));
        wr.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t:.16e}")];
            row.extend(s.diagonal().iter().map(|z| format!("{:.16e}", z.re)));
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Fixed-step RK4 from `t_span.0` to `t_span.1`, recording every `stride` steps
/// (the final state is always recorded).
pub fn evolve_strided(
    rho0: &DMatrix<C64>,
    gen: &Generator,
    t_span: (f64, f64),
    dt: f64,
    stride: usize,
) -> Result<LindbladRun> {
    if rho0.nrows() != gen.n || rho0.ncols() != gen.n {
        return Err(Error::DimensionMismatch { expected: gen.n, got: rho0.nrows() });
    }
    let (t0, t1) = t_span;
    if !(t1 >= t0) || !(dt > 0.0) {
        return Err(Error::Config(format!("bad time span {t_span:?} or step {dt}")));
    }
    // `dt` is an upper bound; the span is split into equal steps no longer than it
    let steps = ((t1 - t0) / dt - 1e-9).ceil().max(if t1 > t0 { 1.0 } else { 0.0 }) as usize;
    let h = if steps > 0 { (t1 - t0) / steps as f64 } else { 0.0 };
    let limit = gen.max_step();
    if h > limit * (1.0 + 1e-9) {
        return Err(Error::StepSize { dt: h, limit });
    }
    let stride = stride.max(1);
    let mut rho = rho0.clone();
    let mut times = vec![t0];
    let mut states = vec![rho.clone()];
    let half = C64::new(h / 2.0, 0.0);
    let full = C64::new(h, 0.0);
    let sixth = C64::new(h / 6.0, 0.0);
    let two = C64::new(2.0, 0.0);
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = gen.apply(t, &rho);
        let k2 = gen.apply(t + h / 2.0, &(&rho + &k1 * half));
        let k3 = gen.apply(t + h / 2.0, &(&rho + &k2 * half));
        let k4 = gen.apply(t + h, &(&rho + &k3 * full));
        rho += (k1 + k2 * two + k3 * two + k4) * sixth;
        if (k + 1) % stride == 0 || k + 1 == steps {
            times.push(t0 + (k + 1) as f64 * h);
            states.push(rho.clone());
        }
    }
    Ok(LindbladRun { times, states })
}

/// Fixed-step RK4 recording every step.
pub fn evolve(rho0: &DMatrix<C64>, gen: &Generator, t_span: (f64, f64), dt: f64) -> Result<LindbladRun> {
    evolve_strided(rho0, gen, t_span, dt, 1)
}

/// Exact piecewise propagation on a uniform record grid; every record step
/// must lie where the generator is constant.
pub fn evolve_exact(rho0: &DMatrix<C64>, gen: &Generator, t_span: (f64, f64), dt: f64) -> Result<LindbladRun> {
    let (t0, t1) = t_span;
    let steps = ((t1 - t0) / dt).round() as usize;
    let mut times = vec![t0];
    let mut states = vec![rho0.clone()];
    let mut r = to_real(rho0);
    let mut cache: Option<(DMatrix<C64>, Propagator)> = None;
    for k in 0..steps {
        let (a, b) = (t0 + k as f64 * dt, t0 + (k + 1) as f64 * dt);
        if !gen.is_constant_on(a, b) {
            return Err(Error::Config(format!("generator varies inside step [{a}, {b}] µs")));
        }
        let h = gen.hamiltonian(a);
        let reuse = matches!(&cache, Some((hc, _)) if *hc == h);
        if !reuse {
            cache = Some((h, Propagator::new(gen, a, dt)));
        }
        r = cache.as_ref().unwrap().1.step_real(&r);
        times.push(b);
        states.push(from_real(&r, gen.n));
    }
    Ok(LindbladRun { times, states })
}

/// Emission-time densities on the decay channel `transition`, whose upper
/// manifold must have exactly two sublevels (`m = −1/2` desired, `+1/2` error).
pub fn emission_pdf(run: &LindbladRun, system: &LevelSystem, transition: &str) -> Result<EmissionTimePdf> {
    let t = system.transition(transition)?;
    let rate = system.rate(t)?;
    let minus = system.index(&t.upper, -1)?;
    let plus = system.index(&t.upper, 1)?;
    if system.indices_of(&t.upper)?.len() != 2 {
        return Err(Error::Config(format!("{} must be a J = 1/2 manifold", t.upper)));
    }
    let t_ns: Vec<f64> = run.times.iter().map(|x| (x - run.times[0]) * 1e3).collect();
    let psi_minus: Vec<f64> = run.population_series(minus).iter().map(|p| rate * p.max(0.0)).collect();
    let psi_plus: Vec<f64> = run.population_series(plus).iter().map(|p| rate * p.max(0.0)).collect();
    // absolute emission probability: trapezoid of rate·population over µs
    let mut total = 0.0;
    for k in 0..t_ns.len() - 1 {
        let dt_us = (t_ns[k + 1] - t_ns[k]) * 1e-3;
        total += 0.5 * dt_us * (psi_minus[k] + psi_plus[k] + psi_minus[k + 1] + psi_plus[k + 1]);
    }
    EmissionTimePdf::from_unnormalized(t_ns, psi_minus, psi_plus, Some(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `J = 0 ↔ J = 1` atom driven on π so the coupled pair has unit weight.
    pub(crate) fn two_level(gamma: f64, rabi: f64, detuning: f64) -> (LevelSystem, Vec<LaserBeam>) {
        let system = LevelSystem {
            manifolds: vec![
                Manifold {
                    label: "g".into(),
                    two_j: 0,
                    lande_g: 0.0,
                    lifetime_ns: None,
                },
                Manifold {
                    label: "e".into(),
                    two_j: 2,
                    lande_g: 0.0,
                    lifetime_ns: if gamma > 0.0 { Some(1e3 / gamma) } else { None },
                },
            ],
            transitions: if gamma > 0.0 {
                vec![Transition {
                    name: "ge".into(),
                    upper: "e".into(),
                    lower: "g".into(),
                    branching: 1.0,
                }]
            } else {
                vec![]
            },
            b_field_gauss: 0.0,
        };
        let beams = if rabi > 0.0 || detuning != 0.0 {
            vec![LaserBeam {
                transition: "ge".into(),
                rabi_mhz: rabi / (2.0 * PI),
                detuning_mhz: detuning / (2.0 * PI),
                polarization: Polarization::PI,
                envelope: Envelope::Constant,
            }]
        } else {
            vec![]
        };
        (system, beams)
    }

    fn with_drive_transition(mut s: LevelSystem) -> LevelSystem {
        // a transition entry is needed for beams even without decay
        if s.transitions.is_empty() {
            s.manifolds[1].lifetime_ns = Some(1e30);
            s.transitions.push(Transition {
                name: "ge".into(),
                upper: "e".into(),
                lower: "g".into(),
                branching: 1.0,
            });
        }
        s
    }

    #[test]
    fn cg_known_values() {
        // P1/2(−1/2) → D3/2 weights 1/2 (σ+), 1/3 (π), 1/6 (σ−)
        let w = |ml: i64| dipole_cg(3, ml, 1, -1).powi(2);
        assert!((w(-3) - 0.5).abs() < 1e-14);
        assert!((w(-1) - 1.0 / 3.0).abs() < 1e-14);
        assert!((w(1) - 1.0 / 6.0).abs() < 1e-14);
        assert!((w(-3) / w(1) - 3.0).abs() < 1e-12);
        // P1/2(−1/2) → S1/2: 2/3 σ, 1/3 π
        assert!((dipole_cg(1, 1, 1, -1).powi(2) - 2.0 / 3.0).abs() < 1e-14);
        assert!((dipole_cg(1, -1, 1, -1).powi(2) - 1.0 / 3.0).abs() < 1e-14);
        assert_eq!(dipole_cg(1, 1, 1, 1).abs(), dipole_cg(1, -1, 1, -1).abs());
        assert!((dipole_cg(0, 0, 2, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cg_completeness() {
        for (tjl, tju) in [(1, 1), (1, 3), (3, 1), (3, 3), (5, 3), (3, 5)] {
            for tmu in (-tju..=tju).step_by(2) {
                let s: f64 = (-tjl..=tjl).step_by(2).map(|tml| dipole_cg(tjl, tml, tju, tmu).powi(2)).sum();
                assert!((s - 1.0).abs() < 1e-12, "{tjl} {tju} {tmu}: {s}");
            }
        }
    }

    #[test]
    fn no_beams_no_decay_is_zero() {
        let (s, b) = two_level(0.0, 0.0, 0.0);
        let g = build_generator(&s, &b).unwrap();
        assert!(g.superoperator(0.0).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn superoperator_matches_apply() {
        let (s, b) = two_level(3.0, 5.0, 1.5);
        let g = build_generator(&s, &b).unwrap();
        let n = g.dim();
        let rho = DMatrix::from_fn(n, n, |i, j| C64::new((i + 2 * j) as f64 * 0.01, (i as f64 - j as f64) * 0.02));
        let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
        let direct = g.apply(0.0, &rho);
        let s = g.superoperator(0.0);
        let v = DVector::from_fn(n * n, |k, _| rho[(k % n, k / n)]);
        let w = s * v;
        for k in 0..n * n {
            assert!((w[k] - direct[(k % n, k / n)]).norm() < 1e-12);
        }
    }

    #[test]
    fn real_coordinates_are_trace_inner_products() {
        let n = 3;
        let a = DMatrix::from_fn(n, n, |i, j| C64::new(i as f64 - 0.4 * j as f64, (i * j) as f64 + 0.2 * i as f64));
        let h = &a + a.adjoint();
        let r = to_real(&h);
        for k in 0..n * n {
            let ip = (hermitian_basis(n, k) * &h).trace();
            assert!((ip.re - r[k]).abs() < 1e-13 && ip.im.abs() < 1e-13);
        }
    }

    #[test]
    fn real_basis_round_trip() {
        let n = 4;
        let a = DMatrix::from_fn(n, n, |i, j| C64::new((i * j) as f64 + 0.3, i as f64 - 0.7 * j as f64));
        let h = &a + a.adjoint();
        let back = from_real(&to_real(&h), n);
        assert!((back - &h).iter().all(|z| z.norm() < 1e-13));
        for k in 0..n * n {
            for l in 0..n * n {
                let ip = (hermitian_basis(n, k) * hermitian_basis(n, l)).trace();
                let want = if k == l { 1.0 } else { 0.0 };
                assert!((ip - C64::new(want, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn rabi_pi_pulse() {
        let omega = 2.0 * PI * 10.0;
        let (s, b) = two_level(0.0, omega, 0.0);
        let s = with_drive_transition(s);
        let g = build_generator(&s, &b).unwrap();
        let e = s.index("e", 0).unwrap();
        let t_pi = PI / omega;
        let run = evolve(&s.pure_population("g", 0).unwrap(), &g, (0.0, t_pi), g.max_step() / 2.0).unwrap();
        assert!((run.final_state()[(e, e)].re - 1.0).abs() < 1e-6);
        // mid-way Rabi formula
        let run = evolve(&s.pure_population("g", 0).unwrap(), &g, (0.0, 0.3 * t_pi), g.max_step()).unwrap();
        let want = (omega * 0.3 * t_pi / 2.0).sin().powi(2);
        assert!((run.final_state()[(e, e)].re - want).abs() < 1e-6);
    }

    #[test]
    fn exponential_decay() {
        let gamma = 40.0;
        let (s, b) = two_level(gamma, 0.0, 0.0);
        let g = build_generator(&s, &b).unwrap();
        let e = s.index("e", 0).unwrap();
        let run = evolve(&s.pure_population("e", 0).unwrap(), &g, (0.0, 0.1), g.max_step()).unwrap();
        for (t, st) in run.times.iter().zip(&run.states).step_by(97) {
            assert!((st[(e, e)].re - (-gamma * t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn trace_drift_over_hundred_lifetimes() {
        let gamma = 20.0;
        let (s, b) = two_level(gamma, 30.0, 7.0);
        let g = build_generator(&s, &b).unwrap();
        let run = evolve_strided(&s.pure_population("g", 0).unwrap(), &g, (0.0, 100.0 / gamma), g.max_step(), 50).unwrap();
        assert!(run.max_trace_drift() < 1e-6);
        assert!(run.min_eigenvalue() > -1e-7);
    }

    #[test]
    fn steady_state_excited_population() {
        for (gamma, omega, delta) in [(10.0, 8.0, 0.0), (10.0, 20.0, 6.0), (30.0, 12.0, -15.0)] {
            let (s, b) = two_level(gamma, omega, delta);
            let g = build_generator(&s, &b).unwrap();
            let e = s.index("e", 0).unwrap();
            let run = evolve_exact(&s.pure_population("g", 0).unwrap(), &g, (0.0, 40.0 / gamma * 10.0), 1.0 / gamma).unwrap();
            let want = (omega * omega / 4.0) / (delta * delta + gamma * gamma / 4.0 + omega * omega / 2.0);
            assert!((run.final_state()[(e, e)].re - want).abs() < 1e-4, "{gamma} {omega} {delta}");
        }
    }

    #[test]
    fn exact_and_rk4_agree() {
        let (s, b) = two_level(25.0, 40.0, 9.0);
        let g = build_generator(&s, &b).unwrap();
        let rho0 = s.pure_population("g", 0).unwrap();
        let a = evolve(&rho0, &g, (0.0, 0.2), g.max_step()).unwrap();
        let x = evolve_exact(&rho0, &g, (0.0, 0.2), 0.01).unwrap();
        assert!((a.final_state() - x.final_state()).iter().all(|z| z.norm() < 1e-7));
    }

    #[test]
    fn step_halving_converges() {
        let (s, b) = two_level(25.0, 40.0, 9.0);
        let g = build_generator(&s, &b).unwrap();
        let rho0 = s.pure_population("g", 0).unwrap();
        let a = evolve(&rho0, &g, (0.0, 0.3), g.max_step()).unwrap();
        let h = evolve(&rho0, &g, (0.0, 0.3), g.max_step() / 2.0).unwrap();
        for i in 0..g.dim() {
            assert!((a.final_state()[(i, i)].re - h.final_state()[(i, i)].re).abs() < 1e-6);
        }
    }

    #[test]
    fn step_limit_enforced() {
        let (s, b) = two_level(25.0, 40.0, 9.0);
        let g = build_generator(&s, &b).unwrap();
        let rho0 = s.pure_population("g", 0).unwrap();
        assert!(matches!(evolve(&rho0, &g, (0.0, 1.0), 0.01), Err(Error::StepSize { .. })));
    }

    #[test]
    fn unknown_transition_rejected() {
        let (s, mut b) = two_level(25.0, 40.0, 9.0);
        b[0].transition = "nope".into();
        assert!(build_generator(&s, &b).is_err());
    }

    #[test]
    fn inconsistent_frame_rejected() {
        let (s, mut b) = two_level(25.0, 40.0, 9.0);
        let mut other = b[0].clone();
        other.detuning_mhz += 1.0;
        b.push(other);
        assert!(matches!(build_generator(&s, &b), Err(Error::Config(_))));
    }

    #[test]
    fn envelopes() {
        let e = Envelope::Smooth {
            start_us: 0.0,
            rise_us: 0.01,
            hold_us: 0.005,
            fall_us: 0.01,
        };
        assert_eq!(e.value(-1.0), 0.0);
        assert!((e.value(0.005) - 0.5).abs() < 1e-12);
        assert_eq!(e.value(0.012), 1.0);
        assert!((e.value(0.02) - 0.5).abs() < 1e-12);
        assert_eq!(e.value(0.03), 0.0);
        for k in 0..300 {
            let v = e.value(k as f64 * 1e-4);
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(e.is_constant_on(0.026, 1.0));
        assert!(!e.is_constant_on(0.0, 0.02));
    }
}
