//! The ion-photon state at emission and the emission-time densities that
//! decide which decay branch a detected photon came from.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::qdm::{DensityMatrix, KrausChannel, PureState};
use crate::{Error, Result};

/// Decay amplitudes of the two collected σ branches into the qubit states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmissionAmplitudes {
    pub amp_h0: f64,
    pub amp_v1: f64,
}

impl Default for EmissionAmplitudes {
    fn default() -> Self {
        // Clebsch-Gordan weights 3/4 and 1/4 of the two σ decays
        Self {
            amp_h0: 3f64.sqrt() / 2.0,
            amp_v1: 0.5,
        }
    }
}

impl EmissionAmplitudes {
    pub fn state(&self) -> Result<PureState> {
        PureState::new(nalgebra::DVector::from_vec(vec![
            crate::C64::new(self.amp_h0, 0.0),
            crate::qdm::ZERO,
            crate::qdm::ZERO,
            crate::C64::new(self.amp_v1, 0.0),
        ]))
    }
}

/// `√3/2 |H,0⟩ + 1/2 |V,1⟩`, the reference state for every fidelity in the crate.
pub fn target_state() -> PureState {
    EmissionAmplitudes::default().state().expect("normalized amplitudes")
}

/// Qubit-space state plus the probability that the ion left the qubit manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLinkState {
    pub rho: DensityMatrix,
    pub p_leak: f64,
}

impl JointLinkState {
    pub fn new(rho: DensityMatrix, p_leak: f64) -> Result<Self> {
        if rho.dim() != 4 {
            return Err(Error::DimensionMismatch { expected: 4, got: rho.dim() });
        }
        if !(0.0..=1.0).contains(&p_leak) {
            return Err(Error::out_of_range("p_leak", p_leak));
        }
        Ok(Self { rho, p_leak })
    }
}

pub fn ideal_state() -> JointLinkState {
    JointLinkState {
        rho: DensityMatrix::from_pure(&target_state()),
        p_leak: 0.0,
    }
}

/// State after excitation with desired-branch fraction `s`.
///
/// The error branch lands in Zeeman levels outside the qubit and is carried as
/// leakage only; the qubit-space state is the ideal one, optionally passed
/// through `extra`.
pub fn prepared_state(s: f64, extra: Option<&KrausChannel>) -> Result<JointLinkState> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::out_of_range("S", s));
    }
    let mut rho = DensityMatrix::from_pure(&target_state());
    if let Some(ch) = extra {
        rho = ch.apply(&rho)?;
    }
    JointLinkState::new(rho, 1.0 - s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Emission from the upper level that yields the target state.
    Desired,
    /// Emission from the wrongly excited upper level.
    Error,
}

/// Probability density (per ns) of 1092 nm emission for the two branches.
///
/// The densities are normalized so that their summed integral over the grid is
/// one; `emission_probability` records the absolute per-attempt emission
/// probability they were scaled from, when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionTimePdf {
    t_ns: Vec<f64>,
    psi_minus: Vec<f64>,
    psi_plus: Vec<f64>,
    emission_probability: Option<f64>,
    #[serde(skip)]
    cum_minus: Vec<f64>,
    #[serde(skip)]
    cum_plus: Vec<f64>,
}

/// Integral of the linear interpolant of `f` on cell `k` from `t[k]` to `x`.
fn partial_cell(t: &[f64], f: &[f64], k: usize, x: f64) -> f64 {
    let h = t[k + 1] - t[k];
    let dx = x - t[k];
    dx * f[k] + dx * dx / (2.0 * h) * (f[k + 1] - f[k])
}

fn cumulative(t: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 0..t.len() - 1 {
        acc += 0.5 * (t[k + 1] - t[k]) * (f[k] + f[k + 1]);
        out.push(acc);
    }
    out
}

impl EmissionTimePdf {
    /// Validates and normalizes raw densities (any positive overall scale).
    pub fn from_unnormalized(
        t_ns: Vec<f64>,
        psi_minus: Vec<f64>,
        psi_plus: Vec<f64>,
        emission_probability: Option<f64>,
    ) -> Result<Self> {
        if t_ns.len() < 2 || psi_minus.len() != t_ns.len() || psi_plus.len() != t_ns.len() {
            return Err(Error::Config("emission pdf needs ≥2 points and matching columns".into()));
        }
        if t_ns.windows(2).any(|w| w[1] <= w[0] || !w[1].is_finite()) {
            return Err(Error::Config("emission pdf time grid must be strictly increasing".into()));
        }
        if psi_minus.iter().chain(&psi_plus).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("emission pdf densities must be nonnegative".into()));
        }
        let total = cumulative(&t_ns, &psi_minus).last().unwrap() + cumulative(&t_ns, &psi_plus).last().unwrap();
        if total <= 0.0 {
            return Err(Error::Config("emission pdf has zero mass".into()));
        }
        let psi_minus: Vec<f64> = psi_minus.iter().map(|v| v / total).collect();
        let psi_plus: Vec<f64> = psi_plus.iter().map(|v| v / total).collect();
        let cum_minus = cumulative(&t_ns, &psi_minus);
        let cum_plus = cumulative(&t_ns, &psi_plus);
        Ok(Self {
            t_ns,
            psi_minus,
            psi_plus,
            emission_probability,
            cum_minus,
            cum_plus,
        })
    }

    /// Builds a pdf on a uniform grid from density functions.
    pub fn from_fn(
        t_end_ns: f64,
        step_ns: f64,
        minus: impl Fn(f64) -> f64,
        plus: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let n = (t_end_ns / step_ns).round() as usize;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * step_ns).collect();
        let m = t.iter().map(|&x| minus(x)).collect();
        let p = t.iter().map(|&x| plus(x)).collect();
        Self::from_unnormalized(t, m, p, None)
    }

    pub fn times(&self) -> &[f64] {
        &self.t_ns
    }

    pub fn psi_minus(&self) -> &[f64] {
        &self.psi_minus
    }

    pub fn psi_plus(&self) -> &[f64] {
        &self.psi_plus
    }

    pub fn emission_probability(&self) -> Option<f64> {
        self.emission_probability
    }

    pub fn support(&self) -> (f64, f64) {
        (self.t_ns[0], *self.t_ns.last().unwrap())
    }

    /// Summed density at `t` (linear interpolation, zero outside the grid).
    pub fn density(&self, t: f64) -> f64 {
        self.interp(&self.psi_minus, t) + self.interp(&self.psi_plus, t)
    }

    fn interp(&self, f: &[f64], t: f64) -> f64 {
        let (a, b) = self.support();
        if t < a || t > b {
            return 0.0;
        }
        let k = self.cell(t);
        let h = self.t_ns[k + 1] - self.t_ns[k];
        f[k] + (t - self.t_ns[k]) / h * (f[k + 1] - f[k])
    }

    fn cell(&self, t: f64) -> usize {
        let k = self.t_ns.partition_point(|&x| x <= t);
        k.saturating_sub(1).min(self.t_ns.len() - 2)
    }

    fn cum_at(&self, f: &[f64], cum: &[f64], t: f64) -> f64 {
        let (a, b) = self.support();
        let t = t.clamp(a, b);
        let k = self.cell(t);
        cum[k] + partial_cell(&self.t_ns, f, k, t)
    }

    /// `(∫ψ₋, ∫ψ₊)` over `[t_i, t_f]` clipped to the grid.
    pub fn window_integrals(&self, t_i: f64, t_f: f64) -> (f64, f64) {
        let m = self.cum_at(&self.psi_minus, &self.cum_minus, t_f) - self.cum_at(&self.psi_minus, &self.cum_minus, t_i);
        let p = self.cum_at(&self.psi_plus, &self.cum_plus, t_f) - self.cum_at(&self.psi_plus, &self.cum_plus, t_i);
        (m.max(0.0), p.max(0.0))
    }

    pub fn total_integral(&self) -> f64 {
        self.cum_minus.last().unwrap() + self.cum_plus.last().unwrap()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(["t_ns", "psi_minus", "psi_plus"])?;
        for k in 0..self.t_ns.len() {
            wr.write_record([
                format!("{:.16e}", self.t_ns[k]),
                format!("{:.16e}", self.psi_minus[k]),
                format!("{:.16e}", self.psi_plus[k]),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Config(format!("missing column {name}")))
        };
        let (ct, cm, cp) = (col("t_ns")?, col("psi_minus")?, col("psi_plus")?);
        let (mut t, mut m, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad number in row {:?}", rec.position())))
            };
            t.push(parse(ct)?);
            m.push(parse(cm)?);
            p.push(parse(cp)?);
        }
        Self::from_unnormalized(t, m, p, None)
    }
}

/// Fraction of in-window emission coming from the desired branch.
pub fn window_success_s(pdf: &EmissionTimePdf, t_i: f64, t_f: f64) -> Result<f64> {
    if t_f <= t_i {
        return Err(Error::EmptyWindow(format!("[{t_i}, {t_f}] ns")));
    }
    let (m, p) = pdf.window_integrals(t_i, t_f);
    if m + p <= 0.0 {
        return Err(Error::EmptyWindow(format!("no emission in [{t_i}, {t_f}] ns")));
    }
    Ok(m / (m + p))
}

/// Inverse-CDF sampler over (cell, branch) pairs with linear density inside each cell.
#[derive(Clone, Debug)]
pub struct EmissionSampler<'a> {
    pdf: &'a EmissionTimePdf,
    cum: Vec<f64>,
}

impl<'a> EmissionSampler<'a> {
    pub fn new(pdf: &'a EmissionTimePdf) -> Self {
        let cells = pdf.t_ns.len() - 1;
        let mut cum = Vec::with_capacity(2 * cells);
        let mut acc = 0.0;
        for f in [&pdf.psi_minus, &pdf.psi_plus] {
            for k in 0..cells {
                acc += 0.5 * (pdf.t_ns[k + 1] - pdf.t_ns[k]) * (f[k] + f[k + 1]);
                cum.push(acc);
            }
        }
        Self { pdf, cum }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, Branch) {
        let total = *self.cum.last().unwrap();
        let u = rng.random::<f64>() * total;
        let idx = self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1);
        let cells = self.pdf.t_ns.len() - 1;
        let (branch, k, f) = if idx < cells {
            (Branch::Desired, idx, &self.pdf.psi_minus)
        } else {
            (Branch::Error, idx - cells, &self.pdf.psi_plus)
        };
        let below = if idx == 0 { 0.0 } else { self.cum[idx - 1] };
        let mass = self.cum[idx] - below;
        let target = (u - below).clamp(0.0, mass);
        let h = self.pdf.t_ns[k + 1] - self.pdf.t_ns[k];
        let (a, b) = (f[k], f[k + 1]);
        // solve a·x + (b − a)x²/(2h) = target in rationalized form
        let disc = (a * a + 2.0 * (b - a) * target / h).max(0.0);
        let denom = a + disc.sqrt();
        let x = if denom > 0.0 { 2.0 * target / denom } else { 0.0 };
        (self.pdf.t_ns[k] + x.clamp(0.0, h), branch)
    }
}

/// One draw of (emission time, branch).
pub fn sample_emission<R: Rng + ?Sized>(pdf: &EmissionTimePdf, rng: &mut R) -> (f64, Branch) {
    EmissionSampler::new(pdf).sample(rng)
}
