//! Two-qubit state tomography of the heralded link.
//!
//! Each herald is analyzed in one of nine settings (photon basis × ion basis)
//! and read out in one of two passes. A pass only keeps bright events, so a
//! retained event is labelled by its photon port `a` and the pass `o`, which
//! reports ion state `o`. Counts are stored as `counts[2 * a + o]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::photon::{analysis_setting, apply_fiber, depolarize_photon, stack_unitary, PhotonBasis};
use crate::qdm::{
    dephase_subsystem, fidelity, kron, max_fidelity_bound, paulis, psd_project, purity, DensityMatrix,
    DensityMatrixJson, PureState, Subsystem,
};
use crate::readout::{bright_effect, correct_fractional, IonBasis, Pass, ReadoutErrors};
use crate::rng::{substream, Domain};
use crate::scenario::{Mechanism, ReadoutCorrection, Scenario};
use crate::source::{target_state, JointLinkState};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MeasurementSetting {
    pub photon: PhotonBasis,
    pub ion: IonBasis,
}

impl MeasurementSetting {
    /// The nine settings, photon basis major.
    pub fn all() -> Vec<MeasurementSetting> {
        PhotonBasis::ALL
            .iter()
            .flat_map(|&photon| IonBasis::ALL.iter().map(move |&ion| MeasurementSetting { photon, ion }))
            .collect()
    }

    fn index(self) -> u64 {
        let p = PhotonBasis::ALL.iter().position(|&b| b == self.photon).unwrap();
        let i = IonBasis::ALL.iter().position(|&b| b == self.ion).unwrap();
        (3 * p + i) as u64
    }
}

/// Retained counts of one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    pub photon: PhotonBasis,
    pub ion: IonBasis,
    /// Bright events by `2 * port + pass`.
    pub counts: [f64; 4],
    /// Heralds analyzed in this setting, both passes.
    pub heralds: f64,
    /// Heralds by `[pass][port]`, bright or dark.
    pub pass_heralds: [[f64; 2]; 2],
    /// Counts after inverting the two-pass readout, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_counts: Option<[f64; 4]>,
}

impl SettingCounts {
    pub fn setting(&self) -> MeasurementSetting {
        MeasurementSetting {
            photon: self.photon,
            ion: self.ion,
        }
    }

    pub fn retained(&self) -> f64 {
        self.counts.iter().sum()
    }

    fn pass_totals(&self) -> [f64; 2] {
        [0, 1].map(|o| self.pass_heralds[o][0] + self.pass_heralds[o][1])
    }

    /// Per-pass rates renormalized over the four outcomes.
    pub fn frequencies(&self) -> [f64; 4] {
        let h = self.pass_totals();
        let mut f = [0.0; 4];
        for k in 0..4 {
            if h[k % 2] > 0.0 {
                f[k] = self.counts[k] / h[k % 2];
            }
        }
        let s: f64 = f.iter().sum();
        if s > 0.0 {
            f.iter_mut().for_each(|x| *x /= s);
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyDataset {
    pub settings: Vec<SettingCounts>,
    /// Readout errors the data were taken with.
    pub errors: ReadoutErrors,
    /// Heralds per setting.
    pub shots: u64,
    /// Expected counts rather than a sample.
    pub exact: bool,
}

impl TomographyDataset {
    fn check(&self) -> Result<()> {
        let mut seen: Vec<MeasurementSetting> = self.settings.iter().map(|s| s.setting()).collect();
        seen.sort();
        seen.dedup();
        if seen.len() != 9 || self.settings.len() != 9 {
            return Err(Error::Config(format!(
                "dataset needs the 9 distinct settings, got {} ({} distinct)",
                self.settings.len(),
                seen.len()
            )));
        }
        Ok(())
    }

    /// Copy with `corrected_counts` filled by inverting the readout per photon port.
    pub fn with_corrected_counts(&self) -> Result<TomographyDataset> {
        let mut out = self.clone();
        for s in &mut out.settings {
            let mut c = [0.0; 4];
            for a in 0..2 {
                let k = s.pass_heralds[0][a];
                let k2 = s.pass_heralds[1][a];
                // pass 2 is rescaled to the pass-1 trial count
                let n_b2 = if k2 > 0.0 { s.counts[2 * a + 1] * k / k2 } else { 0.0 };
                let est = correct_fractional(s.counts[2 * a], n_b2, k, &self.errors)?;
                c[2 * a] = est.n0.max(0.0);
                c[2 * a + 1] = est.n1.max(0.0);
            }
            s.corrected_counts = Some(c);
        }
        Ok(out)
    }

    /// Dataset of corrected counts, analyzed as if read out without error.
    fn corrected(&self) -> Result<TomographyDataset> {
        let with = if self.settings.iter().all(|s| s.corrected_counts.is_some()) {
            self.clone()
        } else {
            self.with_corrected_counts()?
        };
        let settings = with
            .settings
            .into_iter()
            .map(|s| {
                let k = s.pass_heralds[0];
                SettingCounts {
                    counts: s.corrected_counts.unwrap(),
                    pass_heralds: [k, k],
                    corrected_counts: None,
                    ..s
                }
            })
            .collect();
        Ok(TomographyDataset {
            settings,
            errors: ReadoutErrors::NONE,
            ..self.clone()
        })
    }
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn real_trace(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    // Tr(AB) for Hermitian A, B
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += (a[(i, j)] * b[(j, i)]).re;
        }
    }
    s
}

fn port_projector(u: &DMatrix<C64>, port: usize) -> DMatrix<C64> {
    let mut p = DMatrix::from_element(2, 2, c(0.0));
    p[(port, port)] = c(1.0);
    u.adjoint() * p * u
}

fn flip(b: &DMatrix<C64>, p: f64) -> DMatrix<C64> {
    let x = &paulis()[1];
    b * c(1.0 - p) + x * b * x * c(p)
}

/// Ion effect `R† B R` of a bright result in `pass` after the basis rotation.
fn ion_effect(basis: IonBasis, pass: Pass, e: &ReadoutErrors, flip_p: f64) -> DMatrix<C64> {
    let r = basis.rotation();
    let n = basis.raman_pulses() as i32;
    let scatter = 1.0 - (1.0 - e.eps_s).powi(n);
    let f = if n > 0 { flip_p } else { 0.0 };
    let b = flip(&bright_effect(pass, e), f);
    r.adjoint() * b * &r * c(1.0 - scatter) + DMatrix::identity(2, 2) * c(scatter * e.eps_d2)
}

/// Measurement operators `M[2a + o]` of one setting.
fn setting_effects(s: MeasurementSetting, e: &ReadoutErrors, retardance_error: f64, flip_p: f64) -> [DMatrix<C64>; 4] {
    let plates = analysis_setting(s.photon).map(|w| w.with_retardance_error(retardance_error));
    let u = stack_unitary(&plates);
    std::array::from_fn(|k| {
        let (a, o) = (k / 2, k % 2);
        let pass = Pass::BOTH[o];
        kron(&port_projector(&u, a), &ion_effect(s.ion, pass, e, flip_p))
    })
}

/// Forward model of one scenario: the heralded state and how it is measured.
#[derive(Clone, Debug)]
pub struct LinkModel {
    pub state: JointLinkState,
    pub errors: ReadoutErrors,
    pub retardance_error: f64,
    pub pi2_error: f64,
}

impl LinkModel {
    pub fn from_scenario(s: &Scenario) -> Result<LinkModel> {
        let amps = s.source.amplitudes();
        let rho = DensityMatrix::from_pure(&amps.state()?);
        let rho = depolarize_photon(&rho, s.noise.polarization_mixing)?;
        let state = JointLinkState::new(rho, 1.0 - s.source.state_prep_success)?;
        let (state, _) = apply_fiber(&state, &s.fiber, s.noise.wall_time_s)?;
        let rho = dephase_subsystem(&state.rho, Subsystem::Ion, s.ion_coherence())?;
        // dark-count heralds carry an unpolarized photon
        let rho = depolarize_photon(&rho, s.background_fraction())?;
        if !s.readout.leak_term_negligible(state.p_leak) {
            return Err(Error::Config("eps_d2 · leakage is not negligible".into()));
        }
        Ok(LinkModel {
            state: JointLinkState::new(rho, state.p_leak)?,
            errors: s.readout,
            retardance_error: s.noise.waveplate_retardance_error,
            pi2_error: s.noise.pi2_error,
        })
    }

    /// `[pass][port] → (bright, dark)` probabilities per herald.
    pub fn outcome_probabilities(&self, s: MeasurementSetting) -> [[(f64, f64); 2]; 2] {
        let eff = setting_effects(s, &self.errors, self.retardance_error, self.pi2_error);
        let plates = analysis_setting(s.photon).map(|w| w.with_retardance_error(self.retardance_error));
        let u = stack_unitary(&plates);
        let leak = self.state.p_leak;
        let rho = self.state.rho.matrix();
        std::array::from_fn(|o| {
            std::array::from_fn(|a| {
                let port = kron(&port_projector(&u, a), &DMatrix::identity(2, 2));
                let p_port = (1.0 - leak) * real_trace(rho, &port) + 0.5 * leak;
                let bright = (1.0 - leak) * real_trace(rho, &eff[2 * a + o]) + 0.5 * leak * self.errors.eps_d2;
                let bright = bright.clamp(0.0, p_port.max(0.0));
                (bright, (p_port - bright).max(0.0))
            })
        })
    }
}

fn pass_split(shots: u64) -> [u64; 2] {
    [shots.div_ceil(2), shots / 2]
}

/// Chained-binomial multinomial draw.
fn multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    let mut left = n;
    let mut mass: f64 = probs.iter().sum();
    let mut out = Vec::with_capacity(probs.len());
    for (i, &p) in probs.iter().enumerate() {
        let k = if i + 1 == probs.len() {
            left
        } else if left == 0 || mass <= 0.0 {
            0
        } else {
            let q = (p / mass).clamp(0.0, 1.0);
            Binomial::new(left, q)
                .map_err(|e| Error::Config(format!("binomial: {e}")))?
                .sample(rng)
        };
        out.push(k);
        left -= k;
        mass -= p;
    }
    Ok(out)
}

/// Samples `shots` heralds per setting; `None` for `seed` gives expected counts.
pub fn simulate_dataset(model: &LinkModel, shots: u64, seed: Option<u64>) -> Result<TomographyDataset> {
    if shots == 0 {
        return Err(Error::Config("shots must be > 0".into()));
    }
    let split = pass_split(shots);
    let settings = MeasurementSetting::all()
        .par_iter()
        .map(|&s| {
            let probs = model.outcome_probabilities(s);
            let mut counts = [0.0; 4];
            let mut pass_heralds = [[0.0; 2]; 2];
            for o in 0..2 {
                let flat = [probs[o][0].0, probs[o][0].1, probs[o][1].0, probs[o][1].1];
                let drawn: Vec<f64> = match seed {
                    Some(seed) => {
                        let mut rng = substream(seed, Domain::Tomography, s.index(), o as u64);
                        multinomial(split[o], &flat, &mut rng)?.into_iter().map(|k| k as f64).collect()
                    }
                    None => {
                        let z: f64 = flat.iter().sum();
                        flat.iter().map(|p| split[o] as f64 * p / z).collect()
                    }
                };
                for a in 0..2 {
                    counts[2 * a + o] = drawn[2 * a];
                    pass_heralds[o][a] = drawn[2 * a] + drawn[2 * a + 1];
                }
            }
            Ok(SettingCounts {
                photon: s.photon,
                ion: s.ion,
                counts,
                heralds: shots as f64,
                pass_heralds,
                corrected_counts: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TomographyDataset {
        settings,
        errors: model.errors,
        shots,
        exact: seed.is_none(),
    })
}

/// Expected-count dataset of a scenario.
pub fn exact_dataset(s: &Scenario, shots: u64) -> Result<TomographyDataset> {
    simulate_dataset(&LinkModel::from_scenario(s)?, shots, None)
}

/// One setting as seen by the estimator.
struct SettingTerm {
    effects: [DMatrix<C64>; 4],
    n: [f64; 4],
    h: [f64; 2],
}

/// Likelihood model built from a dataset.
pub struct Likelihood {
    terms: Vec<SettingTerm>,
    total: f64,
}

impl Likelihood {
    /// `errors = None` assumes ideal projective measurements.
    fn new(d: &TomographyDataset, errors: Option<&ReadoutErrors>) -> Result<Likelihood> {
        d.check()?;
        let e = errors.copied().unwrap_or(ReadoutErrors::NONE);
        let terms: Vec<SettingTerm> = d
            .settings
            .iter()
            .map(|s| SettingTerm {
                effects: setting_effects(s.setting(), &e, 0.0, 0.0),
                n: s.counts,
                h: s.pass_totals(),
            })
            .collect();
        let total = terms.iter().map(|t| t.n.iter().sum::<f64>()).sum();
        if !(total > 0.0) {
            return Err(Error::Config("dataset has no retained events".into()));
        }
        Ok(Likelihood { terms, total })
    }

    pub fn for_dataset(d: &TomographyDataset, correction: ReadoutCorrection) -> Result<Likelihood> {
        match correction {
            ReadoutCorrection::None => Likelihood::new(d, None),
            ReadoutCorrection::BeforeMle => Likelihood::new(&d.corrected()?, None),
            ReadoutCorrection::InsideMle => Likelihood::new(d, Some(&d.errors)),
        }
    }

    pub fn log_likelihood(&self, rho: &DMatrix<C64>) -> f64 {
        let mut ll = 0.0;
        for t in &self.terms {
            let q: [f64; 4] = std::array::from_fn(|k| real_trace(rho, &t.effects[k]));
            let w: [f64; 4] = std::array::from_fn(|k| t.h[k % 2] * q[k]);
            let z: f64 = w.iter().sum();
            for k in 0..4 {
                if t.n[k] > 0.0 {
                    if w[k] <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    ll += t.n[k] * (w[k] / z).ln();
                }
            }
        }
        ll
    }

    /// `G` with `dL = Tr(G dρ)`.
    fn gradient_matrix(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let mut g = DMatrix::from_element(4, 4, c(0.0));
        for t in &self.terms {
            let q: [f64; 4] = std::array::from_fn(|k| real_trace(rho, &t.effects[k]));
            let z: f64 = (0..4).map(|k| t.h[k % 2] * q[k]).sum();
            let n_s: f64 = t.n.iter().sum();
            for k in 0..4 {
                let mut coef = -n_s * t.h[k % 2] / z;
                if t.n[k] > 0.0 {
                    coef += t.n[k] / q[k];
                }
                g += &t.effects[k] * c(coef);
            }
        }
        g
    }
}

/// Least-squares Pauli inversion of the renormalized frequencies, trace fixed to one.
pub fn linear_inversion(d: &TomographyDataset) -> Result<DMatrix<C64>> {
    d.check()?;
    let p = paulis();
    let rows = 4 * d.settings.len();
    let mut a = DMatrix::<f64>::zeros(rows, 15);
    let mut b = DVector::<f64>::zeros(rows);
    for (si, s) in d.settings.iter().enumerate() {
        let eff = setting_effects(s.setting(), &ReadoutErrors::NONE, 0.0, 0.0);
        let f = s.frequencies();
        for k in 0..4 {
            let r = 4 * si + k;
            // p_k = ¼ Σ r_ij Tr(σ_i⊗σ_j M_k), r_00 = 1
            b[r] = f[k] - 0.25 * real_trace(&DMatrix::identity(4, 4), &eff[k]);
            for col in 0..15 {
                let (i, j) = ((col + 1) / 4, (col + 1) % 4);
                a[(r, col)] = 0.25 * real_trace(&kron(&p[i], &p[j]), &eff[k]);
            }
        }
    }
    let svd = a.svd(true, true);
    let x = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::Singular(format!("linear inversion: {e}")))?;
    let mut rho = DMatrix::<C64>::identity(4, 4) * c(0.25);
    for col in 0..15 {
        let (i, j) = ((col + 1) / 4, (col + 1) % 4);
        rho += kron(&p[i], &p[j]) * c(0.25 * x[col]);
    }
    Ok(rho)
}

const N_PARAMS: usize = 16;

/// Upper-triangular `T` from 16 reals: 4 real diagonal entries, then re/im of
/// the 6 entries above the diagonal.
fn t_from_params(x: &[f64]) -> DMatrix<C64> {
    let mut t = DMatrix::from_element(4, 4, c(0.0));
    for i in 0..4 {
        t[(i, i)] = c(x[i]);
    }
    let mut k = 4;
    for i in 0..4 {
        for j in i + 1..4 {
            t[(i, j)] = C64::new(x[k], x[k + 1]);
            k += 2;
        }
    }
    t
}

fn params_from_t(t: &DMatrix<C64>) -> Vec<f64> {
    let mut x = vec![0.0; N_PARAMS];
    for i in 0..4 {
        x[i] = t[(i, i)].re;
    }
    let mut k = 4;
    for i in 0..4 {
        for j in i + 1..4 {
            x[k] = t[(i, j)].re;
            x[k + 1] = t[(i, j)].im;
            k += 2;
        }
    }
    x
}

fn rho_from_t(t: &DMatrix<C64>) -> DMatrix<C64> {
    let s = t.adjoint() * t;
    let tr = s.trace().re;
    s / c(tr)
}

/// Mean negative log-likelihood per event and its gradient in the parameters.
fn objective(lk: &Likelihood, x: &[f64]) -> (f64, Vec<f64>) {
    let t = t_from_params(x);
    let rho = rho_from_t(&t);
    let ll = lk.log_likelihood(&rho);
    if !ll.is_finite() {
        return (f64::INFINITY, vec![0.0; N_PARAMS]);
    }
    let g = lk.gradient_matrix(&rho);
    let gbar = real_trace(&g, &rho);
    let tr = (t.adjoint() * &t).trace().re;
    // dL = 2 Re Tr(M dT) with M = (G − ḡI) T† / Tr(T†T)
    let m = (g - DMatrix::identity(4, 4) * c(gbar)) * t.adjoint() / c(tr);
    let scale = -1.0 / lk.total;
    let mut grad = vec![0.0; N_PARAMS];
    for i in 0..4 {
        grad[i] = scale * 2.0 * m[(i, i)].re;
    }
    let mut k = 4;
    for i in 0..4 {
        for j in i + 1..4 {
            grad[k] = scale * 2.0 * m[(j, i)].re;
            grad[k + 1] = scale * -2.0 * m[(j, i)].im;
            k += 2;
        }
    }
    (-ll / lk.total, grad)
}

/// Options of the quasi-Newton search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub improvement_tol: f64,
    /// Weight of `I/4` mixed into the start point so it has full rank.
    pub init_mixing: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iter: 100_000,
            grad_tol: 1e-8,
            improvement_tol: 1e-12,
            init_mixing: 1e-4,
        }
    }
}

struct Minimum {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn bfgs(lk: &Likelihood, x0: Vec<f64>, opts: &MleOptions) -> Minimum {
    let n = N_PARAMS;
    let mut x = DVector::from_vec(x0);
    let (mut f, g0) = objective(lk, x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    for it in 0..opts.max_iter {
        if g.norm() < opts.grad_tol {
            return Minimum { x: x.as_slice().to_vec(), iterations: it, converged: true };
        }
        let mut dir = -(&h * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let (ft, gt) = objective(lk, trial.as_slice());
            if ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, DVector::from_vec(gt)));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            // no descent left along any tried step: at the floating-point optimum
            return Minimum { x: x.as_slice().to_vec(), iterations: it, converged: true };
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let improvement = f - fnew;
        x = xn;
        g = gn;
        f = fnew;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if improvement < opts.improvement_tol && it > 0 {
            return Minimum { x: x.as_slice().to_vec(), iterations: it + 1, converged: true };
        }
    }
    Minimum { x: x.as_slice().to_vec(), iterations: opts.max_iter, converged: false }
}

#[derive(Clone, Debug)]
pub struct MleFit {
    pub rho: DensityMatrix,
    pub log_likelihood: f64,
    /// Log-likelihood of the PSD-projected linear inversion.
    pub init_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood estimate over trace-one PSD matrices, started from `init`.
pub fn mle_reconstruct(lk: &Likelihood, init: &DensityMatrix, opts: &MleOptions) -> Result<MleFit> {
    let init_ll = lk.log_likelihood(init.matrix());
    let mixed = init.matrix() * c(1.0 - opts.init_mixing) + DMatrix::identity(4, 4) * c(opts.init_mixing / 4.0);
    let chol = mixed
        .cholesky()
        .ok_or_else(|| Error::Singular("start point is not positive definite".into()))?;
    let t0 = chol.l().adjoint();
    let min = bfgs(lk, params_from_t(&t0), opts);
    let rho = rho_from_t(&t_from_params(&min.x));
    let ll = lk.log_likelihood(&rho);
    let (rho, ll) = if init_ll > ll { (init.matrix().clone(), init_ll) } else { (rho, ll) };
    Ok(MleFit {
        rho: DensityMatrix::from_hermitian(&rho)?,
        log_likelihood: ll,
        init_log_likelihood: init_ll,
        iterations: min.iterations,
        converged: min.converged,
    })
}

/// Linear inversion, projection and MLE in one call.
pub fn reconstruct(d: &TomographyDataset, correction: ReadoutCorrection) -> Result<MleFit> {
    let lk = Likelihood::for_dataset(d, correction)?;
    let li_source = match correction {
        ReadoutCorrection::BeforeMle => d.corrected()?,
        _ => d.clone(),
    };
    let init = psd_project(&linear_inversion(&li_source)?)?;
    mle_reconstruct(&lk, &init, &MleOptions::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureErrors {
    pub fidelity: f64,
    pub purity: f64,
    pub resamples: usize,
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Multinomial resample of a sampled dataset, pass by pass.
fn resample(d: &TomographyDataset, seed: u64, r: u64) -> Result<TomographyDataset> {
    let mut out = d.clone();
    for (si, s) in out.settings.iter_mut().enumerate() {
        s.corrected_counts = None;
        for o in 0..2 {
            let mut rng = substream(seed, Domain::Bootstrap, r, (2 * si + o) as u64);
            let cat = [
                s.counts[o].round(),
                (s.pass_heralds[o][0] - s.counts[o]).round().max(0.0),
                s.counts[2 + o].round(),
                (s.pass_heralds[o][1] - s.counts[2 + o]).round().max(0.0),
            ];
            let n: f64 = cat.iter().sum();
            let drawn = multinomial(n as u64, &cat, &mut rng)?;
            s.counts[o] = drawn[0] as f64;
            s.counts[2 + o] = drawn[2] as f64;
            s.pass_heralds[o] = [(drawn[0] + drawn[1]) as f64, (drawn[2] + drawn[3]) as f64];
        }
    }
    Ok(out)
}

/// Bootstrap standard errors of fidelity and purity. Exact datasets carry no
/// sampling noise and return zeros.
pub fn bootstrap(d: &TomographyDataset, correction: ReadoutCorrection, resamples: usize, seed: u64) -> Result<FigureErrors> {
    if resamples < 100 {
        return Err(Error::Config(format!("bootstrap needs ≥ 100 resamples, got {resamples}")));
    }
    if d.exact {
        return Ok(FigureErrors { fidelity: 0.0, purity: 0.0, resamples });
    }
    let psi = target_state();
    let figs = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let fit = reconstruct(&resample(d, seed, r)?, correction)?;
            Ok((fidelity(&fit.rho, &psi)?, purity(&fit.rho)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (f, p): (Vec<f64>, Vec<f64>) = figs.into_iter().unzip();
    Ok(FigureErrors {
        fidelity: std_dev(&f),
        purity: std_dev(&p),
        resamples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub correction: ReadoutCorrection,
    pub fidelity: f64,
    pub purity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TomographyResult {
    pub rho: DensityMatrixJson,
    pub fidelity: f64,
    pub purity: f64,
    pub f_max: f64,
    pub log_likelihood: f64,
    pub init_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub correction: ReadoutCorrection,
    #[serde(default)]
    pub stderr: Option<FigureErrors>,
    /// Fidelity and purity under each readout-correction order.
    pub by_correction: Vec<CorrectionSummary>,
}

/// Full analysis of one dataset: MLE under the chosen correction, the other
/// correction orders for comparison, and optional bootstrap errors.
pub fn analyze(
    d: &TomographyDataset,
    correction: ReadoutCorrection,
    bootstrap_resamples: usize,
    seed: Option<u64>,
) -> Result<TomographyResult> {
    let psi = target_state();
    let fits = ReadoutCorrection::ALL
        .par_iter()
        .map(|&c| reconstruct(d, c).map(|f| (c, f)))
        .collect::<Result<Vec<_>>>()?;
    let mut by_correction = Vec::new();
    let mut chosen = None;
    for (c, fit) in fits {
        by_correction.push(CorrectionSummary {
            correction: c,
            fidelity: fidelity(&fit.rho, &psi)?,
            purity: purity(&fit.rho),
        });
        if c == correction {
            chosen = Some(fit);
        }
    }
    let fit = chosen.expect("all corrections evaluated");
    let stderr = match (bootstrap_resamples, seed) {
        (0, _) => None,
        (n, Some(seed)) => Some(bootstrap(d, correction, n, seed)?),
        (_, None) => return Err(Error::Config("bootstrap needs a seed".into())),
    };
    let p = purity(&fit.rho);
    Ok(TomographyResult {
        fidelity: fidelity(&fit.rho, &psi)?,
        purity: p,
        f_max: max_fidelity_bound(p.max(0.25))?,
        log_likelihood: fit.log_likelihood,
        init_log_likelihood: fit.init_log_likelihood,
        iterations: fit.iterations,
        converged: fit.converged,
        correction,
        stderr,
        by_correction,
        rho: fit.rho.into(),
    })
}

/// Number of heralds per setting used for exact-count budgets.
pub const BUDGET_SHOTS: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub mechanism: Mechanism,
    /// `1 − F` with only this mechanism on.
    pub isolated: f64,
    /// `F(without it) − F(all on)`.
    pub leave_one_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub scenario: String,
    pub correction: ReadoutCorrection,
    pub fidelity: f64,
    pub infidelity: f64,
    pub rows: Vec<BudgetRow>,
    pub sum_isolated: f64,
}

fn exact_fidelity(s: &Scenario) -> Result<f64> {
    let fit = reconstruct(&exact_dataset(s, BUDGET_SHOTS)?, s.analysis.correction)?;
    fidelity(&fit.rho, &target_state())
}

/// Fidelity lost to each mechanism, evaluated on expected counts.
pub fn error_budget_report(s: &Scenario) -> Result<BudgetReport> {
    let all = exact_fidelity(s)?;
    let rows = Mechanism::ALL
        .par_iter()
        .map(|&m| {
            Ok(BudgetRow {
                mechanism: m,
                isolated: 1.0 - exact_fidelity(&s.only(m))?,
                leave_one_out: exact_fidelity(&s.without(m))? - all,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BudgetReport {
        scenario: s.name.clone(),
        correction: s.analysis.correction,
        fidelity: all,
        infidelity: 1.0 - all,
        sum_isolated: rows.iter().map(|r| r.isolated).sum(),
        rows,
    })
}

/// Fidelity loss of ion dephasing with coherence factor `gamma`, from the
/// target amplitudes: `2|a|²|b|²(1 − γ)`.
pub fn dephasing_loss(gamma: f64) -> f64 {
    let a = target_state();
    let (h0, v1) = (a.amplitudes()[0].norm_sqr(), a.amplitudes()[3].norm_sqr());
    2.0 * h0 * v1 * (1.0 - gamma)
}

/// Exact fidelity of a state against the target, for reference checks.
pub fn state_fidelity(rho: &DensityMatrix) -> Result<f64> {
    fidelity(rho, &target_state())
}

/// Pure product or entangled test states for the estimators.
pub fn pure_dataset(psi: &PureState, shots: u64, seed: Option<u64>) -> Result<TomographyDataset> {
    let model = LinkModel {
        state: JointLinkState::new(DensityMatrix::from_pure(psi), 0.0)?,
        errors: ReadoutErrors::NONE,
        retardance_error: 0.0,
        pi2_error: 0.0,
    };
    simulate_dataset(&model, shots, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qdm::DensityMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn ideal_model() -> LinkModel {
        LinkModel {
            state: JointLinkState::new(DensityMatrix::from_pure(&target_state()), 0.0).unwrap(),
            errors: ReadoutErrors::NONE,
            retardance_error: 0.0,
            pi2_error: 0.0,
        }
    }

    fn model_of(rho: DensityMatrix) -> LinkModel {
        LinkModel {
            state: JointLinkState::new(rho, 0.0).unwrap(),
            ..ideal_model()
        }
    }

    fn random_state(seed: u64) -> DensityMatrix {
        let mut rng = substream(seed, Domain::Misc, 0, 0);
        let g = DMatrix::from_fn(4, 4, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let s = &g * g.adjoint();
        let tr = s.trace();
        DensityMatrix::from_hermitian(&(s / tr)).unwrap()
    }

    fn max_abs(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn nine_distinct_settings() {
        let mut s = MeasurementSetting::all();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn hz_setting_shows_diagonal() {
        let d = simulate_dataset(&ideal_model(), 1000, None).unwrap();
        let hz = d.settings.iter().find(|s| s.photon == PhotonBasis::H && s.ion == IonBasis::Z).unwrap();
        let f = hz.frequencies();
        for (got, want) in f.iter().zip([0.75, 0.0, 0.0, 0.25]) {
            assert!((got - want).abs() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn dx_setting_matches_projection() {
        // brute force: project the target on |D/A⟩ ⊗ |±⟩
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let psi = target_state();
        let amp = psi.amplitudes();
        let photon = [[r, r], [r, -r]];
        let ion = [[r, r], [r, -r]];
        let mut want = [0.0; 4];
        for a in 0..2 {
            for o in 0..2 {
                let mut z = C64::new(0.0, 0.0);
                for p in 0..2 {
                    for i in 0..2 {
                        z += amp[2 * p + i] * photon[a][p] * ion[o][i];
                    }
                }
                want[2 * a + o] = z.norm_sqr();
            }
        }
        let d = simulate_dataset(&ideal_model(), 1000, None).unwrap();
        let dx = d.settings.iter().find(|s| s.photon == PhotonBasis::D && s.ion == IonBasis::X).unwrap();
        let f = dx.frequencies();
        for k in 0..4 {
            assert!((f[k] - want[k]).abs() < 1e-12, "{f:?} vs {want:?}");
        }
    }

    #[test]
    fn full_leakage_retains_nothing() {
        let mut m = ideal_model();
        m.state.p_leak = 1.0;
        let d = simulate_dataset(&m, 1000, Some(3)).unwrap();
        assert!(d.settings.iter().all(|s| s.retained() == 0.0));
    }

    #[test]
    fn zero_shots_rejected() {
        assert!(matches!(simulate_dataset(&ideal_model(), 0, Some(1)), Err(Error::Config(_))));
    }

    #[test]
    fn counts_sum_to_retained_and_fit_in_passes() {
        let d = simulate_dataset(&ideal_model(), 2001, Some(9)).unwrap();
        for s in &d.settings {
            let h = s.pass_totals();
            assert_eq!(h, [1001.0, 1000.0]);
            assert!(s.counts[0] + s.counts[2] <= h[0]);
            assert!(s.counts[1] + s.counts[3] <= h[1]);
        }
    }

    #[test]
    fn linear_inversion_exact_for_target_and_mixed() {
        let d = simulate_dataset(&ideal_model(), 1000, None).unwrap();
        let rho = linear_inversion(&d).unwrap();
        assert!(max_abs(&rho, DensityMatrix::from_pure(&target_state()).matrix()) < 1e-12);
        let d = simulate_dataset(&model_of(DensityMatrix::maximally_mixed(4)), 1000, None).unwrap();
        let rho = linear_inversion(&d).unwrap();
        assert!(max_abs(&rho, DensityMatrix::maximally_mixed(4).matrix()) < 1e-12);
    }

    #[test]
    fn linear_inversion_exact_on_random_states() {
        for seed in 0..50 {
            let rho = random_state(seed);
            let d = simulate_dataset(&model_of(rho.clone()), 1000, None).unwrap();
            assert!(max_abs(&linear_inversion(&d).unwrap(), rho.matrix()) < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn linear_inversion_of_counts_is_hermitian_unit_trace() {
        let d = simulate_dataset(&ideal_model(), 200, Some(5)).unwrap();
        let rho = linear_inversion(&d).unwrap();
        assert!(max_abs(&rho, &rho.adjoint()) < 1e-12);
        assert!((rho.trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_setting_rejected() {
        let mut d = simulate_dataset(&ideal_model(), 100, None).unwrap();
        d.settings.pop();
        assert!(linear_inversion(&d).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = simulate_dataset(&model_of(random_state(11)), 5000, Some(2)).unwrap();
        let lk = Likelihood::for_dataset(&d, ReadoutCorrection::None).unwrap();
        let x: Vec<f64> = (0..N_PARAMS).map(|k| 0.3 + 0.05 * k as f64).collect();
        let (_, g) = objective(&lk, &x);
        for k in 0..N_PARAMS {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (objective(&lk, &xp).0 - objective(&lk, &xm).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn mle_recovers_mixed_generator_from_exact_counts() {
        for seed in [1, 2, 3] {
            let rho = random_state(100 + seed);
            let d = simulate_dataset(&model_of(rho.clone()), 100_000, None).unwrap();
            let fit = reconstruct(&d, ReadoutCorrection::None).unwrap();
            assert!(max_abs(fit.rho.matrix(), rho.matrix()) < 1e-5);
            assert!(fit.converged);
        }
    }

    #[test]
    fn mle_recovers_pure_target_from_exact_counts() {
        let d = simulate_dataset(&ideal_model(), 100_000, None).unwrap();
        let fit = reconstruct(&d, ReadoutCorrection::None).unwrap();
        assert!(state_fidelity(&fit.rho).unwrap() >= 1.0 - 1e-6);
    }

    #[test]
    fn mle_beats_projected_linear_inversion() {
        for seed in 0..5 {
            let d = simulate_dataset(&ideal_model(), 2000, Some(seed)).unwrap();
            let fit = reconstruct(&d, ReadoutCorrection::None).unwrap();
            assert!(fit.log_likelihood >= fit.init_log_likelihood);
            assert!(fit.rho.is_valid());
        }
    }

    #[test]
    fn settings_order_does_not_matter() {
        let d = simulate_dataset(&ideal_model(), 3000, Some(4)).unwrap();
        let mut rev = d.clone();
        rev.settings.reverse();
        let a = reconstruct(&d, ReadoutCorrection::None).unwrap();
        let b = reconstruct(&rev, ReadoutCorrection::None).unwrap();
        assert!(max_abs(a.rho.matrix(), b.rho.matrix()) < 1e-8);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = simulate_dataset(&ideal_model(), 5000, Some(77)).unwrap();
        let b = simulate_dataset(&ideal_model(), 5000, Some(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_dataset_has_zero_bootstrap_error() {
        let d = simulate_dataset(&ideal_model(), 1000, None).unwrap();
        let e = bootstrap(&d, ReadoutCorrection::None, 100, 1).unwrap();
        assert!(e.fidelity < 1e-6 && e.purity < 1e-6);
    }

    #[test]
    fn too_few_resamples_rejected() {
        let d = simulate_dataset(&ideal_model(), 1000, Some(1)).unwrap();
        assert!(bootstrap(&d, ReadoutCorrection::None, 10, 1).is_err());
    }

    #[test]
    fn readout_correction_undoes_errors_on_exact_counts() {
        let mut m = ideal_model();
        m.errors = ReadoutErrors::MEASURED;
        let d = simulate_dataset(&m, 100_000, None).unwrap();
        let raw = state_fidelity(&reconstruct(&d, ReadoutCorrection::None).unwrap().rho).unwrap();
        let inside = state_fidelity(&reconstruct(&d, ReadoutCorrection::InsideMle).unwrap().rho).unwrap();
        let before = state_fidelity(&reconstruct(&d, ReadoutCorrection::BeforeMle).unwrap().rho).unwrap();
        assert!(raw < 0.995, "{raw}");
        assert!(inside > 1.0 - 1e-6, "{inside}");
        assert!(before > 1.0 - 1e-6, "{before}");
    }

    #[test]
    fn dephasing_loss_closed_form() {
        assert!((dephasing_loss(0.0) - 0.375).abs() < 1e-15);
        let rho = DensityMatrix::from_pure(&target_state());
        let g = 0.9;
        let f = state_fidelity(&dephase_subsystem(&rho, Subsystem::Ion, g).unwrap()).unwrap();
        assert!((1.0 - f - dephasing_loss(g)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fidelity_never_exceeds_purity_bound(seed in 0u64..10_000, shots in 200u64..3000) {
            let d = simulate_dataset(&model_of(random_state(seed)), shots, Some(seed)).unwrap();
            let fit = reconstruct(&d, ReadoutCorrection::None).unwrap();
            let f = state_fidelity(&fit.rho).unwrap();
            let bound = max_fidelity_bound(purity(&fit.rho).max(0.25)).unwrap();
            prop_assert!(f <= bound + 1e-9);
            prop_assert!(fit.log_likelihood >= fit.init_log_likelihood);
        }
    }
}
