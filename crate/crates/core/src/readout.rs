//! Two-pass shelving readout of the metastable qubit and its inversion.
//!
//! Pass 1 shelves `|1⟩` and reads `|0⟩` as bright. Pass 2 first swaps the qubit
//! with a Raman π pulse so that `|1⟩` reads bright. Population that has left
//! the qubit manifold (`n2`) is dark in both passes up to `eps_d2`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::qdm::{DensityMatrix, ZERO};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutErrors {
    /// `|0⟩` read dark.
    pub eps_b: f64,
    /// `|1⟩` read bright.
    pub eps_d: f64,
    /// Leaked population read bright.
    #[serde(default)]
    pub eps_d2: f64,
    /// Spontaneous scattering per Raman pulse.
    pub eps_s: f64,
    /// Rotation error of the Raman π pulse, as a bit flip.
    pub eps_pi: f64,
}

impl ReadoutErrors {
    pub const NONE: ReadoutErrors = ReadoutErrors {
        eps_b: 0.0,
        eps_d: 0.0,
        eps_d2: 0.0,
        eps_s: 0.0,
        eps_pi: 0.0,
    };

    /// Characterized values of the laboratory system.
    pub const MEASURED: ReadoutErrors = ReadoutErrors {
        eps_b: 0.0159,
        eps_d: 0.005,
        eps_d2: 0.0,
        eps_s: 0.0092,
        eps_pi: 0.001,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_b", self.eps_b),
            ("eps_d", self.eps_d),
            ("eps_d2", self.eps_d2),
            ("eps_s", self.eps_s),
            ("eps_pi", self.eps_pi),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::out_of_range(name, v));
            }
        }
        Ok(())
    }

    /// Whether `eps_d2 · n2` is small enough to treat leaked levels as one class.
    pub fn leak_term_negligible(&self, n2: f64) -> bool {
        self.eps_d2 * n2.max(0.0) < 0.1
    }
}

impl Default for ReadoutErrors {
    fn default() -> Self {
        Self::MEASURED
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pass {
    First,
    Second,
}

impl Pass {
    pub const BOTH: [Pass; 2] = [Pass::First, Pass::Second];

    pub fn index(self) -> usize {
        match self {
            Pass::First => 0,
            Pass::Second => 1,
        }
    }

    /// Passes alternate herald by herald, starting with the first.
    pub fn for_herald(i: u64) -> Self {
        if i % 2 == 0 {
            Pass::First
        } else {
            Pass::Second
        }
    }

    /// Qubit state reported by a bright result in this pass.
    pub fn bright_state(self) -> usize {
        self.index()
    }
}

/// Rows (bright, dark, total) acting on populations `(n0, n1, n2)`.
#[rustfmt::skip]
pub fn forward_matrix(pass: Pass, e: &ReadoutErrors) -> Matrix3<f64> {
    let shelve = Matrix3::new(
        1.0 - e.eps_b, e.eps_d, e.eps_d2,
        e.eps_b, 1.0 - e.eps_d, 1.0 - e.eps_d2,
        1.0, 1.0, 1.0,
    );
    match pass {
        Pass::First => shelve,
        Pass::Second => {
            let flip = Matrix3::new(
                e.eps_pi, 1.0 - e.eps_pi, 0.0,
                1.0 - e.eps_pi, e.eps_pi, 0.0,
                0.0, 0.0, 1.0,
            );
            let scatter = Matrix3::new(
                1.0 - e.eps_s, 0.0, 0.0,
                0.0, 1.0 - e.eps_s, 0.0,
                e.eps_s, e.eps_s, 1.0,
            );
            let mut m = shelve * flip * scatter;
            // leaked-then-bright cross term is second order and dropped
            m[(0, 0)] -= e.eps_d2 * e.eps_s;
            m[(0, 1)] -= e.eps_d2 * e.eps_s;
            for j in 0..3 {
                m[(1, j)] = 1.0 - m[(0, j)];
            }
            m
        }
    }
}

/// Probability that a trial with populations `(n0, n1, n2)` reads bright.
pub fn bright_probability(pass: Pass, e: &ReadoutErrors, pops: [f64; 3]) -> f64 {
    let row = forward_matrix(pass, e).row(0).into_owned();
    (row * Vector3::from(pops))[0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub n_b1: u64,
    pub n_d1: u64,
    pub n_b2: u64,
    pub n_d2: u64,
    pub k: u64,
}

impl TrialCounts {
    pub fn new(n_b1: u64, n_b2: u64, k: u64) -> Result<Self> {
        if n_b1 > k || n_b2 > k {
            return Err(Error::Config(format!("bright counts ({n_b1}, {n_b2}) exceed k = {k}")));
        }
        Ok(Self {
            n_b1,
            n_d1: k - n_b1,
            n_b2,
            n_d2: k - n_b2,
            k,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub n0: f64,
    pub n1: f64,
    pub n2: f64,
    pub covariance: [[f64; 3]; 3],
}

impl PopulationEstimate {
    pub fn std_dev(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.covariance[i][i].max(0.0).sqrt())
    }
}

fn check_simplex(p: [f64; 3]) -> Result<()> {
    if p.iter().any(|&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("populations {p:?} are not a probability vector")));
    }
    Ok(())
}

/// Binomial draws of bright counts for two independent sets of `k` trials.
pub fn simulate_trials<R: Rng + ?Sized>(p: [f64; 3], e: &ReadoutErrors, k: u64, rng: &mut R) -> Result<TrialCounts> {
    check_simplex(p)?;
    let draw = |pass, rng: &mut R| -> Result<u64> {
        let q = bright_probability(pass, e, p).clamp(0.0, 1.0);
        let b = Binomial::new(k, q).map_err(|err| Error::Config(err.to_string()))?;
        Ok(b.sample(rng))
    };
    let n_b1 = draw(Pass::First, rng)?;
    let n_b2 = draw(Pass::Second, rng)?;
    TrialCounts::new(n_b1, n_b2, k)
}

/// The `(n_b1, n_b2, k)` system matrix.
pub fn system_matrix(e: &ReadoutErrors) -> Matrix3<f64> {
    let p1 = forward_matrix(Pass::First, e);
    let p2 = forward_matrix(Pass::Second, e);
    let mut m = Matrix3::zeros();
    m.set_row(0, &p1.row(0));
    m.set_row(1, &p2.row(0));
    m.set_row(2, &p1.row(2));
    m
}

/// Inverts the readout model for the populations behind `(n_b1, n_b2, k)`.
pub fn correct_counts(c: &TrialCounts, e: &ReadoutErrors) -> Result<PopulationEstimate> {
    correct_fractional(c.n_b1 as f64, c.n_b2 as f64, c.k as f64, e)
}

/// As [`correct_counts`] for non-integer (e.g. rescaled) counts.
pub fn correct_fractional(n_b1: f64, n_b2: f64, k: f64, e: &ReadoutErrors) -> Result<PopulationEstimate> {
    let a = system_matrix(e);
    let inv = a
        .try_inverse()
        .filter(|_| a.determinant().abs() > 1e-12)
        .ok_or_else(|| Error::Singular(format!("readout system for {e:?}")))?;
    let x = inv * Vector3::new(n_b1, n_b2, k);
    let var = |n: f64| {
        if k > 0.0 {
            let q = (n / k).clamp(0.0, 1.0);
            k * q * (1.0 - q)
        } else {
            0.0
        }
    };
    let d = Matrix3::from_diagonal(&Vector3::new(var(n_b1), var(n_b2), 0.0));
    let cov = inv * d * inv.transpose();
    let mut covariance = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            covariance[i][j] = cov[(i, j)];
        }
    }
    Ok(PopulationEstimate {
        n0: x[0],
        n1: x[1],
        n2: x[2],
        covariance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IonBasis {
    Z,
    X,
    Y,
}

impl IonBasis {
    pub const ALL: [IonBasis; 3] = [IonBasis::Z, IonBasis::X, IonBasis::Y];

    /// Raman rotation applied before shelving; maps the basis' +1 state to `|0⟩`.
    pub fn rotation(self) -> DMatrix<C64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let c = |re: f64, im: f64| C64::new(re, im);
        match self {
            IonBasis::Z => DMatrix::identity(2, 2),
            IonBasis::X => DMatrix::from_row_slice(2, 2, &[c(r, 0.0), c(r, 0.0), c(-r, 0.0), c(r, 0.0)]),
            IonBasis::Y => DMatrix::from_row_slice(2, 2, &[c(r, 0.0), c(0.0, -r), c(0.0, -r), c(r, 0.0)]),
        }
    }

    /// Number of Raman pulses used for the basis change.
    pub fn raman_pulses(self) -> u32 {
        match self {
            IonBasis::Z => 0,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fluorescence {
    Bright,
    Dark,
}

/// Single-trial readout of one ion in `basis` during `pass`.
pub fn ion_outcome<R: Rng + ?Sized>(
    rho_ion: &DensityMatrix,
    basis: IonBasis,
    e: &ReadoutErrors,
    leak: bool,
    pass: Pass,
    rng: &mut R,
) -> Result<Fluorescence> {
    if rho_ion.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: rho_ion.dim() });
    }
    let scattered = (0..basis.raman_pulses()).any(|_| rng.random::<f64>() < e.eps_s);
    let p_bright = if leak || scattered {
        e.eps_d2
    } else {
        let rotated = rho_ion.conjugate(&basis.rotation())?;
        let p0 = rotated.get(0, 0).re.clamp(0.0, 1.0);
        bright_probability(pass, e, [p0, 1.0 - p0, 0.0])
    };
    Ok(if rng.random::<f64>() < p_bright {
        Fluorescence::Bright
    } else {
        Fluorescence::Dark
    })
}

/// `|0⟩⟨0|` and `|1⟩⟨1|` weighted by pass-bright probabilities.
pub fn bright_effect(pass: Pass, e: &ReadoutErrors) -> DMatrix<C64> {
    let row = forward_matrix(pass, e);
    DMatrix::from_row_slice(2, 2, &[C64::new(row[(0, 0)], 0.0), ZERO, ZERO, C64::new(row[(0, 1)], 0.0)])
}
