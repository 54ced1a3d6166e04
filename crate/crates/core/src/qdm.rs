//! Density operators, quantum channels, and scalar figures of merit.
//!
//! Two-qubit operators use the photon ⊗ ion ordering: index `2 * photon + ion`
//! with photon `H = 0, V = 1` and ion `|0⟩ = 0, |1⟩ = 1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Entrywise Hermiticity tolerance.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Trace tolerance.
pub const TRACE_TOL: f64 = 1e-9;
/// Smallest eigenvalue accepted as nonnegative.
pub const PSD_TOL: f64 = 1e-9;
/// Norm tolerance for pure states.
pub const NORM_TOL: f64 = 1e-12;
/// Completeness tolerance for Kraus operators.
pub const KRAUS_TOL: f64 = 1e-9;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

pub fn pauli_x() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

pub fn pauli_z() -> DMatrix<C64> {
    DMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// `[I, X, Y, Z]`.
pub fn paulis() -> [DMatrix<C64>; 4] {
    [DMatrix::identity(2, 2), pauli_x(), pauli_y(), pauli_z()]
}

pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}

fn hermitize(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

fn max_hermitian_defect(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(hermitize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// A pure state vector with unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct PureState {
    amps: DVector<C64>,
}

impl PureState {
    /// Wraps amplitudes that are already normalized.
    pub fn new(amps: DVector<C64>) -> Result<Self> {
        let norm2 = amps.norm_squared();
        if amps.is_empty() || (norm2 - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidState(format!("pure state norm² = {norm2}")));
        }
        Ok(Self { amps })
    }

    /// Normalizes arbitrary nonzero amplitudes.
    pub fn normalized(amps: DVector<C64>) -> Result<Self> {
        let norm = amps.norm();
        if amps.is_empty() || norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState("zero vector".into()));
        }
        Ok(Self { amps: amps / C64::new(norm, 0.0) })
    }

    pub fn from_real(amps: &[f64]) -> Result<Self> {
        Self::normalized(DVector::from_iterator(amps.len(), amps.iter().map(|&a| C64::new(a, 0.0))))
    }

    /// Computational basis state `|index⟩`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut amps = DVector::from_element(dim, ZERO);
        amps[index] = ONE;
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amps
    }

    pub fn projector(&self) -> DMatrix<C64> {
        &self.amps * self.amps.adjoint()
    }
}

/// A trace-one positive-semidefinite Hermitian operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityMatrixJson", into = "DensityMatrixJson")]
pub struct DensityMatrix {
    mat: DMatrix<C64>,
}

impl DensityMatrix {
    /// Validates Hermiticity, trace and positivity.
    pub fn new(mat: DMatrix<C64>) -> Result<Self> {
        Self::check(&mat)?;
        Ok(Self { mat })
    }

    /// Hermitizes `mat` before validating; absorbs round-off from long operation chains.
    pub fn from_hermitian(mat: &DMatrix<C64>) -> Result<Self> {
        Self::new(hermitize(mat))
    }

    fn check(mat: &DMatrix<C64>) -> Result<()> {
        if !mat.is_square() || mat.nrows() == 0 {
            return Err(Error::InvalidState(format!("shape {}x{}", mat.nrows(), mat.ncols())));
        }
        if mat.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        let defect = max_hermitian_defect(mat);
        if defect > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (defect {defect:e})")));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min_ev = hermitian_eigenvalues(mat)[0];
        if min_ev < -PSD_TOL {
            return Err(Error::InvalidState(format!("min eigenvalue {min_ev:e}")));
        }
        Ok(())
    }

    pub fn from_pure(psi: &PureState) -> Self {
        Self { mat: psi.projector() }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0),
        }
    }

    /// Diagonal state; `probs` must form a probability vector.
    pub fn diagonal(probs: &[f64]) -> Result<Self> {
        let v = DVector::from_iterator(probs.len(), probs.iter().map(|&p| C64::new(p, 0.0)));
        Self::new(DMatrix::from_diagonal(&v))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.mat
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.mat[(i, j)]
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).collect()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.mat)
    }

    /// `Tr(ρ O)`.
    pub fn expectation(&self, op: &DMatrix<C64>) -> C64 {
        (&self.mat * op).trace()
    }

    /// `U ρ U†`.
    pub fn conjugate(&self, u: &DMatrix<C64>) -> Result<Self> {
        check_dim(self.dim(), u.nrows())?;
        Self::from_hermitian(&(u * &self.mat * u.adjoint()))
    }

    /// Validity check against the type invariants, usable in tests.
    pub fn is_valid(&self) -> bool {
        Self::check(&self.mat).is_ok()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Serialized form: row-major real and imaginary parts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityMatrixJson {
    pub dim: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<DensityMatrix> for DensityMatrixJson {
    fn from(rho: DensityMatrix) -> Self {
        let n = rho.dim();
        let mut re = Vec::with_capacity(n * n);
        let mut im = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                re.push(rho.mat[(i, j)].re);
                im.push(rho.mat[(i, j)].im);
            }
        }
        Self { dim: n, re, im }
    }
}

impl TryFrom<DensityMatrixJson> for DensityMatrix {
    type Error = Error;

    fn try_from(js: DensityMatrixJson) -> Result<Self> {
        let n = js.dim;
        if js.re.len() != n * n || js.im.len() != n * n {
            return Err(Error::InvalidState(format!(
                "expected {} entries for dim {n}, got re={} im={}",
                n * n,
                js.re.len(),
                js.im.len()
            )));
        }
        let data: Vec<C64> = js.re.iter().zip(&js.im).map(|(&r, &i)| C64::new(r, i)).collect();
        DensityMatrix::new(DMatrix::from_row_slice(n, n, &data))
    }
}

/// Tensor factor of the photon ⊗ ion space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    Photon,
    Ion,
}

impl Subsystem {
    /// Lifts a single-qubit operator to the joint space.
    pub fn lift(self, op: &DMatrix<C64>) -> DMatrix<C64> {
        let id = DMatrix::<C64>::identity(2, 2);
        match self {
            Subsystem::Photon => kron(op, &id),
            Subsystem::Ion => kron(&id, op),
        }
    }

    /// Joint basis indices where this factor is in `|0⟩`.
    pub fn zero_indices(self) -> [usize; 2] {
        match self {
            Subsystem::Photon => [0, 1],
            Subsystem::Ion => [0, 2],
        }
    }
}

/// Kronecker product.
pub fn tensor(a: &DensityMatrix, b: &DensityMatrix) -> DensityMatrix {
    DensityMatrix { mat: kron(&a.mat, &b.mat) }
}

/// Reduced state of one factor of a two-qubit operator.
pub fn partial_trace(rho: &DensityMatrix, keep: Subsystem) -> Result<DensityMatrix> {
    if rho.dim() != 4 {
        return Err(Error::DimensionMismatch { expected: 4, got: rho.dim() });
    }
    let mut out = DMatrix::from_element(2, 2, ZERO);
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = ZERO;
            for k in 0..2 {
                let (i, j) = match keep {
                    Subsystem::Photon => (2 * a + k, 2 * b + k),
                    Subsystem::Ion => (2 * k + a, 2 * k + b),
                };
                acc += rho.mat[(i, j)];
            }
            out[(a, b)] = acc;
        }
    }
    DensityMatrix::from_hermitian(&out)
}

/// `⟨ψ|ρ|ψ⟩`.
pub fn fidelity(rho: &DensityMatrix, psi: &PureState) -> Result<f64> {
    check_dim(rho.dim(), psi.dim())?;
    let v = psi.amps.adjoint() * &rho.mat * &psi.amps;
    let f = v[(0, 0)];
    debug_assert!(f.im.abs() < 1e-10, "fidelity imaginary part {}", f.im);
    Ok(f.re.clamp(0.0, 1.0))
}

/// `Tr(ρ²)`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    // Tr(ρ²) = Σ |ρ_ij|² for Hermitian ρ
    rho.mat.iter().map(|z| z.norm_sqr()).sum()
}

/// `λρ + (1 − λ) I/d`.
pub fn depolarize(rho: &DensityMatrix, lambda: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::out_of_range("lambda", lambda));
    }
    let d = rho.dim();
    let mixed = DMatrix::<C64>::identity(d, d) * C64::new((1.0 - lambda) / d as f64, 0.0);
    Ok(DensityMatrix {
        mat: &rho.mat * C64::new(lambda, 0.0) + mixed,
    })
}

/// Scales every coherence between the index group `group` and its complement by `gamma`.
///
/// The map is a Schur product with a positive-semidefinite multiplier, so the
/// output stays a valid state.
pub fn dephase(rho: &DensityMatrix, group: &[usize], gamma: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::out_of_range("gamma", gamma));
    }
    let n = rho.dim();
    if let Some(&bad) = group.iter().find(|&&g| g >= n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad + 1 });
    }
    let mut in_group = vec![false; n];
    for &g in group {
        in_group[g] = true;
    }
    let mut mat = rho.mat.clone();
    for i in 0..n {
        for j in 0..n {
            if in_group[i] != in_group[j] {
                mat[(i, j)] *= gamma;
            }
        }
    }
    Ok(DensityMatrix { mat })
}

/// Dephasing of one qubit factor of a two-qubit state.
pub fn dephase_subsystem(rho: &DensityMatrix, which: Subsystem, gamma: f64) -> Result<DensityMatrix> {
    check_dim(4, rho.dim())?;
    dephase(rho, &which.zero_indices(), gamma)
}

/// Largest fidelity to a two-qubit pure state compatible with purity `p`.
pub fn max_fidelity_bound(p: f64) -> Result<f64> {
    if !(0.25..=1.0 + 1e-12).contains(&p) {
        return Err(Error::out_of_range("purity", p));
    }
    Ok(0.25 * (1.0 + (3.0 * (4.0 * p - 1.0)).sqrt()))
}

/// Nearest trace-one PSD matrix by eigenvalue clipping.
pub fn psd_project(h: &DMatrix<C64>) -> Result<DensityMatrix> {
    if !h.is_square() {
        return Err(Error::InvalidState("non-square input".into()));
    }
    let eig = SymmetricEigen::new(hermitize(h));
    let clipped = eig.eigenvalues.map(|e| e.max(0.0));
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::InvalidState("no positive spectrum after clipping".into()));
    }
    let d = DMatrix::from_diagonal(&clipped.map(|e| C64::new(e / total, 0.0)));
    let q = &eig.eigenvectors;
    DensityMatrix::from_hermitian(&(q * d * q.adjoint()))
}

/// Completely positive trace-preserving map in Kraus form.
#[derive(Clone, Debug)]
pub struct KrausChannel {
    ops: Vec<DMatrix<C64>>,
}

impl KrausChannel {
    pub fn new(ops: Vec<DMatrix<C64>>) -> Result<Self> {
        let first = ops.first().ok_or_else(|| Error::Config("empty Kraus list".into()))?;
        let d = first.nrows();
        let mut sum = DMatrix::from_element(d, d, ZERO);
        for k in &ops {
            if k.nrows() != d || k.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, got: k.nrows() });
            }
            sum += k.adjoint() * k;
        }
        let defect = (sum - DMatrix::identity(d, d)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if defect > KRAUS_TOL {
            return Err(Error::Config(format!("Kraus operators not complete (defect {defect:e})")));
        }
        Ok(Self { ops })
    }

    pub fn identity(dim: usize) -> Self {
        Self { ops: vec![DMatrix::identity(dim, dim)] }
    }

    pub fn unitary(u: DMatrix<C64>) -> Result<Self> {
        Self::new(vec![u])
    }

    /// Qubit depolarizing channel `ρ → λρ + (1 − λ) I/2`.
    pub fn depolarizing_qubit(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::out_of_range("lambda", lambda));
        }
        let [id, x, y, z] = paulis();
        let w0 = ((1.0 + 3.0 * lambda) / 4.0).sqrt();
        let w = ((1.0 - lambda) / 4.0).sqrt();
        Self::new(vec![
            id * C64::new(w0, 0.0),
            x * C64::new(w, 0.0),
            y * C64::new(w, 0.0),
            z * C64::new(w, 0.0),
        ])
    }

    /// Qubit bit flip with probability `p`.
    pub fn bit_flip(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::out_of_range("p", p));
        }
        Self::new(vec![
            DMatrix::identity(2, 2) * C64::new((1.0 - p).sqrt(), 0.0),
            pauli_x() * C64::new(p.sqrt(), 0.0),
        ])
    }

    /// Acts on one factor of the photon ⊗ ion space.
    pub fn on_subsystem(&self, which: Subsystem) -> Result<Self> {
        check_dim(2, self.dim())?;
        Self::new(self.ops.iter().map(|k| which.lift(k)).collect())
    }

    /// `other ∘ self`.
    pub fn then(&self, other: &KrausChannel) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        let mut ops = Vec::with_capacity(self.ops.len() * other.ops.len());
        for b in &other.ops {
            for a in &self.ops {
                ops.push(b * a);
            }
        }
        Self::new(ops)
    }

    pub fn dim(&self) -> usize {
        self.ops[0].nrows()
    }

    pub fn operators(&self) -> &[DMatrix<C64>] {
        &self.ops
    }

    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        check_dim(self.dim(), rho.dim())?;
        let mut out = DMatrix::from_element(rho.dim(), rho.dim(), ZERO);
        for k in &self.ops {
            out += k * &rho.mat * k.adjoint();
        }
        DensityMatrix::from_hermitian(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bell_like() -> PureState {
        PureState::from_real(&[3f64.sqrt() / 2.0, 0.0, 0.0, 0.5]).unwrap()
    }

    fn close(a: &DMatrix<C64>, b: &DMatrix<C64>, tol: f64) -> bool {
        (a - b).iter().all(|z| z.norm() < tol)
    }

    fn random_state(seed: u64, dim: usize) -> DensityMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(dim, dim, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let a = &g * g.adjoint();
        let tr = a.trace();
        DensityMatrix::from_hermitian(&(a / tr)).unwrap()
    }

    #[test]
    fn tensor_of_mixed_states() {
        let m = DensityMatrix::maximally_mixed(2);
        let out = tensor(&m, &m);
        assert!(close(out.matrix(), DensityMatrix::maximally_mixed(4).matrix(), 1e-15));
        let zero = DensityMatrix::from_pure(&PureState::basis(2, 0));
        let one = DensityMatrix::from_pure(&PureState::basis(2, 1));
        let out = tensor(&zero, &one);
        assert!(close(out.matrix(), DensityMatrix::from_pure(&PureState::basis(4, 1)).matrix(), 0.0 + 1e-15));
    }

    #[test]
    fn tensor_purity_is_multiplicative() {
        for seed in 0..20 {
            let a = random_state(seed, 2);
            let b = random_state(seed + 100, 2);
            let ab = tensor(&a, &b);
            assert!(ab.is_valid());
            // direct Σ|ρ_ij|² of the Kronecker product, written out elementwise
            let mut direct = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            direct += (a.get(i, j) * b.get(k, l)).norm_sqr();
                        }
                    }
                }
            }
            assert!((purity(&ab) - purity(&a) * purity(&b)).abs() < 1e-12);
            assert!((purity(&ab) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_trace_cases() {
        let rho = DensityMatrix::from_pure(&bell_like());
        let ion = partial_trace(&rho, Subsystem::Ion).unwrap();
        assert!(close(ion.matrix(), DensityMatrix::diagonal(&[0.75, 0.25]).unwrap().matrix(), 1e-15));
        let mixed = partial_trace(&DensityMatrix::maximally_mixed(4), Subsystem::Photon).unwrap();
        assert!(close(mixed.matrix(), DensityMatrix::maximally_mixed(2).matrix(), 1e-15));
        let a = random_state(1, 2);
        let b = random_state(2, 2);
        let ab = tensor(&a, &b);
        assert!(close(partial_trace(&ab, Subsystem::Photon).unwrap().matrix(), a.matrix(), 1e-14));
        assert!(close(partial_trace(&ab, Subsystem::Ion).unwrap().matrix(), b.matrix(), 1e-14));
        assert!(partial_trace(&DensityMatrix::maximally_mixed(3), Subsystem::Ion).is_err());
    }

    #[test]
    fn fidelity_cases() {
        let psi = bell_like();
        let rho = DensityMatrix::from_pure(&psi);
        assert!((fidelity(&rho, &psi).unwrap() - 1.0).abs() < 1e-14);
        assert!((fidelity(&DensityMatrix::maximally_mixed(4), &psi).unwrap() - 0.25).abs() < 1e-15);
        let dep = depolarize(&rho, 0.9).unwrap();
        assert!((fidelity(&dep, &psi).unwrap() - 0.925).abs() < 1e-14);
        assert!(fidelity(&DensityMatrix::maximally_mixed(2), &psi).is_err());
    }

    #[test]
    fn depolarize_cases() {
        let rho = DensityMatrix::from_pure(&PureState::basis(4, 0));
        assert_eq!(depolarize(&rho, 1.0).unwrap(), rho);
        assert!(close(depolarize(&rho, 0.0).unwrap().matrix(), DensityMatrix::maximally_mixed(4).matrix(), 1e-15));
        let half = depolarize(&rho, 0.5).unwrap();
        assert_eq!(half.populations(), vec![0.625, 0.125, 0.125, 0.125]);
        assert!(depolarize(&rho, 1.1).is_err());
    }

    #[test]
    fn purity_matches_channel_parameter_formula() {
        let psi = bell_like();
        let rho = DensityMatrix::from_pure(&psi);
        assert!((purity(&rho) - 1.0).abs() < 1e-14);
        assert!((purity(&DensityMatrix::maximally_mixed(4)) - 0.25).abs() < 1e-15);
        let d = 4.0;
        for k in 1..10 {
            let lambda = k as f64 / 10.0;
            let expected = (lambda + (1.0 - lambda) / d).powi(2) + ((1.0 - lambda) / d).powi(2) * (d - 1.0);
            let p = purity(&depolarize(&rho, lambda).unwrap());
            assert!((p - expected).abs() < 1e-13, "λ={lambda}: {p} vs {expected}");
        }
    }

    #[test]
    fn dephase_cases() {
        let plus = DensityMatrix::from_pure(&PureState::from_real(&[1.0, 1.0]).unwrap());
        assert_eq!(dephase(&plus, &[0], 1.0).unwrap(), plus);
        let diag = dephase(&plus, &[0], 0.0).unwrap();
        assert_eq!(diag.get(0, 1), ZERO);
        assert_eq!(diag.populations(), plus.populations());
        assert!(dephase(&plus, &[0], -0.1).is_err());

        // Loss for the emitted state is (3/8)(1 − γ); γ from a 13.613 µs wait at T2 = 1.36 ms.
        let psi = bell_like();
        let rho = DensityMatrix::from_pure(&psi);
        let gamma = (-13.613e-6 / 1.36e-3f64).exp();
        let out = dephase_subsystem(&rho, Subsystem::Ion, gamma).unwrap();
        let loss = 1.0 - fidelity(&out, &psi).unwrap();
        assert!((loss - 0.375 * (1.0 - gamma)).abs() < 1e-14);
        assert!((loss - 0.0037).abs() < 5e-5);
        assert!(out.is_valid());
    }

    #[test]
    fn bound_values() {
        assert!((max_fidelity_bound(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((max_fidelity_bound(0.908).unwrap() - 0.952).abs() < 5e-4);
        assert!((max_fidelity_bound(0.899).unwrap() - 0.948).abs() < 5e-4);
        assert!(max_fidelity_bound(0.2).is_err());
    }

    #[test]
    fn psd_projection_cases() {
        let rho = random_state(5, 4);
        let p = psd_project(rho.matrix()).unwrap();
        assert!(close(p.matrix(), rho.matrix(), 1e-12));
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![C64::new(1.2, 0.0), C64::new(-0.2, 0.0)]));
        let p = psd_project(&h).unwrap();
        assert!(close(p.matrix(), DensityMatrix::diagonal(&[1.0, 0.0]).unwrap().matrix(), 1e-14));
        assert!(psd_project(&DMatrix::from_element(2, 2, ZERO)).is_err());
    }

    #[test]
    fn kraus_channels() {
        let rho = DensityMatrix::from_pure(&bell_like());
        let dep = KrausChannel::depolarizing_qubit(0.7).unwrap().on_subsystem(Subsystem::Photon).unwrap();
        let out = dep.apply(&rho).unwrap();
        let ion = partial_trace(&rho, Subsystem::Ion).unwrap();
        let expected = rho.matrix() * C64::new(0.7, 0.0)
            + kron(&DMatrix::identity(2, 2), ion.matrix()) * C64::new(0.3 / 2.0, 0.0);
        assert!(close(out.matrix(), &expected, 1e-14));
        assert!(KrausChannel::new(vec![DMatrix::identity(2, 2) * C64::new(0.5, 0.0)]).is_err());
    }

    #[test]
    fn json_round_trip_and_rejection() {
        let rho = random_state(9, 4);
        let s = serde_json::to_string(&rho).unwrap();
        let back: DensityMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rho);
        let bad = r#"{"dim":2,"re":[1.0,0.0,0.0,1.0],"im":[0,0,0,0]}"#;
        assert!(serde_json::from_str::<DensityMatrix>(bad).is_err());
    }

    proptest! {
        #[test]
        fn depolarized_fidelity_and_bound(k in 0usize..=20) {
            let lambda = k as f64 * 0.05;
            let psi = bell_like();
            let rho = depolarize(&DensityMatrix::from_pure(&psi), lambda).unwrap();
            prop_assert!(rho.is_valid());
            let f = fidelity(&rho, &psi).unwrap();
            prop_assert!((f - (3.0 * lambda + 1.0) / 4.0).abs() < 1e-12);
            let bound = max_fidelity_bound(purity(&rho)).unwrap();
            prop_assert!((bound - f).abs() < 1e-10);
        }

        #[test]
        fn dephasing_never_increases_purity(seed in 0u64..500, gamma in 0.0f64..=1.0) {
            let rho = random_state(seed, 4);
            let out = dephase_subsystem(&rho, Subsystem::Ion, gamma).unwrap();
            prop_assert!(out.is_valid());
            prop_assert!(purity(&out) <= purity(&rho) + 1e-12);
        }

        #[test]
        fn depolarizing_pure_state_loses_purity(seed in 0u64..500, lambda in 0.0f64..0.999) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let amps = DVector::from_fn(4, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let psi = PureState::normalized(amps).unwrap();
            let out = depolarize(&DensityMatrix::from_pure(&psi), lambda).unwrap();
            prop_assert!(purity(&out) < 1.0 - 1e-6);
        }

        #[test]
        fn projection_of_perturbed_pure_state_is_valid(seed in 0u64..500, scale in 0.0f64..0.3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let noise = DMatrix::from_fn(4, 4, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let h = DensityMatrix::from_pure(&bell_like()).into_matrix() + (&noise + noise.adjoint()) * C64::new(scale, 0.0);
            let p = psd_project(&h).unwrap();
            prop_assert!(p.is_valid());
            prop_assert!(p.eigenvalues()[0] >= -PSD_TOL);
        }
    }
}
