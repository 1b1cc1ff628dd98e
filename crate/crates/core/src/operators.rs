//! Finite-dimensional operator algebra on the qutrit ⊗ magnon (⊗ cavity) space.
//!
//! Everything is dense: total dimensions stay at a few hundred at most.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;

/// Transmon levels kept in the model: g, e, f.
pub const QUTRIT_DIM: usize = 3;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Tensor factor of the composite Hilbert space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Qutrit,
    Magnon,
    Cavity,
}

/// Factor dimensions in the fixed order qutrit ⊗ magnon ⊗ cavity.
///
/// `cavity_dim == 0` means the cavity has been eliminated (two-body model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilbertLayout {
    pub magnon_dim: usize,
    pub cavity_dim: usize,
}

impl HilbertLayout {
    pub fn new(magnon_dim: usize, cavity_dim: usize) -> Result<Self> {
        if magnon_dim < 2 {
            return Err(Error::InvalidDimension(format!("magnon_dim must be >= 2, got {magnon_dim}")));
        }
        if cavity_dim == 1 {
            return Err(Error::InvalidDimension("cavity_dim must be 0 (eliminated) or >= 2".into()));
        }
        Ok(Self { magnon_dim, cavity_dim })
    }

    /// Qutrit ⊗ magnon with the cavity adiabatically eliminated.
    pub fn two_body(magnon_dim: usize) -> Result<Self> {
        Self::new(magnon_dim, 0)
    }

    pub fn has_cavity(&self) -> bool {
        self.cavity_dim > 0
    }

    pub fn factors(&self) -> Vec<(Factor, usize)> {
        let mut f = vec![(Factor::Qutrit, QUTRIT_DIM), (Factor::Magnon, self.magnon_dim)];
        if self.has_cavity() {
            f.push((Factor::Cavity, self.cavity_dim));
        }
        f
    }

    fn cavity_factor(&self) -> usize {
        self.cavity_dim.max(1)
    }

    pub fn dim(&self) -> usize {
        QUTRIT_DIM * self.magnon_dim * self.cavity_factor()
    }

    pub fn index(&self, q: usize, n: usize, c: usize) -> usize {
        (q * self.magnon_dim + n) * self.cavity_factor() + c
    }

    /// Inverse of [`HilbertLayout::index`]: (qutrit level, magnon number, cavity number).
    pub fn decompose(&self, i: usize) -> (usize, usize, usize) {
        let cf = self.cavity_factor();
        let c = i % cf;
        let rest = i / cf;
        (rest / self.magnon_dim, rest % self.magnon_dim, c)
    }

    /// Total excitation number of a basis state: magnons + photons + one for
    /// either excited qutrit level (|f⟩ carries one control-drive photon).
    pub fn excitation_number(&self, i: usize) -> usize {
        let (q, n, c) = self.decompose(i);
        usize::from(q > 0) + n + c
    }

    pub fn embed_qutrit(&self, op: &ComplexMatrix) -> ComplexMatrix {
        let rest = identity(self.magnon_dim * self.cavity_factor());
        tensor(op, &rest)
    }

    pub fn embed_magnon(&self, op: &ComplexMatrix) -> ComplexMatrix {
        let left = tensor(&identity(QUTRIT_DIM), op);
        tensor(&left, &identity(self.cavity_factor()))
    }

    pub fn embed_cavity(&self, op: &ComplexMatrix) -> Result<ComplexMatrix> {
        if !self.has_cavity() {
            return Err(Error::InvalidDimension("layout has no cavity factor".into()));
        }
        Ok(tensor(&identity(QUTRIT_DIM * self.magnon_dim), op))
    }

    /// Basis ket |q, n, c⟩.
    pub fn basis_state(&self, q: usize, n: usize, c: usize) -> Vec<C64> {
        let mut v = vec![ZERO; self.dim()];
        v[self.index(q, n, c)] = ONE;
        v
    }
}

pub fn identity(dim: usize) -> ComplexMatrix {
    ComplexMatrix::identity(dim, dim)
}

/// Bosonic lowering operator truncated to `dim` Fock levels.
pub fn fock_annihilation(dim: usize) -> Result<ComplexMatrix> {
    if dim < 2 {
        return Err(Error::InvalidDimension(format!("Fock truncation must be >= 2, got {dim}")));
    }
    let mut a = ComplexMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(a)
}

/// Number operator diag(0, 1, ..., dim-1).
pub fn number_operator(dim: usize) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |n, _| C64::new(n as f64, 0.0)))
}

/// The five qutrit operators used by the model.
#[derive(Debug, Clone)]
pub struct QutritOperators {
    pub proj_g: ComplexMatrix,
    pub proj_e: ComplexMatrix,
    pub proj_f: ComplexMatrix,
    /// |g⟩⟨e|
    pub lower_ge: ComplexMatrix,
    /// |e⟩⟨f|
    pub lower_ef: ComplexMatrix,
}

pub fn qutrit_operators() -> QutritOperators {
    QutritOperators {
        proj_g: outer_basis(QUTRIT_DIM, 0, 0),
        proj_e: outer_basis(QUTRIT_DIM, 1, 1),
        proj_f: outer_basis(QUTRIT_DIM, 2, 2),
        lower_ge: outer_basis(QUTRIT_DIM, 0, 1),
        lower_ef: outer_basis(QUTRIT_DIM, 1, 2),
    }
}

/// |i⟩⟨j| in a `dim`-dimensional space.
pub fn outer_basis(dim: usize, i: usize, j: usize) -> ComplexMatrix {
    let mut m = ComplexMatrix::zeros(dim, dim);
    m[(i, j)] = ONE;
    m
}

/// |u⟩⟨v|
pub fn outer(u: &[C64], v: &[C64]) -> ComplexMatrix {
    ComplexMatrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j].conj())
}

/// Kronecker product; the left operand is the slower-varying factor.
pub fn tensor(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

/// Matrix exponential (scaling and squaring with a degree-13 Padé core).
pub fn matrix_exp(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !m.is_square() {
        return Err(Error::InvalidDimension(format!(
            "matrix_exp needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    Ok(m.exp())
}

/// Heuristic for whether a displacement by `alpha` fits in `dim` Fock levels.
pub fn displacement_fits(alpha: C64, dim: usize) -> bool {
    let r = alpha.norm();
    r * r + 4.0 * r <= dim as f64
}

/// Displacement operator exp(α b† − α* b) in the truncated Fock space.
///
/// Logs a warning (but still returns the truncated operator) when
/// |α|² + 4|α| exceeds `dim`.
pub fn displacement(alpha: C64, dim: usize) -> Result<ComplexMatrix> {
    let b = fock_annihilation(dim)?;
    if !displacement_fits(alpha, dim) {
        log::warn!("displacement |alpha| = {:.3} is large for a {dim}-level Fock truncation", alpha.norm());
    }
    let gen = b.adjoint() * alpha - &b * alpha.conj();
    matrix_exp(&gen)
}

/// Parity operator exp(iπ b†b) = diag((−1)ⁿ).
pub fn parity(dim: usize) -> ComplexMatrix {
    ComplexMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |n, _| {
        C64::new(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0)
    }))
}

/// Truncated coherent state D(α)|0⟩.
pub fn coherent_state(alpha: C64, dim: usize) -> Result<Vec<C64>> {
    let d = displacement(alpha, dim)?;
    Ok(d.column(0).iter().copied().collect())
}

/// Largest entry-wise deviation from Hermiticity.
pub fn hermiticity_residual(m: &ComplexMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn is_hermitian(m: &ComplexMatrix, tol: f64) -> bool {
    m.is_square() && hermiticity_residual(m) <= tol
}

pub fn is_unitary(m: &ComplexMatrix, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let p = m * m.adjoint();
    max_abs_diff(&p, &identity(m.nrows())) <= tol
}

pub fn max_abs_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn trace(m: &ComplexMatrix) -> C64 {
    m.diagonal().iter().sum()
}

/// Row-major (re, im) representation used for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRepr {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<&ComplexMatrix> for MatrixRepr {
    fn from(m: &ComplexMatrix) -> Self {
        let (rows, cols) = m.shape();
        let mut re = Vec::with_capacity(rows * cols);
        let mut im = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                re.push(m[(i, j)].re);
                im.push(m[(i, j)].im);
            }
        }
        Self { rows, cols, re, im }
    }
}

impl TryFrom<MatrixRepr> for ComplexMatrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        if r.rows == 0 || r.cols == 0 || r.re.len() != r.rows * r.cols || r.im.len() != r.re.len() {
            return Err(Error::InvalidDimension("malformed matrix representation".into()));
        }
        Ok(ComplexMatrix::from_fn(r.rows, r.cols, |i, j| C64::new(r.re[i * r.cols + j], r.im[i * r.cols + j])))
    }
}

/// Serde adapter: `#[serde(with = "crate::operators::matrix_serde")]`.
pub mod matrix_serde {
    use super::{ComplexMatrix, MatrixRepr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &ComplexMatrix, s: S) -> Result<S::Ok, S::Error> {
        MatrixRepr::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ComplexMatrix, D::Error> {
        let r = MatrixRepr::deserialize(d)?;
        ComplexMatrix::try_from(r).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn random_matrix(n: usize, seed: u64) -> ComplexMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ComplexMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn annihilation_small() {
        let a = fock_annihilation(2).unwrap();
        assert_eq!(a, ComplexMatrix::from_row_slice(2, 2, &[ZERO, ONE, ZERO, ZERO]));
        assert!(matches!(fock_annihilation(1), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn number_and_truncated_commutator() {
        let a = fock_annihilation(5).unwrap();
        let n = a.adjoint() * &a;
        for k in 0..5 {
            assert_abs_diff_eq!(n[(k, k)].re, k as f64, epsilon = 1e-14);
        }
        let a = fock_annihilation(4).unwrap();
        let comm = &a * a.adjoint() - a.adjoint() * &a;
        let diag: Vec<f64> = comm.diagonal().iter().map(|z| z.re).collect();
        // only the last entry feels the truncation
        for (got, want) in diag.iter().zip([1.0, 1.0, 1.0, -3.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn qutrit_algebra() {
        let q = qutrit_operators();
        let sum = &q.proj_g + &q.proj_e + &q.proj_f;
        assert_eq!(sum, identity(3));
        let e = nalgebra::DVector::from_vec(vec![ZERO, ONE, ZERO]);
        let g = nalgebra::DVector::from_vec(vec![ONE, ZERO, ZERO]);
        assert_eq!(&q.lower_ge * e, g);
        assert_eq!(&q.lower_ef * q.lower_ef.adjoint(), q.proj_e);
        for p in [&q.proj_g, &q.proj_e, &q.proj_f] {
            assert!(max_abs_diff(&(p * p), p) <= 1e-12);
            assert!(is_hermitian(p, 1e-12));
        }
    }

    #[test]
    fn tensor_identities() {
        assert_eq!(tensor(&identity(2), &identity(3)), identity(6));
        let (a, b) = (random_matrix(2, 1), random_matrix(3, 2));
        let lhs = trace(&tensor(&a, &b));
        let rhs = trace(&a) * trace(&b);
        assert!((lhs - rhs).norm() < 1e-12);

        let (c, d) = (random_matrix(2, 3), random_matrix(3, 4));
        let lhs = tensor(&a, &b) * tensor(&c, &d);
        let rhs = tensor(&(&a * &c), &(&b * &d));
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);

        let e = random_matrix(2, 5);
        let assoc = max_abs_diff(&tensor(&tensor(&a, &b), &e), &tensor(&a, &tensor(&b, &e)));
        assert!(assoc < 1e-14);
    }

    #[test]
    fn exp_diagonal_and_zero() {
        assert_eq!(matrix_exp(&ComplexMatrix::zeros(3, 3)).unwrap(), identity(3));
        let m = ComplexMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(0.0, PI), ZERO]));
        let e = matrix_exp(&m).unwrap();
        assert!((e[(0, 0)] + ONE).norm() < 1e-14);
        assert!((e[(1, 1)] - ONE).norm() < 1e-14);
        assert!(matrix_exp(&ComplexMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn exp_of_anti_hermitian_is_unitary() {
        let r = random_matrix(4, 9);
        let ah = (&r - r.adjoint()) * C64::new(0.5, 0.0);
        assert!(is_unitary(&matrix_exp(&ah).unwrap(), 1e-9));
    }

    #[test]
    fn exp_against_taylor_oracle() {
        // brute-force power series with many terms, small norm
        let m = random_matrix(4, 11) * C64::new(0.3, 0.0);
        let mut term = identity(4);
        let mut sum = identity(4);
        for k in 1..60 {
            term = &term * &m / C64::new(k as f64, 0.0);
            sum += &term;
        }
        let e = matrix_exp(&m).unwrap();
        let rel = max_abs_diff(&e, &sum) / sum.norm();
        assert!(rel <= 1e-10, "relative error {rel}");
    }

    #[test]
    fn exp_inverse_pair() {
        for seed in 0..5 {
            let m = random_matrix(5, 100 + seed);
            let scale = 10.0 / m.norm();
            let m = m * C64::new(scale, 0.0);
            let p = matrix_exp(&m).unwrap() * matrix_exp(&(-&m)).unwrap();
            assert!(max_abs_diff(&p, &identity(5)) <= 1e-9);
        }
    }

    #[test]
    fn displacement_properties() {
        assert!(max_abs_diff(&displacement(ZERO, 10).unwrap(), &identity(10)) < 1e-15);
        let alpha = C64::new(0.7, 0.0);
        let d = displacement(alpha, 20).unwrap();
        assert_abs_diff_eq!(d[(0, 0)].re, (-0.49f64 / 2.0).exp(), epsilon = 1e-8);
        for a in [C64::new(1.0, 0.0), C64::new(0.3, -0.8), C64::new(-0.5, 0.5)] {
            let p = displacement(a, 20).unwrap() * displacement(-a, 20).unwrap();
            assert!(max_abs_diff(&p, &identity(20)) <= 1e-8);
            assert!(is_unitary(&displacement(a, 20).unwrap(), 1e-8));
        }
    }

    #[test]
    fn parity_properties() {
        assert_eq!(parity(2), ComplexMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![ONE, -ONE])));
        let p = parity(7);
        assert_eq!(&p * &p, identity(7));
        let psi = coherent_state(ONE, 25).unwrap();
        let rho = outer(&psi, &psi);
        let val = trace(&(parity(25) * rho)).re;
        assert_abs_diff_eq!(val, (-2.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn layout_indexing() {
        let l = HilbertLayout::new(4, 3).unwrap();
        assert_eq!(l.dim(), 36);
        for i in 0..l.dim() {
            let (q, n, c) = l.decompose(i);
            assert_eq!(l.index(q, n, c), i);
        }
        assert_eq!(l.excitation_number(l.index(2, 1, 2)), 4);
        assert!(HilbertLayout::new(1, 0).is_err());
        assert!(HilbertLayout::new(3, 1).is_err());
        assert_eq!(HilbertLayout::two_body(5).unwrap().dim(), 15);
    }

    #[test]
    fn matrix_repr_round_trip() {
        let m = random_matrix(3, 77);
        let json = serde_json::to_string(&MatrixRepr::from(&m)).unwrap();
        let back: MatrixRepr = serde_json::from_str(&json).unwrap();
        assert_eq!(ComplexMatrix::try_from(back).unwrap(), m);
    }
}
