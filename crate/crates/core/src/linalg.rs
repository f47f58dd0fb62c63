//! Dense complex linear algebra for mode transformations.
//!
//! Matrices here are small (m ≤ 64). Everything is backed by `nalgebra`
//! dense storage; the newtypes carry the invariants the rest of the crate
//! relies on (finite entries, Hermiticity for generators).

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim, domain, Result};

/// Unitarity tolerance in max-norm of `M†M − I`.
pub const UNITARY_TOL: f64 = 1e-10;
/// Hermiticity tolerance in max-norm of `H − H†`.
pub const HERMITIAN_TOL: f64 = 1e-10;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Dense complex matrix with at least one row and one column and finite entries.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix(DMatrix<Complex64>);

impl ComplexMatrix {
    /// Build from row-major entries.
    pub fn new(rows: usize, cols: usize, entries: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(dim(format!("matrix must be at least 1x1, got {rows}x{cols}")));
        }
        if entries.len() != rows * cols {
            return Err(dim(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, entries.len())));
        }
        Self::from_dmatrix(DMatrix::from_row_iterator(rows, cols, entries))
    }

    pub fn from_dmatrix(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(dim("matrix must be at least 1x1"));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(domain("matrix entries must be finite"));
        }
        Ok(Self(m))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> Complex64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(dim(format!("matrix must be at least 1x1, got {rows}x{cols}")));
        }
        Self::from_dmatrix(DMatrix::from_fn(rows, cols, f))
    }

    /// Real matrix from nested rows.
    pub fn from_real_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim("ragged rows"));
        }
        let entries = rows.iter().flatten().map(|&x| Complex64::new(x, 0.0)).collect();
        Self::new(rows.len(), cols, entries)
    }

    /// # Panics
    /// Panics if `n == 0`.
    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "identity of size 0");
        Self(DMatrix::identity(n, n))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.0[(i, j)]
    }

    pub fn as_dmatrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<Complex64> {
        self.0
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn dagger(&self) -> Self {
        Self(self.0.adjoint())
    }

    /// Element-wise modulus.
    pub fn abs(&self) -> DMatrix<f64> {
        self.0.map(|z| z.norm())
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self(self.0.map(|z| z * s))
    }

    /// Max-norm distance `max |a_ij − b_ij|`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(dim(format!("{}x{} vs {}x{}", self.rows(), self.cols(), other.rows(), other.cols())));
        }
        Ok(self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }

    pub fn try_mul(&self, rhs: &Self) -> Result<Self> {
        if self.cols() != rhs.rows() {
            return Err(dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )));
        }
        Ok(Self(&self.0 * &rhs.0))
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut sv: Vec<f64> = self.0.clone().svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    /// Block-diagonal direct sum `self ⊕ other`.
    pub fn direct_sum(&self, other: &Self) -> Self {
        let (r1, c1) = (self.rows(), self.cols());
        let mut out = DMatrix::zeros(r1 + other.rows(), c1 + other.cols());
        out.view_mut((0, 0), (r1, c1)).copy_from(&self.0);
        out.view_mut((r1, c1), (other.rows(), other.cols())).copy_from(&other.0);
        Self(out)
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComplexMatrix{}", self.0)
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    /// # Panics
    /// Panics on a shape mismatch; use [`ComplexMatrix::try_mul`] to get an error instead.
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.try_mul(rhs).expect("matrix shape mismatch")
    }
}

/// Serialized as `{ re = [[..]], im = [[..]] }`, rows outermost; `im` may be omitted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRepr {
    re: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    im: Option<Vec<Vec<f64>>>,
}

impl Serialize for ComplexMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let re = (0..self.rows()).map(|i| (0..self.cols()).map(|j| self.0[(i, j)].re).collect()).collect();
        let im = (0..self.rows()).map(|i| (0..self.cols()).map(|j| self.0[(i, j)].im).collect()).collect();
        MatrixRepr { re, im: Some(im) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComplexMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MatrixRepr::deserialize(d)?;
        let rows = repr.re.len();
        let cols = repr.re.first().map_or(0, Vec::len);
        if repr.re.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged `re` rows"));
        }
        let im = match repr.im {
            Some(im) => {
                if im.len() != rows || im.iter().any(|r| r.len() != cols) {
                    return Err(D::Error::custom("`im` shape differs from `re`"));
                }
                im
            }
            None => vec![vec![0.0; cols]; rows],
        };
        let entries = repr.re.iter().flatten().zip(im.iter().flatten()).map(|(&a, &b)| Complex64::new(a, b)).collect();
        ComplexMatrix::new(rows, cols, entries).map_err(D::Error::custom)
    }
}

/// Hermitian generator (ħ = 1). Stored exactly symmetrised.
#[derive(Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct HermitianMatrix(ComplexMatrix);

impl HermitianMatrix {
    /// Accepts `m` if `‖m − m†‖_max ≤ HERMITIAN_TOL`.
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(dim(format!("Hermitian matrix must be square, got {}x{}", m.rows(), m.cols())));
        }
        let err = m.max_abs_diff(&m.dagger())?;
        if err > HERMITIAN_TOL {
            return Err(domain(format!("matrix is not Hermitian (‖H − H†‖ = {err:.3e})")));
        }
        let sym = (&m.0 + m.0.adjoint()).map(|z| z * 0.5);
        Ok(Self(ComplexMatrix(sym)))
    }

    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "zero-dimensional Hamiltonian");
        Self(ComplexMatrix(DMatrix::zeros(n, n)))
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        Self::new(ComplexMatrix::from_fn(n, n, |i, j| if i == j { Complex64::new(diag[i], 0.0) } else { ZERO })?)
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    /// Real eigenvalues (ascending) and the unitary whose columns are eigenvectors.
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<Complex64>) {
        let eig = self.0 .0.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = DMatrix::from_fn(self.dim(), self.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }
}

impl fmt::Debug for HermitianMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HermitianMatrix{}", self.0 .0)
    }
}

impl<'de> Deserialize<'de> for HermitianMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let m = ComplexMatrix::deserialize(d)?;
        HermitianMatrix::new(m).map_err(D::Error::custom)
    }
}

/// `‖M†M − I‖_max ≤ tol`.
pub fn is_unitary(m: &ComplexMatrix, tol: f64) -> Result<bool> {
    Ok(unitarity_error(m)? <= tol)
}

/// `‖M†M − I‖_max`.
pub fn unitarity_error(m: &ComplexMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(dim(format!("unitarity needs a square matrix, got {}x{}", m.rows(), m.cols())));
    }
    let gram = m.dagger().try_mul(m)?;
    gram.max_abs_diff(&ComplexMatrix::identity(m.rows()))
}

/// `e^{−iHt}` via the eigendecomposition of `H`.
pub fn expm(h: &HermitianMatrix, t: f64) -> ComplexMatrix {
    let (values, q) = h.eigen();
    let phases: Vec<Complex64> = values.iter().map(|&e| Complex64::from_polar(1.0, -e * t)).collect();
    let n = h.dim();
    let qd = DMatrix::from_fn(n, n, |i, j| q[(i, j)] * phases[j]);
    ComplexMatrix(qd * q.adjoint())
}

/// Hermitian `H` with `e^{−iH} = V`, eigenphases of `V` on the principal branch `(−π, π]`.
pub fn logm_unitary(v: &ComplexMatrix) -> Result<HermitianMatrix> {
    let err = unitarity_error(v)?;
    if err > UNITARY_TOL {
        return Err(domain(format!("matrix is not unitary (‖V†V − I‖ = {err:.3e})")));
    }
    let n = v.rows();
    // V is normal, so its complex Schur form is diagonal up to rounding and
    // the Schur vectors are eigenvectors.
    let schur = nalgebra::linalg::Schur::try_new(v.0.clone(), 1e-15, 10_000)
        .ok_or_else(|| domain("Schur iteration did not converge"))?;
    let (q, t) = schur.unpack();
    let gens: Vec<f64> = (0..n)
        .map(|k| {
            let mut phase = t[(k, k)].arg();
            if phase <= -PI {
                phase += 2.0 * PI;
            }
            -phase
        })
        .collect();
    let qd = DMatrix::from_fn(n, n, |i, j| q[(i, j)] * gens[j]);
    HermitianMatrix::new(ComplexMatrix(qd * q.adjoint()))
}

/// Haar-random `m×m` unitary: QR of a complex Ginibre matrix with the phases
/// of `R`'s diagonal moved into `Q`.
pub fn haar_random(m: usize, seed: u64) -> Result<ComplexMatrix> {
    if m == 0 {
        return Err(dim("Haar unitary needs m ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let z = DMatrix::from_fn(m, m, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re * scale, im * scale)
    });
    let (q, r) = z.qr().unpack();
    let phases: Vec<Complex64> = (0..m)
        .map(|k| {
            let d = r[(k, k)];
            if d.norm() > 0.0 {
                d / d.norm()
            } else {
                ONE
            }
        })
        .collect();
    Ok(ComplexMatrix(DMatrix::from_fn(m, m, |i, j| q[(i, j)] * phases[j])))
}

/// `m×m` unitary acting as the `n`-point discrete Fourier transform
/// `(1/√n) e^{2πi jk/n}` on the first `n` modes and as the identity on the rest.
pub fn fourier(n: usize, m: usize) -> Result<ComplexMatrix> {
    if n == 0 || n > m {
        return Err(dim(format!("Fourier block of size {n} does not fit in {m} modes")));
    }
    let norm = 1.0 / (n as f64).sqrt();
    ComplexMatrix::from_fn(m, m, |j, k| {
        if j < n && k < n {
            let angle = 2.0 * PI * ((j * k) % n) as f64 / n as f64;
            Complex64::from_polar(norm, angle)
        } else if j == k {
            ONE
        } else {
            ZERO
        }
    })
}

/// `N⁻¹ Tr(|U_set†| |U_get|)` with element-wise moduli.
pub fn amplitude_fidelity(u_set: &ComplexMatrix, u_get: &ComplexMatrix) -> Result<f64> {
    if !u_set.is_square() || u_set.rows() != u_get.rows() || u_set.cols() != u_get.cols() {
        return Err(dim(format!(
            "amplitude fidelity needs equal square matrices, got {}x{} and {}x{}",
            u_set.rows(),
            u_set.cols(),
            u_get.rows(),
            u_get.cols()
        )));
    }
    let n = u_set.rows();
    // Tr(|A†||B|) = Σ_ij |A_ji| |B_ji|
    let sum: f64 = u_set.0.iter().zip(u_get.0.iter()).map(|(a, b)| a.norm() * b.norm()).sum();
    Ok(sum / n as f64)
}
