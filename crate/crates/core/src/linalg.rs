//! Dense kernels for SPD matrix functions, SVD-derived norms and the
//! matrix square roots the refactoring formulas are built from.
//!
//! Storage and BLAS-level products come from `nalgebra`. Every SPD matrix
//! function goes through a cached symmetric eigendecomposition held by
//! [`SpdMatrix`], so a Gram matrix that is rooted, inverse-rooted and
//! inverted only pays for one decomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense double-precision matrix.
pub type Matrix = DMatrix<f64>;

/// Positivity threshold: an SPD matrix needs `λ_min > SPD_EPS · λ_max`.
pub const SPD_EPS: f64 = 1e-12;

/// Below this eigenvalue ratio inverse roots refuse to run.
pub const ILL_CONDITIONED_RATIO: f64 = 1e-14;

/// Builds a matrix from row-major data, rejecting wrong lengths and
/// non-finite entries.
pub fn matrix_from_rows(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: (rows, cols),
            got: (data.len(), 1),
        });
    }
    let m = Matrix::from_row_slice(rows, cols, data);
    ensure_finite(&m, "matrix")?;
    Ok(m)
}

pub fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what })
    }
}

/// Entrywise symmetry test `|M[i,j] − M[j,i]| ≤ 1e-12 · (1 + |M[i,j]|)`.
pub fn is_symmetric(m: &Matrix) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return false;
            }
        }
    }
    true
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Relative Frobenius distance `‖a − b‖_F / ‖b‖_F` (absolute when `b = 0`).
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// A symmetric positive definite matrix together with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    mat: Matrix,
    eigenvalues: DVector<f64>,
    eigenvectors: Matrix,
}

impl SpdMatrix {
    /// Validates symmetry and positivity of `m`.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NonSpdInput {
                reason: format!("matrix is {}x{}, not square", m.nrows(), m.ncols()),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::NonSpdInput {
                reason: "empty matrix".into(),
            });
        }
        ensure_finite(&m, "SPD candidate")?;
        if !is_symmetric(&m) {
            return Err(Error::NonSpdInput {
                reason: "matrix is not symmetric".into(),
            });
        }
        let eig = SymmetricEigen::new(m.clone());
        let (lo, hi) = extremes(&eig.eigenvalues);
        if !(hi > 0.0) || lo <= SPD_EPS * hi {
            return Err(Error::NonSpdInput {
                reason: format!("eigenvalue range [{lo:e}, {hi:e}] is not safely positive"),
            });
        }
        Ok(Self {
            mat: m,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    /// Wraps an already computed eigendecomposition of a symmetric matrix.
    /// The caller has checked positivity.
    pub(crate) fn from_eigen(mat: Matrix, eig: SymmetricEigen<f64, nalgebra::Dyn>) -> Self {
        Self {
            mat,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        }
    }

    /// Same as [`SpdMatrix::new`] after averaging `m` with its transpose.
    /// Intended for products that are symmetric in exact arithmetic.
    pub fn from_symmetrized(m: &Matrix) -> Result<Self> {
        Self::new(symmetrize(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: Matrix::identity(dim, dim),
            eigenvalues: DVector::from_element(dim, 1.0),
            eigenvectors: Matrix::identity(dim, dim),
        }
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::NonSpdInput {
                reason: format!("scale {s} is not a positive finite number"),
            });
        }
        Ok(Self {
            mat: Matrix::identity(dim, dim) * s,
            eigenvalues: DVector::from_element(dim, s),
            eigenvectors: Matrix::identity(dim, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Matrix {
        &self.eigenvectors
    }

    /// `λ_min / λ_max`.
    pub fn condition_ratio(&self) -> f64 {
        let (lo, hi) = extremes(&self.eigenvalues);
        lo / hi
    }

    /// `γ · self` for positive `γ`, reusing the eigenvectors.
    pub fn scaled(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::NonSpdInput {
                reason: format!("scale {gamma} is not a positive finite number"),
            });
        }
        Ok(Self {
            mat: &self.mat * gamma,
            eigenvalues: &self.eigenvalues * gamma,
            eigenvectors: self.eigenvectors.clone(),
        })
    }

    /// `Q · diag(f(λ)) · Qᵀ` as an SPD matrix; `f` must keep eigenvalues positive.
    fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Self {
        let values = self.eigenvalues.map(f);
        let q = &self.eigenvectors;
        let mut scaled_q = q.clone();
        for (j, mut col) in scaled_q.column_iter_mut().enumerate() {
            col *= values[j];
        }
        let mat = symmetrize(&(scaled_q * q.transpose()));
        Self {
            mat,
            eigenvalues: values,
            eigenvectors: q.clone(),
        }
    }

    fn guard_conditioning(&self) -> Result<()> {
        let ratio = self.condition_ratio();
        if ratio < ILL_CONDITIONED_RATIO {
            return Err(Error::IllConditioned {
                ratio,
                threshold: ILL_CONDITIONED_RATIO,
            });
        }
        Ok(())
    }

    /// Principal square root.
    pub fn sqrt(&self) -> Self {
        self.map_spectrum(f64::sqrt)
    }

    /// Inverse of the principal square root.
    pub fn inv_sqrt(&self) -> Result<Self> {
        self.guard_conditioning()?;
        Ok(self.map_spectrum(|l| 1.0 / l.sqrt()))
    }

    pub fn inverse(&self) -> Result<Self> {
        self.guard_conditioning()?;
        Ok(self.map_spectrum(|l| 1.0 / l))
    }

    /// `tr(self · other)` for a square `other` of matching size.
    pub fn trace_product(&self, other: &Matrix) -> f64 {
        self.mat.dot(&other.transpose())
    }
}

fn extremes(values: &DVector<f64>) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Principal square root `R` with `R·R = M`.
pub fn spd_sqrt(m: &SpdMatrix) -> SpdMatrix {
    m.sqrt()
}

/// `M^{-1/2}`, so that `R·M·R = I`.
pub fn spd_inv_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    m.inv_sqrt()
}

/// Square root of the (generally nonsymmetric) product `X·Y` of two SPD
/// matrices, computed as `X^{1/2} (X^{1/2} Y X^{1/2})^{1/2} X^{-1/2}`.
pub fn nonsym_psd_sqrt(x: &SpdMatrix, y: &SpdMatrix) -> Result<Matrix> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: (x.dim(), x.dim()),
            got: (y.dim(), y.dim()),
        });
    }
    let xh = x.sqrt();
    let xih = x.inv_sqrt()?;
    let inner = SpdMatrix::from_symmetrized(&(xh.as_matrix() * y.as_matrix() * xh.as_matrix()))?;
    Ok(xh.as_matrix() * inner.sqrt().as_matrix() * xih.as_matrix())
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return f64::NAN;
    }
    m.clone().svd(false, false).singular_values.sum()
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return f64::NAN;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Principal square root of a general square matrix with spectrum off the
/// closed negative real axis, by the scaled Denman-Beavers iteration.
///
/// Shares no code with the eigendecomposition path, which makes it useful
/// as a cross-check for [`nonsym_psd_sqrt`].
pub fn sqrtm_denman_beavers(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: (m.nrows(), m.nrows()),
            got: (m.nrows(), m.ncols()),
        });
    }
    ensure_finite(m, "square-root input")?;
    let n = m.nrows();
    let singular = || Error::NonSpdInput {
        reason: "singular iterate in Denman-Beavers square root".into(),
    };
    let mut y = m.clone();
    let mut z = Matrix::identity(n, n);
    let mut scaling = true;
    let tol = (n as f64).sqrt() * f64::EPSILON;
    let mut prev_change = f64::INFINITY;
    for _ in 0..100 {
        let y_inv = y.clone().try_inverse().ok_or_else(singular)?;
        let z_inv = z.clone().try_inverse().ok_or_else(singular)?;
        let mu = if scaling {
            let det = (y.determinant() * z.determinant()).abs();
            if det.is_finite() && det > 0.0 {
                det.powf(-0.5 / n as f64)
            } else {
                1.0
            }
        } else {
            1.0
        };
        let y_next = (&y * mu + z_inv / mu) * 0.5;
        let z_next = (&z * mu + y_inv / mu) * 0.5;
        let change = (&y_next - &y).norm() / y_next.norm();
        y = y_next;
        z = z_next;
        if change < 1e-3 {
            scaling = false;
        }
        // Stagnation at roundoff level counts as convergence.
        if change <= tol || (!scaling && change < 1e-10 && change >= prev_change) {
            return Ok(y);
        }
        prev_change = change;
    }
    Err(Error::NonSpdInput {
        reason: "Denman-Beavers iteration did not converge".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> Matrix {
        Matrix::from_diagonal(&DVector::from_row_slice(values))
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i2 = SpdMatrix::identity(2);
        assert_eq!(spd_sqrt(&i2).as_matrix(), &Matrix::identity(2, 2));

        let d = SpdMatrix::new(diag(&[4.0, 9.0])).unwrap();
        let r = spd_sqrt(&d);
        assert!(relative_error(r.as_matrix(), &diag(&[2.0, 3.0])) < 1e-15);
    }

    #[test]
    fn inv_sqrt_of_diagonal_and_identity() {
        let d = SpdMatrix::new(diag(&[4.0, 9.0])).unwrap();
        let r = spd_inv_sqrt(&d).unwrap();
        assert!(relative_error(r.as_matrix(), &diag(&[0.5, 1.0 / 3.0])) < 1e-15);
        let i3 = spd_inv_sqrt(&SpdMatrix::identity(3)).unwrap();
        assert!(relative_error(i3.as_matrix(), &Matrix::identity(3, 3)) < 1e-15);
    }

    #[test]
    fn rejects_nonsymmetric_and_indefinite() {
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(asym),
            Err(Error::NonSpdInput { .. })
        ));
        let indefinite = diag(&[1.0, -1.0]);
        assert!(matches!(
            SpdMatrix::new(indefinite),
            Err(Error::NonSpdInput { .. })
        ));
        let nearly_singular = diag(&[1.0, 1e-13]);
        assert!(matches!(
            SpdMatrix::new(nearly_singular),
            Err(Error::NonSpdInput { .. })
        ));
        let nan = diag(&[1.0, f64::NAN]);
        assert!(SpdMatrix::new(nan).is_err());
    }

    #[test]
    fn ill_conditioned_guard_on_inverse_roots() {
        // Only reachable through scaling of the cached spectrum.
        let base = SpdMatrix::new(diag(&[1.0, 2e-12])).unwrap();
        assert!(base.inv_sqrt().is_ok());
        let tiny = SpdMatrix {
            mat: diag(&[1.0, 1e-15]),
            eigenvalues: DVector::from_row_slice(&[1.0, 1e-15]),
            eigenvectors: Matrix::identity(2, 2),
        };
        assert!(matches!(tiny.inv_sqrt(), Err(Error::IllConditioned { .. })));
        assert!(matches!(tiny.inverse(), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn nonsym_sqrt_trivial_cases() {
        let i = SpdMatrix::identity(2);
        let r = nonsym_psd_sqrt(&i, &i).unwrap();
        assert!(relative_error(&r, &Matrix::identity(2, 2)) < 1e-15);

        let x = SpdMatrix::new(diag(&[4.0, 1.0])).unwrap();
        let y = SpdMatrix::new(diag(&[1.0, 4.0])).unwrap();
        let r = nonsym_psd_sqrt(&x, &y).unwrap();
        assert!(relative_error(&r, &diag(&[2.0, 2.0])) < 1e-15);
    }

    #[test]
    fn nuclear_norm_cases() {
        assert_eq!(nuclear_norm(&Matrix::zeros(3, 2)), 0.0);
        assert!((nuclear_norm(&diag(&[3.0, -4.0])) - 7.0).abs() < 1e-14);
        // ‖a‖ = 2, ‖b‖ = 5
        let a = DVector::from_row_slice(&[2.0, 0.0, 0.0]);
        let b = DVector::from_row_slice(&[3.0, 4.0]);
        let outer = &a * b.transpose();
        assert!((nuclear_norm(&outer) - 10.0).abs() < 1e-14);
    }

    #[test]
    fn denman_beavers_matches_diagonal_root() {
        let m = Matrix::from_row_slice(2, 2, &[4.0, 1.0, 0.0, 9.0]);
        let r = sqrtm_denman_beavers(&m).unwrap();
        assert!(relative_error(&(&r * &r), &m) < 1e-14);
    }

    #[test]
    fn matrix_from_rows_validates() {
        assert!(matrix_from_rows(2, 2, &[1.0, 2.0, 3.0]).is_err());
        assert!(matrix_from_rows(1, 2, &[1.0, f64::INFINITY]).is_err());
        let m = matrix_from_rows(2, 1, &[1.0, 2.0]).unwrap();
        assert_eq!(m[(1, 0)], 2.0);
    }

    #[test]
    fn spd_roots_match_reference_values() {
        let m = matrix_from_rows(2, 2, &[6.76, -4.32, -4.32, 4.24]).unwrap();
        let spd = SpdMatrix::new(m).unwrap();
        let sqrt = matrix_from_rows(
            2,
            2,
            &[
                2.383857702507763,
                -1.037893276880822,
                -1.037893276880822,
                1.7784199576606166,
            ],
        )
        .unwrap();
        let inv_sqrt = matrix_from_rows(
            2,
            2,
            &[
                0.5623857702507762,
                0.3282106723119177,
                0.3282106723119177,
                0.7538419957660616,
            ],
        )
        .unwrap();
        assert!(relative_error(spd.sqrt().as_matrix(), &sqrt) < 1e-13);
        assert!(relative_error(spd.inv_sqrt().unwrap().as_matrix(), &inv_sqrt) < 1e-13);

        let s3 = SpdMatrix::new(
            matrix_from_rows(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.25, 0.5, 0.25, 2.0]).unwrap(),
        )
        .unwrap();
        let expected = matrix_from_rows(
            3,
            3,
            &[
                0.5202460067235055,
                -0.07979822030991102,
                -0.048868202642393256,
                -0.07979822030991113,
                0.5982504085359288,
                -0.02084646432622159,
                -0.04886820264239322,
                -0.02084646432622163,
                0.7175126357905661,
            ],
        )
        .unwrap();
        assert!(relative_error(s3.inv_sqrt().unwrap().as_matrix(), &expected) < 1e-13);
    }

    #[test]
    fn denman_beavers_converges_on_poorly_conditioned_products() {
        let mut rng = crate::rng::stream_rng(17, crate::rng::Stream::Probe);
        for n in [3, 8, 16] {
            let x = crate::rng::random_spd(&mut rng, n, 1e6);
            let y = crate::rng::random_spd(&mut rng, n, 1e6);
            let db = sqrtm_denman_beavers(&(x.as_matrix() * y.as_matrix())).unwrap();
            let eig = nonsym_psd_sqrt(&x, &y).unwrap();
            assert!(relative_error(&db, &eig) < 1e-8, "n = {n}");
        }
    }
}
