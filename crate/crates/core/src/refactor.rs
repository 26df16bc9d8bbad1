//! Optimal refactoring of a low-rank pair `(A, B)`.
//!
//! Every equivalent factorization of `A·Bᵀ` is `(A·P, B·P⁻ᵀ)` for an
//! invertible `P`, and the weight update after one gradient step depends on
//! `P` only through the SPD matrix `S = P·Pᵀ`. This module picks `S`:
//!
//! * the balanced choice `S̃`, the matrix geometric mean `(AᵀA)⁻¹ # BᵀB`,
//!   which minimises `g(S) = ‖A·S^{1/2}‖_F² + ‖B·S^{-1/2}‖_F²` and makes the
//!   refactored pair satisfy `ÃᵀÃ = B̃ᵀB̃`;
//! * the exact minimiser of `(g(S) − 1/(Lη))²`, which rescales `S̃` when the
//!   learning rate is below `1/(C̃·L)`, with `C̃ = 2‖A·Bᵀ‖_*`;
//! * the scalar restriction `S = s·I`, balanced at `s = ‖B‖_F / ‖A‖_F`.

use nalgebra::SymmetricEigen;

use crate::error::{Error, FactorSide, Result};
use crate::linalg::{ensure_finite, nuclear_norm, symmetrize, Matrix, SpdMatrix, SPD_EPS};

/// Largest `min(m, n)` for which `C̃` is computed from a dense SVD of `A·Bᵀ`.
/// Above it the `r × r` route is used so no `m × n` product is formed.
pub const NUCLEAR_SVD_MAX_DIM: usize = 512;

/// The adapter pair `(A, B)` with `A: m × r`, `B: n × r`; the increment is `A·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    a: Matrix,
    b: Matrix,
}

impl LowRankFactors {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(Error::DimensionMismatch {
                expected: (b.nrows(), a.ncols()),
                got: (b.nrows(), b.ncols()),
            });
        }
        let r = a.ncols();
        if r == 0 || r > a.nrows().min(b.nrows()) {
            return Err(Error::InvalidConfig(format!(
                "rank {r} must be in 1..=min(m, n) = {}",
                a.nrows().min(b.nrows())
            )));
        }
        ensure_finite(&a, "factor A")?;
        ensure_finite(&b, "factor B")?;
        Ok(Self { a, b })
    }

    /// No shape or finiteness checks; used for optimizer outputs, which may
    /// legitimately blow up during a diverging run.
    pub(crate) fn from_parts(a: Matrix, b: Matrix) -> Self {
        debug_assert_eq!(a.ncols(), b.ncols());
        Self { a, b }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.a, self.b)
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// `(m, n, r)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.b.nrows(), self.a.ncols())
    }

    /// `A·Bᵀ`.
    pub fn product(&self) -> Matrix {
        &self.a * self.b.transpose()
    }

    pub fn gram_a(&self) -> Matrix {
        symmetrize(&self.a.tr_mul(&self.a))
    }

    pub fn gram_b(&self) -> Matrix {
        symmetrize(&self.b.tr_mul(&self.b))
    }

    pub fn norm_a(&self) -> f64 {
        self.a.norm()
    }

    pub fn norm_b(&self) -> f64 {
        self.b.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|x| x.is_finite())
    }

    /// Both Gram matrices as SPD matrices, or `RankDeficient` when either
    /// factor has `σ_min / σ_max ≤ √SPD_EPS`.
    pub fn gram_pair(&self) -> Result<(SpdMatrix, SpdMatrix)> {
        Ok((
            gram_spd(self.gram_a(), FactorSide::A)?,
            gram_spd(self.gram_b(), FactorSide::B)?,
        ))
    }

    pub fn is_full_rank(&self) -> bool {
        self.gram_pair().is_ok()
    }

    /// `(A·P, B·P⁻ᵀ)`.
    pub fn refactored(&self, p: &Matrix) -> Result<Self> {
        let r = self.rank();
        if p.shape() != (r, r) {
            return Err(Error::DimensionMismatch {
                expected: (r, r),
                got: p.shape(),
            });
        }
        let p_inv = p.clone().try_inverse().ok_or_else(|| Error::NonSpdInput {
            reason: "refactoring matrix is singular".into(),
        })?;
        Ok(Self::from_parts(&self.a * p, &self.b * p_inv.transpose()))
    }

    /// `(A·S^{1/2}, B·S^{-1/2})`, the pair the refactored step operates on.
    pub fn refactored_by(&self, s: &SpdMatrix) -> Result<Self> {
        let half = s.sqrt();
        let inv_half = s.inv_sqrt()?;
        Ok(Self::from_parts(
            &self.a * half.as_matrix(),
            &self.b * inv_half.as_matrix(),
        ))
    }

    /// `‖AᵀA − BᵀB‖_F / ‖AᵀA‖_F` of the factors as stored.
    pub fn gram_gap(&self) -> f64 {
        let ga = self.gram_a();
        let denom = ga.norm();
        let diff = (&ga - self.gram_b()).norm();
        if denom > 0.0 {
            diff / denom
        } else {
            diff
        }
    }
}

fn gram_spd(gram: Matrix, side: FactorSide) -> Result<SpdMatrix> {
    ensure_finite(&gram, "Gram matrix")?;
    let eig = SymmetricEigen::new(gram.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let ratio = if hi > 0.0 { lo.max(0.0) / hi } else { 0.0 };
    if !(ratio > SPD_EPS) {
        return Err(Error::RankDeficient {
            side,
            ratio: ratio.sqrt(),
        });
    }
    Ok(SpdMatrix::from_eigen(gram, eig))
}

/// Which root of the small-learning-rate branch to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootChoice {
    #[default]
    Plus,
    Minus,
}

/// How the refactoring matrix is selected each step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RefactorMode {
    /// `S = S̃` for every learning rate.
    #[default]
    BalancedAlways,
    /// Exact minimiser of the bound objective for a known smoothness constant.
    TheoremExact { lipschitz: f64, root: RootChoice },
    /// `S = s·I` with the balanced scalar `s = ‖B‖_F / ‖A‖_F`.
    Scalar,
    /// Exact scalar minimiser for a known smoothness constant.
    ScalarTheoremExact { lipschitz: f64, root: RootChoice },
    /// `S = I`: plain LoRA.
    Identity,
}

impl RefactorMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RefactorMode::TheoremExact { lipschitz, .. }
            | RefactorMode::ScalarTheoremExact { lipschitz, .. } => {
                if lipschitz.is_finite() && lipschitz > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "smoothness constant must be finite and positive, got {lipschitz}"
                    )))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(
            self,
            RefactorMode::Scalar | RefactorMode::ScalarTheoremExact { .. }
        )
    }

    /// The scalar counterpart used by the scalar refactoring path.
    pub fn to_scalar(self) -> Self {
        match self {
            RefactorMode::BalancedAlways | RefactorMode::Scalar => RefactorMode::Scalar,
            RefactorMode::TheoremExact { lipschitz, root }
            | RefactorMode::ScalarTheoremExact { lipschitz, root } => {
                RefactorMode::ScalarTheoremExact { lipschitz, root }
            }
            RefactorMode::Identity => RefactorMode::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Balanced,
    SmallEtaPlus,
    SmallEtaMinus,
    Identity,
}

#[derive(Debug, Clone)]
pub enum Refactoring {
    Matrix(SpdMatrix),
    Scalar(f64),
}

#[derive(Debug, Clone)]
pub struct RefactorResult {
    pub refactoring: Refactoring,
    pub branch: Branch,
    /// `2‖A·Bᵀ‖_*` for matrix modes, `2‖A‖_F‖B‖_F` for scalar modes.
    pub c_tilde: f64,
    /// `g(S)` at the returned `S`.
    pub g_value: f64,
}

impl RefactorResult {
    pub fn s_matrix(&self) -> Option<&SpdMatrix> {
        match &self.refactoring {
            Refactoring::Matrix(s) => Some(s),
            Refactoring::Scalar(_) => None,
        }
    }

    pub fn s_scalar(&self) -> Option<f64> {
        match self.refactoring {
            Refactoring::Scalar(s) => Some(s),
            Refactoring::Matrix(_) => None,
        }
    }

    /// The refactoring as an `r × r` SPD matrix (`s·I` for scalars).
    pub fn to_spd(&self, r: usize) -> Result<SpdMatrix> {
        match &self.refactoring {
            Refactoring::Matrix(s) => Ok(s.clone()),
            Refactoring::Scalar(s) => SpdMatrix::scaled_identity(r, *s),
        }
    }
}

/// Balanced refactoring `S̃ = X^{-1/2} (X^{1/2} Y X^{1/2})^{1/2} X^{-1/2}` with
/// `X = AᵀA`, `Y = BᵀB`.
pub fn geometric_mean_s(f: &LowRankFactors) -> Result<SpdMatrix> {
    let (x, y) = f.gram_pair()?;
    geometric_mean_from_grams(&x, &y)
}

/// `S̃` from precomputed Gram matrices; the unique SPD solution of `S·X·S = Y`.
pub fn geometric_mean_from_grams(x: &SpdMatrix, y: &SpdMatrix) -> Result<SpdMatrix> {
    let xh = x.sqrt();
    let xih = x.inv_sqrt()?;
    let inner = SpdMatrix::from_symmetrized(&(xh.as_matrix() * y.as_matrix() * xh.as_matrix()))?;
    let root = inner.sqrt();
    SpdMatrix::from_symmetrized(&(xih.as_matrix() * root.as_matrix() * xih.as_matrix()))
}

/// `C̃ = 2‖A·Bᵀ‖_*`.
pub fn c_tilde(f: &LowRankFactors) -> f64 {
    let (m, n, _) = f.dims();
    if m.min(n) <= NUCLEAR_SVD_MAX_DIM {
        2.0 * nuclear_norm(&f.product())
    } else {
        2.0 * nuclear_norm_small(f)
    }
}

/// `‖A·Bᵀ‖_*` via `σᵢ(A·Bᵀ)² = λᵢ(X^{1/2} Y X^{1/2})`; tolerates rank deficiency.
fn nuclear_norm_small(f: &LowRankFactors) -> f64 {
    let gx = SymmetricEigen::new(f.gram_a());
    let roots = gx.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &gx.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= roots[j];
    }
    let xh = scaled * q.transpose();
    let inner = symmetrize(&(&xh * f.gram_b() * &xh));
    SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// `g(S) = ‖A·S^{1/2}‖_F² + ‖B·S^{-1/2}‖_F²`.
pub fn g_objective(f: &LowRankFactors, s: &SpdMatrix) -> Result<f64> {
    let r = f.rank();
    if s.dim() != r {
        return Err(Error::DimensionMismatch {
            expected: (r, r),
            got: (s.dim(), s.dim()),
        });
    }
    let refactored = f.refactored_by(s)?;
    Ok(refactored.a().norm_squared() + refactored.b().norm_squared())
}

/// Scale `γ` of the small-learning-rate branch for `x = C̃·L·η ∈ (0, 1)`.
/// Roots multiply to one, so the minus root is taken as `1/γ₊`.
fn small_eta_gamma(x: f64, root: RootChoice) -> f64 {
    let inv = 1.0 / x;
    let plus = inv + (inv * inv - 1.0).sqrt();
    match root {
        RootChoice::Plus => plus,
        RootChoice::Minus => 1.0 / plus,
    }
}

fn check_eta_for_exact(eta: f64) -> Result<()> {
    if eta == 0.0 {
        return Err(Error::InvalidEta {
            eta,
            reason: "the bound minimiser jumps at eta = 0 and is undefined there",
        });
    }
    if !eta.is_finite() {
        return Err(Error::InvalidEta {
            eta,
            reason: "learning rate must be finite",
        });
    }
    Ok(())
}

/// Optimal refactoring matrix for the given mode; scalar modes are
/// delegated to [`optimal_scalar`].
pub fn optimal_s(f: &LowRankFactors, eta: f64, mode: RefactorMode) -> Result<RefactorResult> {
    mode.validate()?;
    match mode {
        RefactorMode::Scalar | RefactorMode::ScalarTheoremExact { .. } => {
            optimal_scalar(f, eta, mode)
        }
        RefactorMode::Identity => {
            let s = SpdMatrix::identity(f.rank());
            Ok(RefactorResult {
                g_value: f.a().norm_squared() + f.b().norm_squared(),
                refactoring: Refactoring::Matrix(s),
                branch: Branch::Identity,
                c_tilde: 2.0 * nuclear_norm_small(f),
            })
        }
        RefactorMode::BalancedAlways => {
            let s = geometric_mean_s(f)?;
            Ok(RefactorResult {
                g_value: g_objective(f, &s)?,
                refactoring: Refactoring::Matrix(s),
                branch: Branch::Balanced,
                c_tilde: 2.0 * nuclear_norm_small(f),
            })
        }
        RefactorMode::TheoremExact { lipschitz, root } => {
            check_eta_for_exact(eta)?;
            let balanced = geometric_mean_s(f)?;
            let c = c_tilde(f);
            if eta < 0.0 || eta >= 1.0 / (c * lipschitz) {
                return Ok(RefactorResult {
                    g_value: g_objective(f, &balanced)?,
                    refactoring: Refactoring::Matrix(balanced),
                    branch: Branch::Balanced,
                    c_tilde: c,
                });
            }
            let gamma = small_eta_gamma(c * lipschitz * eta, root);
            let s = balanced.scaled(gamma)?;
            Ok(RefactorResult {
                g_value: g_objective(f, &s)?,
                refactoring: Refactoring::Matrix(s),
                branch: match root {
                    RootChoice::Plus => Branch::SmallEtaPlus,
                    RootChoice::Minus => Branch::SmallEtaMinus,
                },
                c_tilde: c,
            })
        }
    }
}

/// Optimal scalar refactoring `S = s·I`. Matrix modes map to their scalar
/// counterparts. Full rank is not required, only nonzero factors.
pub fn optimal_scalar(f: &LowRankFactors, eta: f64, mode: RefactorMode) -> Result<RefactorResult> {
    mode.validate()?;
    let na = f.norm_a();
    let nb = f.norm_b();
    if na == 0.0 {
        return Err(Error::ZeroFactor {
            side: FactorSide::A,
        });
    }
    if nb == 0.0 {
        return Err(Error::ZeroFactor {
            side: FactorSide::B,
        });
    }
    let c = 2.0 * na * nb;
    let g_at = |s: f64| na * na * s + nb * nb / s;
    let balanced = |c: f64| RefactorResult {
        refactoring: Refactoring::Scalar(nb / na),
        branch: Branch::Balanced,
        c_tilde: c,
        g_value: g_at(nb / na),
    };
    match mode.to_scalar() {
        RefactorMode::Identity => Ok(RefactorResult {
            refactoring: Refactoring::Scalar(1.0),
            branch: Branch::Identity,
            c_tilde: c,
            g_value: g_at(1.0),
        }),
        RefactorMode::ScalarTheoremExact { lipschitz, root } => {
            check_eta_for_exact(eta)?;
            if eta < 0.0 || eta >= 1.0 / (c * lipschitz) {
                return Ok(balanced(c));
            }
            let q = 1.0 / (lipschitz * eta);
            let plus = (q + (q * q - c * c).sqrt()) / (2.0 * na * na);
            let (s, branch) = match root {
                RootChoice::Plus => (plus, Branch::SmallEtaPlus),
                // s₊ · s₋ = ‖B‖²/‖A‖²
                RootChoice::Minus => (nb * nb / (na * na * plus), Branch::SmallEtaMinus),
            };
            Ok(RefactorResult {
                refactoring: Refactoring::Scalar(s),
                branch,
                c_tilde: c,
                g_value: g_at(s),
            })
        }
        _ => Ok(balanced(c)),
    }
}

/// Truncated loss bound after one refactored step:
/// `(L·η²/2)·‖∇ℓ‖₂²·(g(S) − 1/(L·η))² + const_terms`.
///
/// The third-order remainder is not included. At `η = 0` the squared term
/// is taken as zero and `const_terms` is returned unchanged.
pub fn upper_bound_eval(
    f: &LowRankFactors,
    s: &SpdMatrix,
    eta: f64,
    lipschitz: f64,
    grad_spec_norm: f64,
    const_terms: f64,
) -> Result<f64> {
    if !(lipschitz > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "smoothness constant must be positive, got {lipschitz}"
        )));
    }
    if eta == 0.0 {
        return Ok(const_terms);
    }
    let g = g_objective(f, s)?;
    let gap = g - 1.0 / (lipschitz * eta);
    Ok(0.5 * lipschitz * eta * eta * grad_spec_norm * grad_spec_norm * gap * gap + const_terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matrix_from_rows, relative_error};
    use crate::rng::{gaussian_matrix, random_spd, stream_rng, Stream};

    fn column(values: &[f64]) -> Matrix {
        Matrix::from_column_slice(values.len(), 1, values)
    }

    fn random_factors(seed: u64, m: usize, n: usize, r: usize) -> LowRankFactors {
        let mut rng = stream_rng(seed, Stream::Probe);
        LowRankFactors::new(
            gaussian_matrix(&mut rng, m, r, 1.0),
            gaussian_matrix(&mut rng, n, r, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn factors_validate_shapes() {
        assert!(LowRankFactors::new(Matrix::zeros(3, 2), Matrix::zeros(4, 1)).is_err());
        assert!(LowRankFactors::new(Matrix::zeros(1, 2), Matrix::zeros(4, 2)).is_err());
        assert!(LowRankFactors::new(Matrix::zeros(3, 0), Matrix::zeros(4, 0)).is_err());
        assert!(LowRankFactors::new(Matrix::zeros(3, 2), Matrix::zeros(4, 2)).is_ok());
    }

    #[test]
    fn balanced_input_is_fixed_point() {
        // Orthonormal columns on both sides: AᵀA = BᵀB = I.
        let a = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(4, 2, &[0.0, 0.0, 0.6, 0.0, 0.8, 0.0, 0.0, 1.0]);
        let f = LowRankFactors::new(a, b).unwrap();
        let s = geometric_mean_s(&f).unwrap();
        assert!(relative_error(s.as_matrix(), &Matrix::identity(2, 2)) < 1e-14);
    }

    #[test]
    fn rank_one_geometric_mean_is_norm_ratio() {
        let f = LowRankFactors::new(column(&[2.0, 0.0]), column(&[0.0, 6.0, 0.0])).unwrap();
        let s = geometric_mean_s(&f).unwrap();
        assert!((s.as_matrix()[(0, 0)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_factor_is_rejected() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let f = LowRankFactors::new(a, b).unwrap();
        assert!(matches!(
            geometric_mean_s(&f),
            Err(Error::RankDeficient {
                side: FactorSide::A,
                ..
            })
        ));
        let zero_b = LowRankFactors::new(Matrix::identity(3, 2), Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(
            geometric_mean_s(&zero_b),
            Err(Error::RankDeficient {
                side: FactorSide::B,
                ..
            })
        ));
    }

    #[test]
    fn stationarity_holds_on_random_factors() {
        for seed in 0..20 {
            let f = random_factors(seed, 7, 5, 3);
            let s = geometric_mean_s(&f).unwrap();
            let lhs = s.as_matrix() * f.gram_a() * s.as_matrix();
            assert!(relative_error(&lhs, &f.gram_b()) < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn boundary_eta_returns_balanced() {
        let f = random_factors(3, 6, 5, 2);
        let c = c_tilde(&f);
        let l = 1.7;
        let res = optimal_s(
            &f,
            1.0 / (c * l),
            RefactorMode::TheoremExact {
                lipschitz: l,
                root: RootChoice::Plus,
            },
        )
        .unwrap();
        assert_eq!(res.branch, Branch::Balanced);
        let balanced = geometric_mean_s(&f).unwrap();
        assert!(relative_error(res.s_matrix().unwrap().as_matrix(), balanced.as_matrix()) < 1e-15);
    }

    #[test]
    fn rank_one_small_eta_roots() {
        // a = b = e₁ so C̃ = 2; L = 1, η = 1/4 → γ = 2 ± √3.
        let f = LowRankFactors::new(column(&[1.0, 0.0]), column(&[1.0, 0.0])).unwrap();
        assert!((c_tilde(&f) - 2.0).abs() < 1e-15);
        for (root, expected, branch) in [
            (RootChoice::Plus, 2.0 + 3f64.sqrt(), Branch::SmallEtaPlus),
            (RootChoice::Minus, 2.0 - 3f64.sqrt(), Branch::SmallEtaMinus),
        ] {
            let res = optimal_s(
                &f,
                0.25,
                RefactorMode::TheoremExact {
                    lipschitz: 1.0,
                    root,
                },
            )
            .unwrap();
            assert_eq!(res.branch, branch);
            let s = res.s_matrix().unwrap().as_matrix()[(0, 0)];
            assert!((s - expected).abs() < 1e-14, "{s} vs {expected}");
            assert!((res.g_value - 4.0).abs() < 1e-13);
        }
    }

    #[test]
    fn negative_eta_is_balanced_and_zero_eta_rejected() {
        let f = random_factors(4, 5, 5, 2);
        let mode = RefactorMode::TheoremExact {
            lipschitz: 1.0,
            root: RootChoice::Plus,
        };
        assert_eq!(optimal_s(&f, -0.1, mode).unwrap().branch, Branch::Balanced);
        assert!(matches!(
            optimal_s(&f, 0.0, mode),
            Err(Error::InvalidEta { .. })
        ));
        assert!(matches!(
            optimal_scalar(&f, 0.0, mode.to_scalar()),
            Err(Error::InvalidEta { .. })
        ));
        // The balanced mode does not depend on eta at all.
        assert!(optimal_s(&f, 0.0, RefactorMode::BalancedAlways).is_ok());
    }

    #[test]
    fn small_eta_bound_objective_is_attained() {
        let f = random_factors(9, 8, 6, 3);
        let c = c_tilde(&f);
        let l = 2.0;
        let eta = 0.3 / (c * l);
        for root in [RootChoice::Plus, RootChoice::Minus] {
            let res =
                optimal_s(&f, eta, RefactorMode::TheoremExact { lipschitz: l, root }).unwrap();
            let g = g_objective(&f, res.s_matrix().unwrap()).unwrap();
            let target = 1.0 / (l * eta);
            assert!(((g - target) / target).abs() < 1e-10);
        }
    }

    #[test]
    fn scalar_branches() {
        // ‖A‖ = 2, ‖B‖ = 1, large eta → s = 0.5
        let f = LowRankFactors::new(column(&[2.0, 0.0]), column(&[0.0, 1.0])).unwrap();
        let res = optimal_scalar(&f, 10.0, RefactorMode::Scalar).unwrap();
        assert_eq!(res.s_scalar(), Some(0.5));
        let exact = RefactorMode::ScalarTheoremExact {
            lipschitz: 1.0,
            root: RootChoice::Plus,
        };
        assert_eq!(
            optimal_scalar(&f, 10.0, exact).unwrap().s_scalar(),
            Some(0.5)
        );

        // ‖A‖ = ‖B‖ = 1 and 1/(Lη) = 4 → s = 2 ± √3
        let g = LowRankFactors::new(column(&[1.0, 0.0]), column(&[0.0, 1.0])).unwrap();
        for (root, expected) in [
            (RootChoice::Plus, 2.0 + 3f64.sqrt()),
            (RootChoice::Minus, 2.0 - 3f64.sqrt()),
        ] {
            let res = optimal_scalar(
                &g,
                0.25,
                RefactorMode::ScalarTheoremExact {
                    lipschitz: 1.0,
                    root,
                },
            )
            .unwrap();
            assert!((res.s_scalar().unwrap() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_zero_factor() {
        let f = LowRankFactors::new(column(&[1.0, 0.0]), column(&[0.0, 0.0])).unwrap();
        assert!(matches!(
            optimal_scalar(&f, 0.1, RefactorMode::Scalar),
            Err(Error::ZeroFactor {
                side: FactorSide::B
            })
        ));
    }

    #[test]
    fn g_objective_cases() {
        let f = random_factors(17, 6, 4, 2);
        let i = SpdMatrix::identity(2);
        let expected = f.a().norm_squared() + f.b().norm_squared();
        assert!((g_objective(&f, &i).unwrap() - expected).abs() < 1e-12 * expected);

        let balanced = geometric_mean_s(&f).unwrap();
        let g_min = g_objective(&f, &balanced).unwrap();
        let c = c_tilde(&f);
        assert!(((g_min - c) / c).abs() < 1e-10);

        let other = random_spd(&mut stream_rng(17, Stream::Init), 2, 10.0);
        assert!(g_objective(&f, &other).unwrap() > c);

        assert!(g_objective(&f, &SpdMatrix::identity(3)).is_err());
    }

    #[test]
    fn large_dimension_nuclear_route_agrees() {
        let f = random_factors(21, 30, 20, 4);
        let dense = 2.0 * nuclear_norm(&f.product());
        let small = 2.0 * nuclear_norm_small(&f);
        assert!(((dense - small) / dense).abs() < 1e-12);
    }

    #[test]
    fn upper_bound_degenerate_cases() {
        let f = random_factors(2, 4, 4, 2);
        let s = geometric_mean_s(&f).unwrap();
        assert_eq!(upper_bound_eval(&f, &s, 0.0, 1.0, 3.0, 1.25).unwrap(), 1.25);
        // Pick eta so that g(S) = 1/(Lη).
        let g = g_objective(&f, &s).unwrap();
        let l = 2.0;
        let eta = 1.0 / (l * g);
        let v = upper_bound_eval(&f, &s, eta, l, 3.0, 1.25).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
    }

    #[test]
    fn geometric_mean_matches_reference_values() {
        let a = matrix_from_rows(4, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, -1.1, 0.2, 0.4]).unwrap();
        let b = matrix_from_rows(3, 2, &[0.9, -0.2, 0.1, 1.3, -0.6, 0.8]).unwrap();
        let f = LowRankFactors::new(a, b).unwrap();
        let expected = matrix_from_rows(
            2,
            2,
            &[
                0.8430496268767567,
                -0.019823052552114237,
                -0.019823052552114227,
                0.6465228712646376,
            ],
        )
        .unwrap();
        assert!(relative_error(geometric_mean_s(&f).unwrap().as_matrix(), &expected) < 1e-12);
        assert!((c_tilde(&f) - 10.0610387101599).abs() < 1e-12);
    }
}
