//! Seeded random streams and random matrix generators.
//!
//! Every run derives its randomness from a single `u64` seed. The seed keys
//! a ChaCha8 generator (counter based), and independent purposes draw from
//! distinct ChaCha stream ids, so adding draws to one stream never shifts
//! another:
//!
//! | stream | id | used for                                   |
//! |--------|----|--------------------------------------------|
//! | `Instance` | 0 | problem data (`Y`, `X`)                 |
//! | `Init`     | 1 | initial adapter factors                 |
//! | `Probe`    | 2 | property checks and synthetic workloads |
//!
//! Gaussian draws use the ziggurat sampler from `rand_distr`; only the
//! distribution is portable, not the exact sample bits across library
//! versions.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{Matrix, SpdMatrix};

pub type SeededRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Instance,
    Init,
    Probe,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Instance => 0,
            Stream::Init => 1,
            Stream::Probe => 2,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Matrix with i.i.d. `N(0, std²)` entries, filled row by row.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        data.push(std * z);
    }
    Matrix::from_row_slice(rows, cols, &data)
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    let g = gaussian_matrix(rng, n, n, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col *= -1.0;
        }
    }
    q
}

/// `U · diag(σ) · Vᵀ` with Haar `U`, `V` and singular values log-uniform in
/// `[1, cond]`, where `cond` itself is log-uniform in `[1, max_cond]`.
pub fn random_invertible<R: Rng + ?Sized>(rng: &mut R, n: usize, max_cond: f64) -> Matrix {
    let u = random_orthogonal(rng, n);
    let v = random_orthogonal(rng, n);
    let log_cond = rng.random::<f64>() * max_cond.max(1.0).ln();
    let mut sigma: Vec<f64> = (0..n)
        .map(|_| (rng.random::<f64>() * log_cond).exp())
        .collect();
    if n > 1 {
        // Pin the extremes so the requested condition number is attained.
        sigma[0] = 1.0;
        sigma[n - 1] = log_cond.exp();
    }
    let scale = (rng.random::<f64>() * 2.0 - 1.0).exp();
    let d = Matrix::from_diagonal(&DVector::from_vec(sigma)) * scale;
    u * d * v.transpose()
}

/// SPD matrix `Q · diag(λ) · Qᵀ` with eigenvalues log-uniform in `[1, cond]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, cond: f64) -> SpdMatrix {
    let q = random_orthogonal(rng, n);
    let lambdas: Vec<f64> = (0..n)
        .map(|_| (rng.random::<f64>() * cond.max(1.0).ln()).exp())
        .collect();
    let d = Matrix::from_diagonal(&DVector::from_vec(lambdas));
    SpdMatrix::from_symmetrized(&(&q * d * q.transpose())).expect("eigenvalues are positive")
}
