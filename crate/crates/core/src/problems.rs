//! Quadratic test problems with exact smoothness constants.
//!
//! * Matrix factorization: `ℓ(W) = ½‖Y − W‖_F²` with a rank-`r` target `Y`, `L = 1`.
//! * Linear regression: `ℓ(W) = ½‖Y − W·X‖_F²`, `L = ‖X·Xᵀ‖₂`.
//!
//! The adapted weight is `W = W_pt + scale·A·Bᵀ`, with `scale = α / r`
//! (1 unless set otherwise).
//!
//! Instances can be written to and read from a plain text format:
//!
//! ```text
//! reflora-instance mf m=4 n=3 r=1 seed=7 scale=1
//! matrix Y 4 3
//! <one row of decimal values per line>
//! matrix W_pt 4 3
//! ...
//! ```

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, symmetrize, Matrix};
use crate::optim::GradientPair;
use crate::refactor::LowRankFactors;
use crate::rng::{gaussian_matrix, stream_rng, Stream};

pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;

    /// `(m, n)`, the shape of `W`.
    fn dims(&self) -> (usize, usize);

    fn w_pretrained(&self) -> &Matrix;

    fn adapter_scale(&self) -> f64;

    fn loss(&self, w: &Matrix) -> f64;

    fn grad(&self, w: &Matrix) -> Matrix;

    /// Lipschitz constant of `∇ℓ` with respect to `W`, when known.
    fn lipschitz(&self) -> Option<f64>;

    /// `W_pt + scale·A·Bᵀ`.
    fn weight(&self, f: &LowRankFactors) -> Matrix {
        self.w_pretrained() + f.product() * self.adapter_scale()
    }

    fn loss_at(&self, f: &LowRankFactors) -> f64 {
        self.loss(&self.weight(f))
    }

    /// Gradients of `ℓ(W_pt + scale·A·Bᵀ)` with respect to `A` and `B`.
    fn grad_pair(&self, f: &LowRankFactors) -> GradientPair {
        let g = self.grad(&self.weight(f)) * self.adapter_scale();
        GradientPair::from_dense(&g, f)
    }
}

fn check_shape(m: &Matrix, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: m.shape(),
        });
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "adapter scale must be positive, got {scale}"
        )))
    }
}

/// `ℓ(W) = ½‖Y − W‖_F²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFactorization {
    y: Matrix,
    w_pt: Matrix,
    rank: usize,
    seed: Option<u64>,
    scale: f64,
}

impl MatrixFactorization {
    /// Problem with an explicit target and zero pretrained weight. `rank`
    /// records the intended adapter rank.
    pub fn new(y: Matrix, rank: usize) -> Result<Self> {
        ensure_finite(&y, "target Y")?;
        let (m, n) = y.shape();
        if rank == 0 || rank > m.min(n) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} must be in 1..=min(m, n) = {}",
                m.min(n)
            )));
        }
        Ok(Self {
            w_pt: Matrix::zeros(m, n),
            y,
            rank,
            seed: None,
            scale: 1.0,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        self.scale = scale;
        Ok(self)
    }

    pub fn target(&self) -> &Matrix {
        &self.y
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Random instance whose target is a standard Gaussian matrix truncated to
/// its top `r` singular values.
pub fn make_mf(m: usize, n: usize, r: usize, seed: u64) -> Result<MatrixFactorization> {
    if m == 0 || n == 0 || r == 0 || r > m.min(n) {
        return Err(Error::InvalidConfig(format!(
            "matrix factorization needs 1 <= r <= min(m, n), got m={m} n={n} r={r}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Instance);
    let g = gaussian_matrix(&mut rng, m, n, 1.0);
    let mut svd = g.svd(true, true);
    // nalgebra returns singular values in descending order.
    for i in r..svd.singular_values.len() {
        svd.singular_values[i] = 0.0;
    }
    let y = svd.recompose().expect("u and v were computed");
    let mut p = MatrixFactorization::new(y, r)?;
    p.seed = Some(seed);
    Ok(p)
}

impl Problem for MatrixFactorization {
    fn name(&self) -> &'static str {
        "mf"
    }

    fn dims(&self) -> (usize, usize) {
        self.y.shape()
    }

    fn w_pretrained(&self) -> &Matrix {
        &self.w_pt
    }

    fn adapter_scale(&self) -> f64 {
        self.scale
    }

    fn loss(&self, w: &Matrix) -> f64 {
        0.5 * (&self.y - w).norm_squared()
    }

    fn grad(&self, w: &Matrix) -> Matrix {
        w - &self.y
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(1.0)
    }

    fn grad_pair(&self, f: &LowRankFactors) -> GradientPair {
        // ∇ℓ·B = W_pt·B + scale·A·(BᵀB) − Y·B, without forming m × n products.
        let s = self.scale;
        let (a, b) = (f.a(), f.b());
        let g_a = (&self.w_pt * b + a * b.tr_mul(b) * s - &self.y * b) * s;
        let g_b = (self.w_pt.tr_mul(a) + b * a.tr_mul(a) * s - self.y.tr_mul(a)) * s;
        GradientPair::new(g_a, g_b)
    }
}

/// `ℓ(W) = ½‖Y − W·X‖_F²` with `X: n × k`, `Y: m × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegression {
    x: Matrix,
    y: Matrix,
    w_pt: Matrix,
    seed: Option<u64>,
    scale: f64,
    lipschitz: f64,
}

impl LinearRegression {
    pub fn new(x: Matrix, y: Matrix, w_pt: Matrix) -> Result<Self> {
        ensure_finite(&x, "design X")?;
        ensure_finite(&y, "response Y")?;
        ensure_finite(&w_pt, "pretrained weight")?;
        let (n, k) = x.shape();
        let m = y.nrows();
        if m == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidConfig(
                "linear regression needs positive dimensions".into(),
            ));
        }
        check_shape(&y, (m, k))?;
        check_shape(&w_pt, (m, n))?;
        let xxt = symmetrize(&(&x * x.transpose()));
        let lipschitz = xxt.symmetric_eigenvalues().max();
        Ok(Self {
            x,
            y,
            w_pt,
            seed: None,
            scale: 1.0,
            lipschitz,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        check_scale(scale)?;
        self.scale = scale;
        Ok(self)
    }

    pub fn design(&self) -> &Matrix {
        &self.x
    }

    pub fn response(&self) -> &Matrix {
        &self.y
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Random instance with standard Gaussian `X` (n × k) and `Y` (m × k) and
/// zero pretrained weight.
pub fn make_linreg(m: usize, n: usize, k: usize, seed: u64) -> Result<LinearRegression> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::InvalidConfig(format!(
            "linear regression needs positive dimensions, got m={m} n={n} k={k}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Instance);
    let x = gaussian_matrix(&mut rng, n, k, 1.0);
    let y = gaussian_matrix(&mut rng, m, k, 1.0);
    let mut p = LinearRegression::new(x, y, Matrix::zeros(m, n))?;
    p.seed = Some(seed);
    Ok(p)
}

impl Problem for LinearRegression {
    fn name(&self) -> &'static str {
        "linreg"
    }

    fn dims(&self) -> (usize, usize) {
        self.w_pt.shape()
    }

    fn w_pretrained(&self) -> &Matrix {
        &self.w_pt
    }

    fn adapter_scale(&self) -> f64 {
        self.scale
    }

    fn loss(&self, w: &Matrix) -> f64 {
        0.5 * (&self.y - w * &self.x).norm_squared()
    }

    fn grad(&self, w: &Matrix) -> Matrix {
        (w * &self.x - &self.y) * self.x.transpose()
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }

    fn grad_pair(&self, f: &LowRankFactors) -> GradientPair {
        let s = self.scale;
        let (a, b) = (f.a(), f.b());
        // Residual W·X − Y with W·X = W_pt·X + scale·A·(BᵀX).
        let resid = &self.w_pt * &self.x + a * b.tr_mul(&self.x) * s - &self.y;
        let g_a = &resid * self.x.tr_mul(b) * s;
        let g_b = &self.x * resid.tr_mul(a) * s;
        GradientPair::new(g_a, g_b)
    }
}

/// Central finite differences of `ℓ(W_pt + scale·A·Bᵀ)` in every entry of `A` and `B`.
pub fn finite_difference_grad_pair(p: &dyn Problem, f: &LowRankFactors, h: f64) -> GradientPair {
    let (a, b) = (f.a().clone(), f.b().clone());
    let probe =
        |a: &Matrix, b: &Matrix| p.loss_at(&LowRankFactors::from_parts(a.clone(), b.clone()));
    let mut g_a = Matrix::zeros(a.nrows(), a.ncols());
    for i in 0..a.len() {
        let mut plus = a.clone();
        let mut minus = a.clone();
        plus[i] += h;
        minus[i] -= h;
        g_a[i] = (probe(&plus, &b) - probe(&minus, &b)) / (2.0 * h);
    }
    let mut g_b = Matrix::zeros(b.nrows(), b.ncols());
    for i in 0..b.len() {
        let mut plus = b.clone();
        let mut minus = b.clone();
        plus[i] += h;
        minus[i] -= h;
        g_b[i] = (probe(&a, &plus) - probe(&a, &minus)) / (2.0 * h);
    }
    GradientPair::new(g_a, g_b)
}

/// Either problem kind, for serialization and dynamic dispatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Mf(MatrixFactorization),
    LinReg(LinearRegression),
}

impl Instance {
    pub fn as_problem(&self) -> &dyn Problem {
        match self {
            Instance::Mf(p) => p,
            Instance::LinReg(p) => p,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Instance::Mf(p) => p.seed,
            Instance::LinReg(p) => p.seed,
        }
    }
}

fn write_matrix<W: Write>(out: &mut W, name: &str, m: &Matrix) -> Result<()> {
    writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols())?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_instance<W: Write>(inst: &Instance, out: &mut W) -> Result<()> {
    let seed = inst
        .seed()
        .map(|s| format!(" seed={s}"))
        .unwrap_or_default();
    match inst {
        Instance::Mf(p) => {
            let (m, n) = p.dims();
            writeln!(
                out,
                "reflora-instance mf m={m} n={n} r={}{seed} scale={:.16e}",
                p.rank, p.scale
            )?;
            write_matrix(out, "Y", &p.y)?;
            write_matrix(out, "W_pt", &p.w_pt)?;
        }
        Instance::LinReg(p) => {
            let (m, n) = p.dims();
            let k = p.x.ncols();
            writeln!(
                out,
                "reflora-instance linreg m={m} n={n} k={k}{seed} scale={:.16e}",
                p.scale
            )?;
            write_matrix(out, "X", &p.x)?;
            write_matrix(out, "Y", &p.y)?;
            write_matrix(out, "W_pt", &p.w_pt)?;
        }
    }
    Ok(())
}

struct LineReader<R> {
    inner: R,
    line_no: usize,
}

impl<R: BufRead> LineReader<R> {
    /// Next non-blank line, trimmed.
    fn next(&mut self) -> Result<Option<String>> {
        loop {
            let mut buf = String::new();
            if self.inner.read_line(&mut buf)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            let t = buf.trim();
            if !t.is_empty() {
                return Ok(Some(t.to_string()));
            }
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            reason: reason.into(),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let header = self
            .next()?
            .ok_or_else(|| self.err(format!("missing matrix {name}")))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "matrix" || parts[1] != name {
            return Err(self.err(format!(
                "expected 'matrix {name} <rows> <cols>', got '{header}'"
            )));
        }
        let rows: usize = parts[2].parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = parts[3].parse().map_err(|_| self.err("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self
                .next()?
                .ok_or_else(|| self.err(format!("matrix {name} truncated")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(format!("bad number '{tok}'")))?;
                if !v.is_finite() {
                    return Err(self.err(format!("non-finite value '{tok}'")));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(self.err(format!(
                    "expected {cols} values, got {}",
                    data.len() - before
                )));
            }
        }
        Ok(Matrix::from_row_slice(rows, cols, &data))
    }
}

pub fn read_instance<R: BufRead>(input: R) -> Result<Instance> {
    let mut lr = LineReader {
        inner: input,
        line_no: 0,
    };
    let header = lr.next()?.ok_or_else(|| lr.err("empty input"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("reflora-instance") {
        return Err(lr.err("expected 'reflora-instance' header"));
    }
    let kind = parts
        .next()
        .ok_or_else(|| lr.err("missing instance kind"))?
        .to_string();
    let mut keys = std::collections::BTreeMap::new();
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lr.err(format!("expected key=value, got '{kv}'")))?;
        keys.insert(k.to_string(), v.to_string());
    }
    let get_usize = |lr: &LineReader<R>, k: &str| -> Result<usize> {
        keys.get(k)
            .ok_or_else(|| lr.err(format!("missing key '{k}'")))?
            .parse()
            .map_err(|_| lr.err(format!("bad value for '{k}'")))
    };
    let seed = match keys.get("seed") {
        Some(s) => Some(s.parse::<u64>().map_err(|_| lr.err("bad seed"))?),
        None => None,
    };
    let scale = match keys.get("scale") {
        Some(s) => s.parse::<f64>().map_err(|_| lr.err("bad scale"))?,
        None => 1.0,
    };
    match kind.as_str() {
        "mf" => {
            let (m, n, r) = (
                get_usize(&lr, "m")?,
                get_usize(&lr, "n")?,
                get_usize(&lr, "r")?,
            );
            let y = lr.matrix("Y")?;
            let w_pt = lr.matrix("W_pt")?;
            check_shape(&y, (m, n))?;
            check_shape(&w_pt, (m, n))?;
            ensure_finite(&w_pt, "pretrained weight")?;
            let mut p = MatrixFactorization::new(y, r)?.with_scale(scale)?;
            p.w_pt = w_pt;
            p.seed = seed;
            Ok(Instance::Mf(p))
        }
        "linreg" => {
            let (m, n, k) = (
                get_usize(&lr, "m")?,
                get_usize(&lr, "n")?,
                get_usize(&lr, "k")?,
            );
            let x = lr.matrix("X")?;
            let y = lr.matrix("Y")?;
            let w_pt = lr.matrix("W_pt")?;
            check_shape(&x, (n, k))?;
            check_shape(&y, (m, k))?;
            let mut p = LinearRegression::new(x, y, w_pt)?.with_scale(scale)?;
            p.seed = seed;
            Ok(Instance::LinReg(p))
        }
        other => Err(lr.err(format!("unknown instance kind '{other}'"))),
    }
}
