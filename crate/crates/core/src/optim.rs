//! One-step updates of the adapter pair.
//!
//! Steppers never see the dense `m × n` gradient. Callers hand in the
//! factor gradients `∇ℓ·B` and `∇ℓᵀ·A` as a [`GradientPair`].
//!
//! * [`lora_gd_step`]: plain gradient descent on `(A, B)`.
//! * [`reflora_step`]: the refactored step `A − η·∇ℓ·B·S⁻¹`, `B − η·∇ℓᵀ·A·S`,
//!   or, with an adaptive optimizer, Adam on the preconditioned gradients.
//! * [`reflora_s_step`]: scalar refactoring `(√s·A, B/√s)` followed by a plain
//!   step; Adam moments are rescaled to match the new coordinates.
//! * [`scaledgd_step`]: `A − η·∇ℓ·B·(BᵀB)⁻¹`, `B − η·∇ℓᵀ·A·(AᵀA)⁻¹`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SpdMatrix};
use crate::refactor::{
    geometric_mean_s, optimal_s, optimal_scalar, LowRankFactors, RefactorMode, RefactorResult,
};

/// `g_A = ∇ℓ(W)·B` and `g_B = ∇ℓ(W)ᵀ·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub g_a: Matrix,
    pub g_b: Matrix,
}

impl GradientPair {
    pub fn new(g_a: Matrix, g_b: Matrix) -> Self {
        Self { g_a, g_b }
    }

    /// Factor gradients from a dense gradient `∇ℓ(W)`.
    pub fn from_dense(grad: &Matrix, f: &LowRankFactors) -> Self {
        Self {
            g_a: grad * f.b(),
            g_b: grad.tr_mul(f.a()),
        }
    }

    pub fn zeros_like(f: &LowRankFactors) -> Self {
        Self {
            g_a: Matrix::zeros(f.a().nrows(), f.a().ncols()),
            g_b: Matrix::zeros(f.b().nrows(), f.b().ncols()),
        }
    }

    fn check(&self, f: &LowRankFactors) -> Result<()> {
        if self.g_a.shape() != f.a().shape() {
            return Err(Error::DimensionMismatch {
                expected: f.a().shape(),
                got: self.g_a.shape(),
            });
        }
        if self.g_b.shape() != f.b().shape() {
            return Err(Error::DimensionMismatch {
                expected: f.b().shape(),
                got: self.g_b.shape(),
            });
        }
        if self
            .g_a
            .iter()
            .chain(self.g_b.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite {
                what: "factor gradient",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moment accumulators for both factors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m_a: Matrix,
    pub v_a: Matrix,
    pub m_b: Matrix,
    pub v_b: Matrix,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(m: usize, n: usize, r: usize, hyper: AdamHyper) -> Self {
        Self {
            m_a: Matrix::zeros(m, r),
            v_a: Matrix::zeros(m, r),
            m_b: Matrix::zeros(n, r),
            v_b: Matrix::zeros(n, r),
            step: 0,
            hyper,
        }
    }

    pub fn for_factors(f: &LowRankFactors, hyper: AdamHyper) -> Self {
        let (m, n, r) = f.dims();
        Self::new(m, n, r, hyper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    LoRaGd,
    RefLoRa,
    RefLoRaS,
    ScaledGd,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::LoRaGd,
        Method::RefLoRa,
        Method::RefLoRaS,
        Method::ScaledGd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LoRaGd => "lora",
            Method::RefLoRa => "reflora",
            Method::RefLoRaS => "reflora-s",
            Method::ScaledGd => "scaledgd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method '{s}' (expected lora, reflora, reflora-s or scaledgd)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Gd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn is_adaptive(self) -> bool {
        self != OptimizerKind::Gd
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(OptimizerKind::Gd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::InvalidConfig(format!(
                "unknown optimizer '{s}' (expected gd, adam or adamw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub eta: f64,
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub refactor_mode: RefactorMode,
    /// Steps during which a rank-deficient pair falls back to the plain
    /// LoRA update instead of failing.
    pub warmup_steps: usize,
    pub adam: AdamHyper,
}

impl StepConfig {
    pub fn new(eta: f64, method: Method) -> Self {
        Self {
            eta,
            method,
            optimizer: OptimizerKind::Gd,
            refactor_mode: RefactorMode::default(),
            warmup_steps: 1,
            adam: AdamHyper::default(),
        }
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerKind) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_mode(mut self, mode: RefactorMode) -> Self {
        self.refactor_mode = mode;
        self
    }

    pub fn with_warmup(mut self, warmup_steps: usize) -> Self {
        self.warmup_steps = warmup_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)?;
        self.refactor_mode.validate()?;
        self.adam.validate()
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidEta {
            eta,
            reason: "optimizers require a finite positive learning rate",
        })
    }
}

/// What a stepper did on one call.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub factors: LowRankFactors,
    /// The refactoring used, if any.
    pub refactor: Option<RefactorResult>,
    /// True when a warmup step fell back to the plain LoRA update.
    pub fell_back: bool,
}

impl StepOutcome {
    fn plain(factors: LowRankFactors, fell_back: bool) -> Self {
        Self {
            factors,
            refactor: None,
            fell_back,
        }
    }
}

/// Bias-corrected Adam on one parameter block. `t` is the 1-based step.
/// With `decoupled`, weight decay shrinks the parameter before the update
/// (AdamW); otherwise it is added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &Matrix,
    grad: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    t: u64,
    eta: f64,
    hyper: &AdamHyper,
    decoupled: bool,
) -> Matrix {
    let AdamHyper {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = *hyper;
    let t = t.max(1) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut out = if decoupled {
        param * (1.0 - eta * weight_decay)
    } else {
        param.clone()
    };
    for i in 0..param.len() {
        let g = if decoupled {
            grad[i]
        } else {
            grad[i] + weight_decay * param[i]
        };
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        out[i] -= eta * m_hat / (v_hat.sqrt() + eps);
    }
    out
}

fn adaptive_pair(
    a: &Matrix,
    b: &Matrix,
    g_a: &Matrix,
    g_b: &Matrix,
    state: &mut OptimizerState,
    eta: f64,
    kind: OptimizerKind,
) -> LowRankFactors {
    state.step += 1;
    let decoupled = kind == OptimizerKind::AdamW;
    let hyper = state.hyper;
    let new_a = adam_update(
        a,
        g_a,
        &mut state.m_a,
        &mut state.v_a,
        state.step,
        eta,
        &hyper,
        decoupled,
    );
    let new_b = adam_update(
        b,
        g_b,
        &mut state.m_b,
        &mut state.v_b,
        state.step,
        eta,
        &hyper,
        decoupled,
    );
    LowRankFactors::from_parts(new_a, new_b)
}

fn require_state(
    state: Option<&mut OptimizerState>,
    kind: OptimizerKind,
) -> Result<&mut OptimizerState> {
    state.ok_or_else(|| {
        Error::InvalidConfig(format!("optimizer {} needs moment state", kind.name()))
    })
}

/// Applies the configured optimizer to `(a, b)` with the given gradients.
fn apply(
    a: &Matrix,
    b: &Matrix,
    g_a: &Matrix,
    g_b: &Matrix,
    cfg: &StepConfig,
    state: Option<&mut OptimizerState>,
) -> Result<LowRankFactors> {
    if cfg.optimizer.is_adaptive() {
        let st = require_state(state, cfg.optimizer)?;
        Ok(adaptive_pair(a, b, g_a, g_b, st, cfg.eta, cfg.optimizer))
    } else {
        Ok(LowRankFactors::from_parts(
            a - g_a * cfg.eta,
            b - g_b * cfg.eta,
        ))
    }
}

fn check_inputs(f: &LowRankFactors, g: &GradientPair) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NonFinite {
            what: "adapter factors",
        });
    }
    g.check(f)
}

/// `A₊ = A − η·∇ℓ·B`, `B₊ = B − η·∇ℓᵀ·A`.
pub fn lora_gd_step(f: &LowRankFactors, g: &GradientPair, eta: f64) -> LowRankFactors {
    LowRankFactors::from_parts(f.a() - &g.g_a * eta, f.b() - &g.g_b * eta)
}

/// `A₊·B₊ᵀ − A·Bᵀ`.
pub fn delta_w(before: &LowRankFactors, after: &LowRankFactors) -> Result<Matrix> {
    let (m, n, _) = before.dims();
    let (m2, n2, _) = after.dims();
    if (m, n) != (m2, n2) {
        return Err(Error::DimensionMismatch {
            expected: (m, n),
            got: (m2, n2),
        });
    }
    Ok(after.product() - before.product())
}

/// `A·S·ΔBᵀ + ΔA·S⁻¹·Bᵀ + ΔA·ΔBᵀ` for plain increments `(ΔA, ΔB)`.
pub fn refactored_increment(
    f: &LowRankFactors,
    delta_a: &Matrix,
    delta_b: &Matrix,
    s: &SpdMatrix,
) -> Result<Matrix> {
    let s_inv = s.inverse()?;
    let sm = s.as_matrix();
    Ok(f.a() * sm * delta_b.transpose()
        + delta_a * s_inv.as_matrix() * f.b().transpose()
        + delta_a * delta_b.transpose())
}

fn fallback_allowed(err: &Error, cfg: &StepConfig, iteration: usize) -> bool {
    iteration < cfg.warmup_steps
        && matches!(err, Error::RankDeficient { .. } | Error::ZeroFactor { .. })
}

fn plain_step(
    f: &LowRankFactors,
    g: &GradientPair,
    cfg: &StepConfig,
    state: Option<&mut OptimizerState>,
) -> Result<LowRankFactors> {
    apply(f.a(), f.b(), &g.g_a, &g.g_b, cfg, state)
}

/// Refactored step. With plain GD this is `A − η·∇ℓ·B·S⁻¹`,
/// `B − η·∇ℓᵀ·A·S`; with Adam the same preconditioned gradients feed the
/// adaptive rule. `iteration` is the 0-based step index for warmup.
pub fn reflora_step(
    f: &LowRankFactors,
    g: &GradientPair,
    cfg: &StepConfig,
    state: Option<&mut OptimizerState>,
    iteration: usize,
) -> Result<StepOutcome> {
    cfg.validate()?;
    check_inputs(f, g)?;
    let res = match optimal_s(f, cfg.eta, cfg.refactor_mode) {
        Ok(res) => res,
        Err(e) if fallback_allowed(&e, cfg, iteration) => {
            return Ok(StepOutcome::plain(plain_step(f, g, cfg, state)?, true));
        }
        Err(e) => return Err(e),
    };
    let s = res.to_spd(f.rank())?;
    let s_inv = s.inverse()?;
    let pre_a = &g.g_a * s_inv.as_matrix();
    let pre_b = &g.g_b * s.as_matrix();
    let factors = apply(f.a(), f.b(), &pre_a, &pre_b, cfg, state)?;
    Ok(StepOutcome {
        factors,
        refactor: Some(res),
        fell_back: false,
    })
}

/// Scalar refactoring `(√s·A, B/√s)` followed by a plain or adaptive step on
/// the rescaled pair. Adam moments are moved into the rescaled coordinates:
/// `m_A/√s`, `v_A/s`, `m_B·√s`, `v_B·s`.
pub fn reflora_s_step(
    f: &LowRankFactors,
    g: &GradientPair,
    cfg: &StepConfig,
    state: Option<&mut OptimizerState>,
    iteration: usize,
) -> Result<StepOutcome> {
    cfg.validate()?;
    check_inputs(f, g)?;
    let res = match optimal_scalar(f, cfg.eta, cfg.refactor_mode.to_scalar()) {
        Ok(res) => res,
        Err(e) if fallback_allowed(&e, cfg, iteration) => {
            return Ok(StepOutcome::plain(plain_step(f, g, cfg, state)?, true));
        }
        Err(e) => return Err(e),
    };
    let s = res.s_scalar().expect("scalar refactoring");
    let rt = s.sqrt();
    let a = f.a() * rt;
    let b = f.b() / rt;
    let g_a = &g.g_a / rt;
    let g_b = &g.g_b * rt;
    let factors = if cfg.optimizer.is_adaptive() {
        let st = require_state(state, cfg.optimizer)?;
        st.m_a /= rt;
        st.v_a /= s;
        st.m_b *= rt;
        st.v_b *= s;
        adaptive_pair(&a, &b, &g_a, &g_b, st, cfg.eta, cfg.optimizer)
    } else {
        LowRankFactors::from_parts(&a - &g_a * cfg.eta, &b - &g_b * cfg.eta)
    };
    Ok(StepOutcome {
        factors,
        refactor: Some(res),
        fell_back: false,
    })
}

/// `A₊ = A − η·∇ℓ·B·(BᵀB)⁻¹`, `B₊ = B − η·∇ℓᵀ·A·(AᵀA)⁻¹`.
pub fn scaledgd_step(f: &LowRankFactors, g: &GradientPair, eta: f64) -> Result<LowRankFactors> {
    check_eta(eta)?;
    check_inputs(f, g)?;
    let (pre_a, pre_b) = scaledgd_gradients(f, g)?;
    Ok(LowRankFactors::from_parts(
        f.a() - pre_a * eta,
        f.b() - pre_b * eta,
    ))
}

fn scaledgd_gradients(f: &LowRankFactors, g: &GradientPair) -> Result<(Matrix, Matrix)> {
    let (gram_a, gram_b) = f.gram_pair()?;
    let inv_a = gram_a.inverse()?;
    let inv_b = gram_b.inverse()?;
    Ok((&g.g_a * inv_b.as_matrix(), &g.g_b * inv_a.as_matrix()))
}

fn scaledgd_configured(
    f: &LowRankFactors,
    g: &GradientPair,
    cfg: &StepConfig,
    state: Option<&mut OptimizerState>,
    iteration: usize,
) -> Result<StepOutcome> {
    cfg.validate()?;
    check_inputs(f, g)?;
    match scaledgd_gradients(f, g) {
        Ok((pre_a, pre_b)) => Ok(StepOutcome::plain(
            apply(f.a(), f.b(), &pre_a, &pre_b, cfg, state)?,
            false,
        )),
        Err(e) if fallback_allowed(&e, cfg, iteration) => {
            Ok(StepOutcome::plain(plain_step(f, g, cfg, state)?, true))
        }
        Err(e) => Err(e),
    }
}

/// Largest normalized metric inner product between `update` and the vertical
/// directions `(A·X, −B·Xᵀ)` for elementary `X = eᵢeⱼᵀ`, under the metric
/// `⟨G_A·S̃, Z_A⟩ + ⟨G_B·S̃⁻¹, Z_B⟩`. Zero for horizontal updates and for a
/// zero update.
pub fn horizontal_check(f: &LowRankFactors, update: (&Matrix, &Matrix)) -> Result<f64> {
    let (u_a, u_b) = update;
    if u_a.shape() != f.a().shape() {
        return Err(Error::DimensionMismatch {
            expected: f.a().shape(),
            got: u_a.shape(),
        });
    }
    if u_b.shape() != f.b().shape() {
        return Err(Error::DimensionMismatch {
            expected: f.b().shape(),
            got: u_b.shape(),
        });
    }
    let s = geometric_mean_s(f)?;
    let s_inv = s.inverse()?;
    let norm_sq = s.trace_product(&u_a.tr_mul(u_a)) + s_inv.trace_product(&u_b.tr_mul(u_b));
    if norm_sq <= 0.0 {
        return Ok(0.0);
    }
    // g((A·X, −B·Xᵀ), u) = ⟨X, Aᵀ·u_A·S̃ − S̃⁻¹·u_Bᵀ·B⟩
    let coeff = f.a().tr_mul(u_a) * s.as_matrix() - s_inv.as_matrix() * u_b.tr_mul(f.b());
    Ok(coeff.amax() / norm_sq.sqrt())
}

/// A configured stepper carrying its moment state and step counter.
#[derive(Debug, Clone)]
pub struct Stepper {
    config: StepConfig,
    state: Option<OptimizerState>,
    iteration: usize,
}

impl Stepper {
    pub fn new(config: StepConfig, f: &LowRankFactors) -> Result<Self> {
        config.validate()?;
        let state = config
            .optimizer
            .is_adaptive()
            .then(|| OptimizerState::for_factors(f, config.adam));
        Ok(Self {
            config,
            state,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &StepConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&OptimizerState> {
        self.state.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self, f: &LowRankFactors, g: &GradientPair) -> Result<StepOutcome> {
        let cfg = self.config;
        let state = self.state.as_mut();
        let out = match cfg.method {
            Method::LoRaGd => {
                cfg.validate()?;
                check_inputs(f, g)?;
                StepOutcome::plain(plain_step(f, g, &cfg, state)?, false)
            }
            Method::RefLoRa => reflora_step(f, g, &cfg, state, self.iteration)?,
            Method::RefLoRaS => reflora_s_step(f, g, &cfg, state, self.iteration)?,
            Method::ScaledGd => scaledgd_configured(f, g, &cfg, state, self.iteration)?,
        };
        self.iteration += 1;
        Ok(out)
    }
}
