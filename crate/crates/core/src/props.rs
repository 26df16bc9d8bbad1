//! Randomized property checks with measured residuals.
//!
//! Each check draws fresh instances from the given generator and reports
//! the worst residual against its tolerance. `props-report` runs all of
//! them; the acceptance suite calls them with larger sample counts.

use std::io::Write;

use rand::Rng;

use crate::error::Result;
use crate::linalg::{relative_error, spectral_norm, sqrtm_denman_beavers, Matrix, SpdMatrix};
use crate::optim::{
    adam_update, delta_w, horizontal_check, lora_gd_step, reflora_s_step, reflora_step, AdamHyper,
    GradientPair, Method, OptimizerKind, OptimizerState, StepConfig,
};
use crate::problems::{finite_difference_grad_pair, make_linreg, make_mf, Problem};
use crate::refactor::{
    c_tilde, g_objective, geometric_mean_from_grams, optimal_s, optimal_scalar, Branch,
    LowRankFactors, RefactorMode, RootChoice,
};
use crate::rng::{gaussian_matrix, random_invertible, random_orthogonal, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl PropertyResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            trials: 0,
            max_residual: 0.0,
            tolerance,
        }
    }

    fn observe(&mut self, residual: f64) {
        if !self.max_residual.is_nan() {
            self.max_residual = if residual.is_nan() {
                f64::NAN
            } else {
                self.max_residual.max(residual)
            };
        }
    }

    pub fn passed(&self) -> bool {
        self.max_residual <= self.tolerance
    }
}

/// Shape limits for random factor pairs. `m` and `n` are drawn from
/// `[min_ratio·r, max_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Shapes {
    pub max_dim: usize,
    pub max_rank: usize,
    pub min_ratio: usize,
}

impl Default for Shapes {
    fn default() -> Self {
        Self {
            max_dim: 64,
            max_rank: 16,
            min_ratio: 2,
        }
    }
}

impl Shapes {
    pub fn sample(&self, rng: &mut SeededRng) -> (usize, usize, usize) {
        let r = rng.random_range(1..=self.max_rank);
        let lo = (self.min_ratio * r).max(r).min(self.max_dim);
        let m = rng.random_range(lo..=self.max_dim);
        let n = rng.random_range(lo..=self.max_dim);
        (m, n, r)
    }
}

fn random_pair(rng: &mut SeededRng, (m, n, r): (usize, usize, usize)) -> LowRankFactors {
    let sa = (rng.random::<f64>() * 4.0 - 2.0).exp();
    let sb = (rng.random::<f64>() * 4.0 - 2.0).exp();
    LowRankFactors::new(
        gaussian_matrix(rng, m, r, sa),
        gaussian_matrix(rng, n, r, sb),
    )
    .expect("valid shapes")
}

/// Balanced refactoring via `X^{-1/2}(X^{1/2} Y X^{1/2})^{1/2} X^{-1/2}`. With
/// `fault` the outer factors use `X^{+1/2}`, which breaks stationarity.
fn balanced_s(f: &LowRankFactors, fault: bool) -> Result<SpdMatrix> {
    let (x, y) = f.gram_pair()?;
    if !fault {
        return geometric_mean_from_grams(&x, &y);
    }
    let xh = x.sqrt();
    let inner = SpdMatrix::from_symmetrized(&(xh.as_matrix() * y.as_matrix() * xh.as_matrix()))?;
    SpdMatrix::from_symmetrized(&(xh.as_matrix() * inner.sqrt().as_matrix() * xh.as_matrix()))
}

/// Balance, closed-form agreement, stationarity, `g(S̃) = C̃` and strict
/// minimality under `perturbations` random SPD perturbations, all on one
/// sample set.
pub fn check_geometric_mean(
    rng: &mut SeededRng,
    trials: usize,
    perturbations: usize,
    shapes: Shapes,
    fault: bool,
) -> Result<Vec<PropertyResult>> {
    let mut balance = PropertyResult::new("balanced Gram matrices", 1e-8);
    let mut closed_forms = PropertyResult::new("closed forms of S agree", 1e-9);
    let mut stationarity = PropertyResult::new("stationarity S X S = Y", 1e-8);
    let mut attains = PropertyResult::new("g(S) equals 2 nuclear norm", 1e-8);
    let mut minimal = PropertyResult::new("perturbations increase g", 0.0);
    for _ in 0..trials {
        let shape = shapes.sample(rng);
        let f = random_pair(rng, shape);
        let r = f.rank();
        let s = balanced_s(&f, fault)?;

        let t = f.refactored_by(&s)?;
        balance.observe(relative_error(&t.gram_b(), &t.gram_a()));

        let x = f.gram_a();
        let x_inv = x.clone().try_inverse().expect("full rank");
        let alt = &x_inv * sqrtm_denman_beavers(&(&x * f.gram_b()))?;
        closed_forms.observe(relative_error(&alt, s.as_matrix()));

        let lhs = s.as_matrix() * &x * s.as_matrix();
        stationarity.observe(relative_error(&lhs, &f.gram_b()));

        let g_min = g_objective(&f, &s)?;
        let c = c_tilde(&f);
        attains.observe(((g_min - c) / c).abs());

        let half = s.sqrt().into_matrix();
        let mut violations = 0.0;
        for _ in 0..perturbations {
            let eps = (rng.random::<f64>() * 1000f64.ln()).exp() * 1e-3;
            let e = Matrix::identity(r, r) + gaussian_matrix(rng, r, r, eps);
            let p = &half * e;
            let s2 = SpdMatrix::from_symmetrized(&(&p * p.transpose()))?;
            if g_objective(&f, &s2)? <= g_min {
                violations += 1.0;
            }
        }
        minimal.observe(violations);
        for p in [
            &mut balance,
            &mut closed_forms,
            &mut stationarity,
            &mut attains,
            &mut minimal,
        ] {
            p.trials += 1;
        }
    }
    Ok(vec![balance, closed_forms, stationarity, attains, minimal])
}

/// Both small-η roots hit `g(γS̃) = 1/(Lη)`, and the boundary `η = 1/(C̃L)`
/// returns `S̃` itself.
pub fn check_theorem_exact(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
) -> Result<Vec<PropertyResult>> {
    let mut roots = PropertyResult::new("small-eta roots hit 1/(L eta)", 1e-8);
    let mut boundary = PropertyResult::new("boundary eta returns balanced S", 1e-10);
    for _ in 0..trials {
        let shape = shapes.sample(rng);
        let f = random_pair(rng, shape);
        let l = (rng.random::<f64>() * 6.0 - 3.0).exp();
        let c = c_tilde(&f);
        let eta = (0.02 + 0.96 * rng.random::<f64>()) / (c * l);
        for root in [RootChoice::Plus, RootChoice::Minus] {
            let res = optimal_s(&f, eta, RefactorMode::TheoremExact { lipschitz: l, root })?;
            let target = 1.0 / (l * eta);
            let g = g_objective(&f, res.s_matrix().expect("matrix mode"))?;
            roots.observe(((g - target) / target).abs());
        }
        let at = optimal_s(
            &f,
            1.0 / (c * l),
            RefactorMode::TheoremExact {
                lipschitz: l,
                root: RootChoice::Plus,
            },
        )?;
        let balanced = optimal_s(&f, 1.0, RefactorMode::BalancedAlways)?;
        let ratio = relative_error(
            at.s_matrix().expect("matrix mode").as_matrix(),
            balanced.s_matrix().expect("matrix mode").as_matrix(),
        );
        boundary.observe(if at.branch == Branch::Balanced {
            ratio
        } else {
            f64::INFINITY
        });
        roots.trials += 1;
        boundary.trials += 1;
    }
    Ok(vec![roots, boundary])
}

/// Small-η scalar roots zero `h(s) = (‖A‖²s + ‖B‖²/s − 1/(Lη))²`; large η
/// returns `‖B‖/‖A‖` bit for bit.
pub fn check_scalar(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
) -> Result<Vec<PropertyResult>> {
    let mut small = PropertyResult::new("scalar roots zero h(s)", 1e-14);
    let mut large = PropertyResult::new("scalar large-eta ratio exact", 0.0);
    for _ in 0..trials {
        let shape = shapes.sample(rng);
        let f = random_pair(rng, shape);
        let (na, nb) = (f.norm_a(), f.norm_b());
        let l = (rng.random::<f64>() * 4.0 - 2.0).exp();
        let threshold = 1.0 / (2.0 * na * nb * l);
        for root in [RootChoice::Plus, RootChoice::Minus] {
            let mode = RefactorMode::ScalarTheoremExact { lipschitz: l, root };
            let eta = threshold * (0.02 + 0.96 * rng.random::<f64>());
            let s = optimal_scalar(&f, eta, mode)?
                .s_scalar()
                .expect("scalar mode");
            let h = na * na * s + nb * nb / s - 1.0 / (l * eta);
            small.observe(h * h);
            let eta = threshold * (1.0 + 10.0 * rng.random::<f64>());
            let s = optimal_scalar(&f, eta, mode)?
                .s_scalar()
                .expect("scalar mode");
            large.observe((s - nb / na).abs());
        }
        small.trials += 1;
        large.trials += 1;
    }
    Ok(vec![small, large])
}

struct StepInstance {
    f: LowRankFactors,
    grad: Matrix,
}

fn step_instance(rng: &mut SeededRng, shapes: Shapes) -> StepInstance {
    let shape = shapes.sample(rng);
    let f = random_pair(rng, shape);
    let (m, n, _) = f.dims();
    let grad = gaussian_matrix(rng, m, n, 1.0);
    StepInstance { f, grad }
}

fn small_eta(rng: &mut SeededRng, f: &LowRankFactors) -> f64 {
    let scale = f.gram_a().norm().max(f.gram_b().norm());
    (0.01 + 0.09 * rng.random::<f64>()) / scale
}

fn reflora_increment(f: &LowRankFactors, grad: &Matrix, cfg: &StepConfig) -> Result<Matrix> {
    let out = reflora_step(f, &GradientPair::from_dense(grad, f), cfg, None, usize::MAX)?;
    delta_w(f, &out.factors)
}

/// One refactored step from `(A, B)` and from `(A·P, B·P⁻ᵀ)` gives the same
/// weight increment for invertible `P` with condition number up to `max_cond`.
pub fn check_refactor_invariance(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
    max_cond: f64,
) -> Result<PropertyResult> {
    let mut res = PropertyResult::new("increment invariant to refactoring", 1e-7);
    for _ in 0..trials {
        let inst = step_instance(rng, shapes);
        let cfg = StepConfig::new(small_eta(rng, &inst.f), Method::RefLoRa);
        let p = random_invertible(rng, inst.f.rank(), max_cond);
        let f2 = inst.f.refactored(&p)?;
        let d1 = reflora_increment(&inst.f, &inst.grad, &cfg)?;
        let d2 = reflora_increment(&f2, &inst.grad, &cfg)?;
        res.observe(relative_error(&d2, &d1));
        res.trials += 1;
    }
    Ok(res)
}

/// Plain LoRA increments are unchanged by orthogonal `P`.
pub fn check_orthogonal_invariance(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
) -> Result<PropertyResult> {
    let mut res = PropertyResult::new("LoRA increment invariant to orthogonal P", 1e-9);
    for _ in 0..trials {
        let inst = step_instance(rng, shapes);
        let eta = small_eta(rng, &inst.f);
        let q = random_orthogonal(rng, inst.f.rank());
        let f2 = inst.f.refactored(&q)?;
        let d1 = delta_w(
            &inst.f,
            &lora_gd_step(&inst.f, &GradientPair::from_dense(&inst.grad, &inst.f), eta),
        )?;
        let d2 = delta_w(
            &f2,
            &lora_gd_step(&f2, &GradientPair::from_dense(&inst.grad, &f2), eta),
        )?;
        res.observe(relative_error(&d2, &d1));
        res.trials += 1;
    }
    Ok(res)
}

/// The preconditioned step equals refactor, plain step, refactor back; the
/// scalar Adam path equals Adam on the explicitly rescaled pair.
pub fn check_dual_paths(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
) -> Result<Vec<PropertyResult>> {
    let mut pre = PropertyResult::new("preconditioned step equals refactor-back", 1e-10);
    let mut adam = PropertyResult::new("scalar Adam moment scaling", 1e-10);
    for _ in 0..trials {
        let inst = step_instance(rng, shapes);
        let f = &inst.f;
        let eta = small_eta(rng, f);
        let cfg = StepConfig::new(eta, Method::RefLoRa);
        let fast = reflora_step(
            f,
            &GradientPair::from_dense(&inst.grad, f),
            &cfg,
            None,
            usize::MAX,
        )?
        .factors;
        let s = optimal_s(f, eta, RefactorMode::BalancedAlways)?.to_spd(f.rank())?;
        let p = s.sqrt().into_matrix();
        let p_inv = s.inv_sqrt()?.into_matrix();
        let tilde = f.refactored_by(&s)?;
        let stepped = lora_gd_step(&tilde, &GradientPair::from_dense(&inst.grad, &tilde), eta);
        let back = LowRankFactors::from_parts(stepped.a() * &p_inv, stepped.b() * &p);
        pre.observe(relative_error(fast.a(), back.a()).max(relative_error(fast.b(), back.b())));

        let (m, n, r) = f.dims();
        let cfg = StepConfig::new(eta, Method::RefLoRaS).with_optimizer(OptimizerKind::Adam);
        let mut state = OptimizerState::new(m, n, r, AdamHyper::default());
        state.m_a = gaussian_matrix(rng, m, r, 0.1);
        state.m_b = gaussian_matrix(rng, n, r, 0.1);
        state.v_a = gaussian_matrix(rng, m, r, 0.1).map(|x| x * x);
        state.v_b = gaussian_matrix(rng, n, r, 0.1).map(|x| x * x);
        state.step = rng.random_range(0..20);
        let mut reference = state.clone();
        let out = reflora_s_step(
            f,
            &GradientPair::from_dense(&inst.grad, f),
            &cfg,
            Some(&mut state),
            usize::MAX,
        )?;

        let sc = f.norm_b() / f.norm_a();
        let rt = sc.sqrt();
        let tilde = LowRankFactors::from_parts(f.a() * rt, f.b() / rt);
        let g = GradientPair::from_dense(&inst.grad, &tilde);
        reference.m_a /= rt;
        reference.v_a /= sc;
        reference.m_b *= rt;
        reference.v_b *= sc;
        reference.step += 1;
        let h = reference.hyper;
        let t = reference.step;
        let a = adam_update(
            tilde.a(),
            &g.g_a,
            &mut reference.m_a,
            &mut reference.v_a,
            t,
            eta,
            &h,
            false,
        );
        let b = adam_update(
            tilde.b(),
            &g.g_b,
            &mut reference.m_b,
            &mut reference.v_b,
            t,
            eta,
            &h,
            false,
        );
        adam.observe(relative_error(out.factors.a(), &a).max(relative_error(out.factors.b(), &b)));
        pre.trials += 1;
        adam.trials += 1;
    }
    Ok(vec![pre, adam])
}

/// The refactored update has no component along vertical directions.
pub fn check_horizontal(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
) -> Result<PropertyResult> {
    let mut res = PropertyResult::new("update is horizontal", 1e-8);
    for _ in 0..trials {
        let inst = step_instance(rng, shapes);
        let f = &inst.f;
        let cfg = StepConfig::new(small_eta(rng, f), Method::RefLoRa);
        let out = reflora_step(
            f,
            &GradientPair::from_dense(&inst.grad, f),
            &cfg,
            None,
            usize::MAX,
        )?;
        let ua = out.factors.a() - f.a();
        let ub = out.factors.b() - f.b();
        res.observe(horizontal_check(f, (&ua, &ub))?);
        res.trials += 1;
    }
    Ok(res)
}

/// `0 ≥ ⟨∇_Ã ℓ, ΔÃ⟩ + ⟨∇_B̃ ℓ, ΔB̃⟩ ≥ −η‖∇ℓ‖₂² g(S)` for `S ∈ {I, S̃}`, and the
/// first-order term equals `−η(‖∇ℓ·B·S^{-1/2}‖² + ‖∇ℓᵀ·A·S^{1/2}‖²)`. Every
/// fifth instance uses a zero gradient, where both bounds are zero.
pub fn check_descent_sandwich(
    rng: &mut SeededRng,
    trials: usize,
    shapes: Shapes,
) -> Result<Vec<PropertyResult>> {
    let mut sandwich = PropertyResult::new("first-order term sandwich", 1e-12);
    let mut closed = PropertyResult::new("first-order term closed form", 1e-12);
    for i in 0..trials {
        let mut inst = step_instance(rng, shapes);
        if i % 5 == 4 {
            inst.grad.fill(0.0);
        }
        let f = &inst.f;
        let eta = small_eta(rng, f);
        let g_spec = spectral_norm(&inst.grad);
        for s in [
            SpdMatrix::identity(f.rank()),
            optimal_s(f, eta, RefactorMode::BalancedAlways)?.to_spd(f.rank())?,
        ] {
            let t = f.refactored_by(&s)?;
            let gt = GradientPair::from_dense(&inst.grad, &t);
            let stepped = lora_gd_step(&t, &gt, eta);
            let da = stepped.a() - t.a();
            let db = stepped.b() - t.b();
            let first = gt.g_a.dot(&da) + gt.g_b.dot(&db);
            let lower = -eta * g_spec * g_spec * g_objective(f, &s)?;
            let scale = lower.abs().max(f64::MIN_POSITIVE);
            sandwich.observe((first.max(0.0) + (lower - first).max(0.0)) / scale.max(1.0));
            let g = GradientPair::from_dense(&inst.grad, f);
            let formula = -eta
                * ((&g.g_a * s.inv_sqrt()?.as_matrix()).norm_squared()
                    + (&g.g_b * s.sqrt().as_matrix()).norm_squared());
            closed.observe((first - formula).abs() / scale.max(1.0));
        }
        sandwich.trials += 1;
        closed.trials += 1;
    }
    Ok(vec![sandwich, closed])
}

/// Factor gradients of both problems against central differences with `h = 1e-6`.
pub fn check_gradients(rng: &mut SeededRng, trials: usize) -> Result<Vec<PropertyResult>> {
    let mut mf = PropertyResult::new("factorization gradient vs differences", 1e-5);
    let mut lr = PropertyResult::new("regression gradient vs differences", 1e-5);
    for _ in 0..trials {
        let seed = rng.random();
        let r = rng.random_range(1..=3);
        let (m, n) = (rng.random_range(r..=10), rng.random_range(r..=10));
        let k = rng.random_range(1..=10);
        let p_mf = make_mf(m, n, r, seed)?;
        let p_lr = make_linreg(m, n, k, seed)?;
        for (p, res) in [(&p_mf as &dyn Problem, &mut mf), (&p_lr, &mut lr)] {
            let f = random_pair(rng, (m, n, r));
            let g = p.grad_pair(&f);
            let fd = finite_difference_grad_pair(p, &f, 1e-6);
            let num =
                ((&fd.g_a - &g.g_a).norm_squared() + (&fd.g_b - &g.g_b).norm_squared()).sqrt();
            let den = (g.g_a.norm_squared() + g.g_b.norm_squared())
                .sqrt()
                .max(f64::MIN_POSITIVE);
            res.observe(num / den);
            res.trials += 1;
        }
    }
    Ok(vec![mf, lr])
}

/// `ℓ(W + Δ) ≤ ℓ(W) + ⟨∇ℓ(W), Δ⟩ + (L/2)‖Δ‖²` on random probes of both problems.
pub fn check_quadratic_bound(rng: &mut SeededRng, trials: usize) -> Result<PropertyResult> {
    let mut res = PropertyResult::new("quadratic upper bound holds", 1e-12);
    for _ in 0..trials {
        let seed = rng.random();
        let (m, n, k) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let p_mf = make_mf(m, n, 1, seed)?;
        let p_lr = make_linreg(m, n, k, seed)?;
        for p in [&p_mf as &dyn Problem, &p_lr] {
            let w = gaussian_matrix(rng, m, n, 1.0);
            let sd = (rng.random::<f64>() * 6.0 - 3.0).exp();
            let d = gaussian_matrix(rng, m, n, sd);
            let l = p.lipschitz().expect("exact constant");
            let lhs = p.loss(&(&w + &d));
            let rhs = p.loss(&w) + p.grad(&w).dot(&d) + 0.5 * l * d.norm_squared();
            res.observe((lhs - rhs).max(0.0) / rhs.abs().max(1.0));
        }
        res.trials += 1;
    }
    Ok(res)
}

/// Runs every check with `trials` samples each and returns all results.
pub fn run_all(rng: &mut SeededRng, trials: usize, fault: bool) -> Result<Vec<PropertyResult>> {
    let shapes = Shapes::default();
    let perturbations = 20;
    let mut out = check_geometric_mean(rng, trials, perturbations, shapes, fault)?;
    out.extend(check_theorem_exact(rng, trials, shapes)?);
    out.extend(check_scalar(rng, trials, shapes)?);
    out.push(check_refactor_invariance(rng, trials, shapes, 1e4)?);
    out.push(check_orthogonal_invariance(rng, trials, shapes)?);
    out.extend(check_dual_paths(rng, trials, shapes)?);
    out.push(check_horizontal(rng, trials, shapes)?);
    out.extend(check_descent_sandwich(rng, trials, shapes)?);
    out.extend(check_gradients(rng, trials.min(10))?);
    out.push(check_quadratic_bound(rng, trials)?);
    Ok(out)
}

pub fn write_report<W: Write>(results: &[PropertyResult], out: &mut W) -> Result<()> {
    let width = results
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(8)
        .max(8);
    writeln!(
        out,
        "{:<width$}  {:>6}  {:>12}  {:>9}  result",
        "property", "trials", "max residual", "tolerance"
    )?;
    for r in results {
        writeln!(
            out,
            "{:<width$}  {:>6}  {:>12.3e}  {:>9.1e}  {}",
            r.name,
            r.trials,
            r.max_residual,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn all_properties_pass_on_a_small_run() {
        let mut rng = stream_rng(1, Stream::Probe);
        let results = run_all(&mut rng, 3, false).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.trials > 0);
        }
    }

    #[test]
    fn injected_fault_breaks_stationarity() {
        let mut rng = stream_rng(1, Stream::Probe);
        let results = check_geometric_mean(&mut rng, 5, 2, Shapes::default(), true).unwrap();
        let stat = results
            .iter()
            .find(|r| r.name.starts_with("stationarity"))
            .unwrap();
        assert!(!stat.passed());
    }

    #[test]
    fn report_marks_failures() {
        let mut r = PropertyResult::new("x", 1.0);
        r.observe(2.0);
        let mut buf = Vec::new();
        write_report(&[r], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("FAIL"));
        let mut nan = PropertyResult::new("y", 1.0);
        nan.observe(f64::NAN);
        nan.observe(0.5);
        assert!(!nan.passed());
    }
}
