//! Seeded experiment runner: per-iteration traces, side-by-side comparisons,
//! a one-step loss/bound scan over learning rates, and step timings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Matrix, SpdMatrix};
use crate::optim::{
    refactored_increment, GradientPair, Method, OptimizerKind, StepConfig, Stepper,
};
use crate::problems::{make_linreg, make_mf, Instance, Problem};
use crate::refactor::{
    geometric_mean_s, optimal_s, optimal_scalar, upper_bound_eval, LowRankFactors, RefactorMode,
    RootChoice,
};
use crate::rng::{gaussian_matrix, stream_rng, Stream};

/// Loss growth over the initial loss that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

pub const TRACE_HEADER: &str =
    "step,loss,norm_a,norm_b,grad_norm_a,grad_norm_b,balance_gap,step_time_ns";
pub const BOUND_SCAN_HEADER: &str = "eta,mode,true_loss,upper_bound";
pub const OVERHEAD_HEADER: &str = "m,n,r,method,median_step_ns,median_refactor_ns,ratio";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemSpec {
    Mf {
        m: usize,
        n: usize,
        r: usize,
        seed: u64,
    },
    LinReg {
        m: usize,
        n: usize,
        k: usize,
        seed: u64,
    },
}

impl ProblemSpec {
    pub fn seed(&self) -> u64 {
        match *self {
            ProblemSpec::Mf { seed, .. } | ProblemSpec::LinReg { seed, .. } => seed,
        }
    }

    pub fn build(&self) -> Result<Instance> {
        Ok(match *self {
            ProblemSpec::Mf { m, n, r, seed } => Instance::Mf(make_mf(m, n, r, seed)?),
            ProblemSpec::LinReg { m, n, k, seed } => Instance::LinReg(make_linreg(m, n, k, seed)?),
        })
    }

    fn same_instance(&self, other: &ProblemSpec) -> bool {
        self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BInit {
    Zero,
    Gaussian(f64),
}

/// Initial factors: `A ~ N(0, σ_A²)`, and `B` either zero or `N(0, σ_B²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub sigma_a: f64,
    pub b: BInit,
}

impl InitSpec {
    /// `A ~ N(0, 1)`, `B = 0`.
    pub fn lora() -> Self {
        Self {
            sigma_a: 1.0,
            b: BInit::Zero,
        }
    }

    /// `A ~ N(0, 10)`, `B ~ N(0, 1/10)` (variances).
    pub fn linreg_default() -> Self {
        Self {
            sigma_a: 10f64.sqrt(),
            b: BInit::Gaussian(0.1f64.sqrt()),
        }
    }

    pub fn sample(&self, seed: u64, m: usize, n: usize, r: usize) -> Result<LowRankFactors> {
        if !(self.sigma_a >= 0.0) || !self.sigma_a.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma_a must be non-negative, got {}",
                self.sigma_a
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let a = gaussian_matrix(&mut rng, m, r, self.sigma_a);
        let b = match self.b {
            BInit::Zero => Matrix::zeros(n, r),
            BInit::Gaussian(s) if s >= 0.0 && s.is_finite() => gaussian_matrix(&mut rng, n, r, s),
            BInit::Gaussian(s) => {
                return Err(Error::InvalidConfig(format!(
                    "sigma_b must be non-negative, got {s}"
                )));
            }
        };
        LowRankFactors::new(a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub problem: ProblemSpec,
    /// Adapter rank.
    pub rank: usize,
    /// Adapter scaling `α`; the increment is `(α/r)·A·Bᵀ`. `None` means `α = r`.
    pub alpha: Option<f64>,
    pub step: StepConfig,
    pub iterations: usize,
    pub log_every: usize,
    pub init: InitSpec,
    pub record_timing: bool,
}

impl RunSpec {
    pub fn new(problem: ProblemSpec, rank: usize, step: StepConfig, iterations: usize) -> Self {
        Self {
            problem,
            rank,
            alpha: None,
            step,
            iterations,
            log_every: 1,
            init: InitSpec::lora(),
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be at least 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "alpha must be positive, got {a}"
                )));
            }
        }
        self.step.validate()
    }

    /// Column label used in comparison tables.
    pub fn label(&self) -> String {
        let mut s = format!("{}-eta{}", self.step.method, self.step.eta);
        if self.step.optimizer != OptimizerKind::Gd {
            s.push('-');
            s.push_str(self.step.optimizer.name());
        }
        s
    }

    fn scale(&self) -> f64 {
        self.alpha.map_or(1.0, |a| a / self.rank as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub norm_a: f64,
    pub norm_b: f64,
    pub grad_norm_a: f64,
    pub grad_norm_b: f64,
    pub balance_gap: f64,
    pub step_time_ns: u64,
}

impl TraceRecord {
    fn csv_fields(&self) -> [String; 7] {
        [
            format!("{:.16e}", self.loss),
            format!("{:.16e}", self.norm_a),
            format!("{:.16e}", self.norm_b),
            format!("{:.16e}", self.grad_norm_a),
            format!("{:.16e}", self.grad_norm_b),
            format!("{:.16e}", self.balance_gap),
            self.step_time_ns.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub label: String,
    pub records: Vec<TraceRecord>,
    pub initial_loss: f64,
    /// First step whose loss exceeded the divergence threshold or was not finite.
    pub diverged_at: Option<usize>,
}

impl Trace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{},{}", r.step, r.csv_fields().join(","))?;
        }
        Ok(())
    }
}

/// `‖ÃᵀÃ − B̃ᵀB̃‖_F / ‖ÃᵀÃ‖_F` for the pair the method actually steps on:
/// the balanced refactoring for RefLoRA, the scalar rescaling for RefLoRA-S
/// and the raw factors otherwise. `0/0` counts as 0.
fn balance_gap(f: &LowRankFactors, method: Method, eta: f64) -> f64 {
    if !f.is_finite() {
        return f64::NAN;
    }
    let pair = match method {
        Method::RefLoRa => geometric_mean_s(f).and_then(|s| f.refactored_by(&s)).ok(),
        Method::RefLoRaS => optimal_scalar(f, eta, RefactorMode::Scalar)
            .ok()
            .and_then(|res| res.s_scalar())
            .map(|s| LowRankFactors::from_parts(f.a() * s.sqrt(), f.b() / s.sqrt())),
        _ => None,
    };
    let pair = pair.as_ref().unwrap_or(f);
    let ga = pair.gram_a();
    let diff = (&ga - pair.gram_b()).norm();
    let denom = ga.norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn record(
    step: usize,
    loss: f64,
    f: &LowRankFactors,
    g: &GradientPair,
    method: Method,
    eta: f64,
    ns: u64,
) -> TraceRecord {
    TraceRecord {
        step,
        loss,
        norm_a: f.norm_a(),
        norm_b: f.norm_b(),
        grad_norm_a: g.g_a.norm(),
        grad_norm_b: g.g_b.norm(),
        balance_gap: balance_gap(f, method, eta),
        step_time_ns: ns,
    }
}

fn nan_record(step: usize) -> TraceRecord {
    TraceRecord {
        step,
        loss: f64::NAN,
        norm_a: f64::NAN,
        norm_b: f64::NAN,
        grad_norm_a: f64::NAN,
        grad_norm_b: f64::NAN,
        balance_gap: f64::NAN,
        step_time_ns: 0,
    }
}

fn scaled_instance(spec: &RunSpec, inst: &Instance) -> Result<Instance> {
    let scale = spec.scale();
    Ok(match inst {
        Instance::Mf(p) => Instance::Mf(p.clone().with_scale(scale)?),
        Instance::LinReg(p) => Instance::LinReg(p.clone().with_scale(scale)?),
    })
}

/// Runs one experiment. Divergence is recorded in the trace, not returned
/// as an error; a stepper failure before divergence is an error.
pub fn run(spec: &RunSpec) -> Result<Trace> {
    spec.validate()?;
    let inst = spec.problem.build()?;
    run_on(spec, &inst)
}

/// Same as [`run`] on an already built instance.
pub fn run_on(spec: &RunSpec, base: &Instance) -> Result<Trace> {
    spec.validate()?;
    let inst = scaled_instance(spec, base)?;
    let p = inst.as_problem();
    let (m, n) = p.dims();
    let method = spec.step.method;
    let eta = spec.step.eta;
    let mut f = spec.init.sample(spec.problem.seed(), m, n, spec.rank)?;
    let mut stepper = Stepper::new(spec.step, &f)?;

    let initial_loss = p.loss_at(&f);
    let threshold = DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE);
    let mut g = p.grad_pair(&f);
    let mut records = vec![record(0, initial_loss, &f, &g, method, eta, 0)];
    let mut diverged_at = None;
    let mut live = true;

    for t in 1..=spec.iterations {
        let mut ns = 0;
        let mut loss = f64::NAN;
        if live {
            let start = Instant::now();
            let out = stepper.step(&f, &g);
            let elapsed = start.elapsed().as_nanos() as u64;
            match out {
                Ok(o) => {
                    f = o.factors;
                    ns = if spec.record_timing { elapsed } else { 0 };
                    loss = p.loss_at(&f);
                    if !(loss <= threshold) && diverged_at.is_none() {
                        diverged_at = Some(t);
                    }
                    if f.is_finite() && loss.is_finite() {
                        g = p.grad_pair(&f);
                    } else {
                        live = false;
                    }
                }
                Err(e) if diverged_at.is_some() => {
                    let _ = e;
                    live = false;
                }
                Err(e) => {
                    return Err(Error::Numerical {
                        step: t,
                        source: Box::new(e),
                    })
                }
            }
        }
        if t % spec.log_every == 0 || t == spec.iterations {
            if live || loss.is_finite() {
                records.push(record(t, loss, &f, &g, method, eta, ns));
            } else {
                records.push(nan_record(t));
            }
        }
    }
    Ok(Trace {
        label: spec.label(),
        records,
        initial_loss,
        diverged_at,
    })
}

/// Runs every spec on one shared problem instance, at most `threads` at a
/// time. Labels are made unique by suffixing `#2`, `#3`, ...
pub fn compare(specs: &[RunSpec], threads: usize) -> Result<Vec<Trace>> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidConfig("compare needs at least one run".into()))?;
    for s in specs {
        if s.problem.seed() != first.problem.seed() {
            return Err(Error::InvalidConfig(format!(
                "all runs must share the problem seed ({} vs {})",
                first.problem.seed(),
                s.problem.seed()
            )));
        }
        if !s.problem.same_instance(&first.problem) {
            return Err(Error::InvalidConfig(
                "all runs must use the same problem instance".into(),
            ));
        }
        s.validate()?;
    }
    let inst = first.problem.build()?;
    let slots: Vec<Mutex<Option<Result<Trace>>>> = specs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, specs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                let res = run_on(&specs[i], &inst);
                *slots[i].lock().expect("slot lock") = Some(res);
            });
        }
    });
    let mut traces = Vec::with_capacity(specs.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for slot in slots {
        let mut trace = slot
            .into_inner()
            .expect("slot lock")
            .expect("every run finished")?;
        let count = seen.entry(trace.label.clone()).or_insert(0);
        *count += 1;
        if *count > 1 {
            trace.label = format!("{}#{}", trace.label, count);
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// Wide table joined on the step index; one block of seven columns per run.
/// Steps missing from a run are left empty.
pub fn write_compare_csv<W: Write>(traces: &[Trace], out: &mut W) -> Result<()> {
    let fields = [
        "loss",
        "norm_a",
        "norm_b",
        "grad_norm_a",
        "grad_norm_b",
        "balance_gap",
        "step_time_ns",
    ];
    let mut header = vec!["step".to_string()];
    for t in traces {
        for fld in fields {
            header.push(format!("{}:{fld}", t.label));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    let steps: BTreeSet<usize> = traces
        .iter()
        .flat_map(|t| t.records.iter().map(|r| r.step))
        .collect();
    let maps: Vec<BTreeMap<usize, &TraceRecord>> = traces
        .iter()
        .map(|t| t.records.iter().map(|r| (r.step, r)).collect())
        .collect();
    for step in steps {
        let mut row = vec![step.to_string()];
        for map in &maps {
            match map.get(&step) {
                Some(r) => row.extend(r.csv_fields()),
                None => row.extend(std::iter::repeat_n(String::new(), fields.len())),
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Identity,
    TheoremExact,
}

impl ScanMode {
    pub fn name(self) -> &'static str {
        match self {
            ScanMode::Identity => "identity",
            ScanMode::TheoremExact => "theorem-exact",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundScanSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub rank: usize,
    pub seed: u64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub points: usize,
    pub modes: Vec<ScanMode>,
    pub root: RootChoice,
    pub init: InitSpec,
}

impl BoundScanSpec {
    /// Two-dimensional rank-one linear regression over `η ∈ [−0.5, 0.5]`.
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            m: 2,
            n: 2,
            k: 2,
            rank: 1,
            seed,
            eta_min: -0.5,
            eta_max: 0.5,
            points: 201,
            modes: vec![ScanMode::Identity, ScanMode::TheoremExact],
            root: RootChoice::Plus,
            init: InitSpec::linreg_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub eta: f64,
    pub mode: ScanMode,
    /// `ℓ(W + ΔW̃)` after one refactored step.
    pub true_loss: f64,
    /// Truncated bound plus the `S`-independent constant.
    pub upper_bound: f64,
    /// The exact third-order term left out of `upper_bound`.
    pub remainder: f64,
}

/// Evenly spaced grid over `[min, max]`. A point landing exactly on zero is
/// moved to `step·1e-3`, keeping the point count.
pub fn eta_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid needs at least 2 points, got {points}"
        )));
    }
    if !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "grid needs finite min < max, got [{min}, {max}]"
        )));
    }
    let step = (max - min) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            let eta = if i == points - 1 {
                max
            } else {
                min + i as f64 * step
            };
            if eta == 0.0 {
                step * 1e-3
            } else {
                eta
            }
        })
        .collect())
}

/// One refactored step per `(η, mode)` from a fixed initial pair on a linear
/// regression problem, with the exact loss and the closed-form bound.
///
/// With `G = ∇ℓ(W)`, the increment splits as `U + V + Z` where
/// `U = −η·A·S·Aᵀ·G`, `V = −η·G·B·S⁻¹·Bᵀ`, `Z = η²·G·B·Aᵀ·G`. Completing the
/// square in the quadratic bound gives
///
/// `ℓ(W + ΔW̃) ≤ (Lη²/2)‖G‖₂²(g(S) − 1/(Lη))² + Const + L⟨U + V, Z⟩`
///
/// with `Const = ℓ(W) − ‖G‖_F²/L + ⟨G, Z⟩ + (L/2)‖Z‖_F² + (m + n − 1)‖G‖₂²/(2L)`.
pub fn bound_scan(spec: &BoundScanSpec) -> Result<Vec<BoundRow>> {
    let problem = make_linreg(spec.m, spec.n, spec.k, spec.seed)?;
    let l = problem
        .lipschitz()
        .expect("linear regression has an exact constant");
    let f = spec.init.sample(spec.seed, spec.m, spec.n, spec.rank)?;
    let w = problem.weight(&f);
    let loss0 = problem.loss(&w);
    let grad = problem.grad(&w);
    let g = GradientPair::from_dense(&grad, &f);
    let g_spec = spectral_norm(&grad);
    let g_fro_sq = grad.norm_squared();
    let mn = (spec.m + spec.n) as f64;
    let gbat_g = &g.g_a * f.a().transpose() * &grad;

    let grid = eta_grid(spec.eta_min, spec.eta_max, spec.points)?;
    let mut rows = Vec::with_capacity(grid.len() * spec.modes.len());
    for &eta in &grid {
        let z = &gbat_g * (eta * eta);
        let constant = loss0 - g_fro_sq / l
            + grad.dot(&z)
            + 0.5 * l * z.norm_squared()
            + (mn - 1.0) * g_spec * g_spec / (2.0 * l);
        for &mode in &spec.modes {
            let s = match mode {
                ScanMode::Identity => SpdMatrix::identity(spec.rank),
                ScanMode::TheoremExact => optimal_s(
                    &f,
                    eta,
                    RefactorMode::TheoremExact {
                        lipschitz: l,
                        root: spec.root,
                    },
                )?
                .to_spd(spec.rank)?,
            };
            let delta = refactored_increment(&f, &(&g.g_a * -eta), &(&g.g_b * -eta), &s)?;
            let true_loss = problem.loss(&(&w + &delta));
            let upper_bound = upper_bound_eval(&f, &s, eta, l, g_spec, constant)?;
            let remainder = l * (&delta - &z).dot(&z);
            rows.push(BoundRow {
                eta,
                mode,
                true_loss,
                upper_bound,
                remainder,
            });
        }
    }
    Ok(rows)
}

pub fn write_bound_scan_csv<W: Write>(rows: &[BoundRow], out: &mut W) -> Result<()> {
    writeln!(out, "{BOUND_SCAN_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{},{:.16e},{:.16e}",
            r.eta,
            r.mode.name(),
            r.true_loss,
            r.upper_bound
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadRow {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub method: Method,
    pub median_step_ns: u64,
    /// Time spent choosing the refactoring (zero for plain LoRA).
    pub median_refactor_ns: u64,
    /// `median_step_ns` relative to plain LoRA at the same shape.
    pub ratio: f64,
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2
    }
}

fn time_ns<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_nanos() as u64)
}

/// Median per-step and refactor-phase wall times of each method on random
/// factors and gradients. One untimed pass precedes the timed repeats.
pub fn overhead_probe(
    shapes: &[(usize, usize)],
    ranks: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<OverheadRow>> {
    if repeats < 10 {
        return Err(Error::InvalidConfig(format!(
            "repeats must be at least 10, got {repeats}"
        )));
    }
    let mut rows = Vec::new();
    for &(m, n) in shapes {
        for &r in ranks {
            if r == 0 || r > m.min(n) {
                return Err(Error::InvalidConfig(format!(
                    "rank {r} invalid for {m}x{n}"
                )));
            }
            let mut rng = stream_rng(seed, Stream::Probe);
            let f = LowRankFactors::new(
                gaussian_matrix(&mut rng, m, r, 1.0),
                gaussian_matrix(&mut rng, n, r, 1.0),
            )?;
            let g = GradientPair::new(
                gaussian_matrix(&mut rng, m, r, 1.0),
                gaussian_matrix(&mut rng, n, r, 1.0),
            );
            let eta = 1e-3;
            let mut base = 0u64;
            for method in Method::ALL {
                let cfg = StepConfig::new(eta, method).with_warmup(0);
                let mut stepper = Stepper::new(cfg, &f)?;
                let refactor = |f: &LowRankFactors| -> Result<()> {
                    match method {
                        Method::RefLoRa => {
                            optimal_s(f, eta, RefactorMode::BalancedAlways).map(|_| ())
                        }
                        Method::RefLoRaS => {
                            optimal_scalar(f, eta, RefactorMode::Scalar).map(|_| ())
                        }
                        Method::ScaledGd => f
                            .gram_pair()
                            .and_then(|(a, b)| a.inverse().and(b.inverse()))
                            .map(|_| ()),
                        Method::LoRaGd => Ok(()),
                    }
                };
                stepper.step(&f, &g)?;
                refactor(&f)?;
                let mut steps = Vec::with_capacity(repeats);
                let mut refs = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let (out, ns) = time_ns(|| stepper.step(&f, &g));
                    std::hint::black_box(out?);
                    steps.push(ns);
                    let (out, ns) = time_ns(|| refactor(&f));
                    out?;
                    refs.push(ns);
                }
                let step_ns = median(steps);
                let refactor_ns = if method == Method::LoRaGd {
                    0
                } else {
                    median(refs)
                };
                if method == Method::LoRaGd {
                    base = step_ns.max(1);
                }
                rows.push(OverheadRow {
                    m,
                    n,
                    r,
                    method,
                    median_step_ns: step_ns,
                    median_refactor_ns: refactor_ns,
                    ratio: step_ns as f64 / base as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_overhead_csv<W: Write>(rows: &[OverheadRow], out: &mut W) -> Result<()> {
    writeln!(out, "{OVERHEAD_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.16e}",
            r.m, r.n, r.r, r.method, r.median_step_ns, r.median_refactor_ns, r.ratio
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::MatrixFactorization;

    fn mf_spec(method: Method, eta: f64, iterations: usize) -> RunSpec {
        RunSpec::new(
            ProblemSpec::Mf {
                m: 20,
                n: 15,
                r: 3,
                seed: 7,
            },
            3,
            StepConfig::new(eta, method),
            iterations,
        )
    }

    #[test]
    fn zero_problem_gives_flat_trace() {
        let inst = Instance::Mf(MatrixFactorization::new(Matrix::zeros(5, 4), 2).unwrap());
        let mut spec = mf_spec(Method::LoRaGd, 0.1, 10);
        spec.init = InitSpec {
            sigma_a: 0.0,
            b: BInit::Zero,
        };
        spec.rank = 2;
        let trace = run_on(&spec, &inst).unwrap();
        assert_eq!(trace.records.len(), 11);
        assert!(trace
            .records
            .iter()
            .all(|r| r.loss == 0.0 && r.balance_gap == 0.0));
        assert!(!trace.diverged());
    }

    #[test]
    fn logging_cadence_and_determinism() {
        let mut spec = mf_spec(Method::RefLoRa, 0.01, 23);
        spec.log_every = 5;
        let a = run(&spec).unwrap();
        let steps: Vec<usize> = a.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 15, 20, 23]);
        assert_eq!(run(&spec).unwrap(), a);
    }

    #[test]
    fn reflora_trace_is_balanced_after_warmup() {
        let trace = run(&mf_spec(Method::RefLoRa, 0.01, 50)).unwrap();
        for r in &trace.records[1..] {
            assert!(
                r.balance_gap <= 1e-7,
                "step {} gap {}",
                r.step,
                r.balance_gap
            );
        }
        assert!(trace.final_loss() < trace.initial_loss);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = mf_spec(Method::LoRaGd, 0.01, 0);
        assert!(run(&spec).is_err());
        spec.iterations = 1;
        spec.log_every = 0;
        assert!(run(&spec).is_err());
    }

    #[test]
    fn divergence_is_data() {
        let trace = run(&mf_spec(Method::LoRaGd, 3.0, 200)).unwrap();
        assert!(trace.diverged());
        assert_eq!(trace.records.len(), 201);
    }

    #[test]
    fn past_warmup_rank_deficiency_is_an_error() {
        let mut spec = mf_spec(Method::RefLoRa, 0.01, 5);
        spec.step.warmup_steps = 0;
        assert!(matches!(run(&spec), Err(Error::Numerical { step: 1, .. })));
    }

    #[test]
    fn compare_checks_seeds_and_dedups_labels() {
        let a = mf_spec(Method::LoRaGd, 0.01, 5);
        let traces = compare(&[a.clone(), a.clone()], 2).unwrap();
        assert_eq!(traces[0].records, traces[1].records);
        assert_eq!(traces[1].label, "lora-eta0.01#2");
        assert_eq!(
            compare(std::slice::from_ref(&a), 1).unwrap()[0],
            run(&a).unwrap()
        );

        let mut b = a.clone();
        b.problem = ProblemSpec::Mf {
            m: 20,
            n: 15,
            r: 3,
            seed: 8,
        };
        assert!(compare(&[a, b], 2).is_err());
    }

    #[test]
    fn compare_csv_layout() {
        let traces = compare(
            &[
                mf_spec(Method::LoRaGd, 0.01, 3),
                mf_spec(Method::ScaledGd, 0.01, 3),
            ],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_compare_csv(&traces, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("step,lora-eta0.01:loss,"));
        assert_eq!(lines[1].split(',').count(), 15);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        run(&mf_spec(Method::LoRaGd, 0.01, 2))
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_HEADER);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn grid_skips_zero() {
        let grid = eta_grid(-0.5, 0.5, 101).unwrap();
        assert_eq!(grid.len(), 101);
        assert!(grid.iter().all(|&e| e != 0.0));
        assert!(grid.iter().any(|&e| e < 0.0) && grid.iter().any(|&e| e > 0.0));
        assert_eq!(grid[0], -0.5);
        assert_eq!(grid[100], 0.5);
        assert!(eta_grid(0.5, -0.5, 10).is_err());
        assert!(eta_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn bound_scan_dominates_and_jumps() {
        let spec = BoundScanSpec::default_with_seed(3);
        let rows = bound_scan(&spec).unwrap();
        assert_eq!(rows.len(), 402);
        for r in &rows {
            let slack = 1e-10 * r.true_loss.abs().max(1.0);
            assert!(r.upper_bound + r.remainder + slack >= r.true_loss, "{r:?}");
        }
        // Identity with a vanishing step leaves the loss unchanged.
        let near_zero = rows
            .iter()
            .filter(|r| r.mode == ScanMode::Identity)
            .min_by(|a, b| a.eta.abs().partial_cmp(&b.eta.abs()).unwrap())
            .unwrap();
        let problem = make_linreg(2, 2, 2, 3).unwrap();
        let f = spec.init.sample(3, 2, 2, 1).unwrap();
        assert!((near_zero.true_loss - problem.loss_at(&f)).abs() < 1e-3 * problem.loss_at(&f));
    }
}
