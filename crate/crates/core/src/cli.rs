//! Command-line front end.
//!
//! Every output begins with a `#` header holding the tool version, the fully
//! resolved command line and the seed. Running the recorded command again
//! reproduces the output byte for byte.
//!
//! A `--config FILE` holds `key = value` lines named after the long flags.
//! Its entries are read first, so flags given on the command line win.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::harness::{
    bound_scan, compare, overhead_probe, run, write_bound_scan_csv, write_compare_csv,
    write_overhead_csv, BInit, BoundScanSpec, InitSpec, ProblemSpec, RunSpec, ScanMode,
};
use crate::optim::{AdamHyper, Method, OptimizerKind, StepConfig};
use crate::props::{run_all, write_report};
use crate::refactor::{RefactorMode, RootChoice};
use crate::rng::{stream_rng, Stream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "reflora",
    version,
    about = "Low-rank adapter training with per-step optimal refactoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a synthetic low-rank matrix and write the loss trace.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Mf(MfArgs),
    /// Fit a linear regression adapter and write the loss trace.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Linreg(LinregArgs),
    /// One refactored step over a grid of learning rates, with the bound.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    BoundScan(ScanArgs),
    /// Several methods and learning rates on one shared problem.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Compare(CompareArgs),
    /// Median step and refactoring times per shape and rank.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    Overhead(OverheadArgs),
    /// Run the invariant checks on fresh random draws.
    #[command(args_override_self = true, allow_negative_numbers = true)]
    PropsReport(PropsArgs),
}

#[derive(Args, Debug, Default)]
struct IoArgs {
    /// Seed for every random draw. A time-based seed is used and recorded when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file. Standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// File of `key = value` lines using the long flag names.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Balanced,
    TheoremExact,
    Identity,
    Scalar,
    ScalarTheoremExact,
}

impl ModeArg {
    fn needs_lipschitz(self) -> bool {
        matches!(self, ModeArg::TheoremExact | ModeArg::ScalarTheoremExact)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RootArg {
    Plus,
    Minus,
}

impl From<RootArg> for RootChoice {
    fn from(r: RootArg) -> Self {
        match r {
            RootArg::Plus => RootChoice::Plus,
            RootArg::Minus => RootChoice::Minus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BInitArg {
    Zero,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProblemArg {
    Mf,
    Linreg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScanModeArg {
    Identity,
    TheoremExact,
}

#[derive(Args, Debug, Default)]
struct OptimArgs {
    /// gd, adam or adamw.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Root of the small learning rate branch in theorem-exact modes.
    #[arg(long, value_enum)]
    root: Option<RootArg>,
    /// Smoothness constant for theorem-exact modes. Defaults to the problem's exact constant.
    #[arg(long)]
    lipschitz: Option<f64>,
    /// Steps during which a rank-deficient pair falls back to the plain update.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct InitArgs {
    /// Standard deviation of the entries of A at initialization.
    #[arg(long)]
    sigma_a: Option<f64>,
    #[arg(long, value_enum)]
    b_init: Option<BInitArg>,
    /// Standard deviation of the entries of B when `--b-init gaussian`.
    #[arg(long)]
    sigma_b: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct LoopArgs {
    /// Adapter rank. Defaults to the target rank for mf and 4 for linreg.
    #[arg(long)]
    rank: Option<usize>,
    /// Adapter scaling; the increment is (alpha/rank)·A·Bᵀ. Defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Record wall-clock step times (true or false). Timed outputs are not reproducible.
    #[arg(long)]
    record_timing: Option<bool>,
}

#[derive(Args, Debug, Default)]
struct MfArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Rank of the target matrix.
    #[arg(long)]
    r: Option<usize>,
    /// lora, reflora, reflora-s or scaledgd.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    eta: Option<f64>,
    #[command(flatten)]
    run: LoopArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    init: InitArgs,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args, Debug, Default)]
struct LinregArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Number of samples.
    #[arg(long)]
    k: Option<usize>,
    /// lora, reflora, reflora-s or scaledgd.
    #[arg(long)]
    method: Option<Method>,
    /// Learning rate. Defaults to 1e-4.
    #[arg(long)]
    eta: Option<f64>,
    #[command(flatten)]
    run: LoopArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    init: InitArgs,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args, Debug, Default)]
struct CompareArgs {
    #[arg(long, value_enum)]
    problem: Option<ProblemArg>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Target rank (mf).
    #[arg(long)]
    r: Option<usize>,
    /// Number of samples (linreg).
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated methods.
    #[arg(long)]
    methods: Option<List<Method>>,
    /// Comma-separated learning rates; every method runs at every rate.
    #[arg(long)]
    etas: Option<List<f64>>,
    #[command(flatten)]
    run: LoopArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    init: InitArgs,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args, Debug, Default)]
struct ScanArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    eta_min: Option<f64>,
    #[arg(long)]
    eta_max: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Comma-separated: identity, theorem-exact.
    #[arg(long)]
    modes: Option<List<ScanModeArg>>,
    #[arg(long, value_enum)]
    root: Option<RootArg>,
    #[command(flatten)]
    init: InitArgs,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args, Debug, Default)]
struct OverheadArgs {
    /// Comma-separated shapes such as 2048x2048.
    #[arg(long)]
    dims: Option<List<Dims>>,
    /// Comma-separated ranks.
    #[arg(long)]
    ranks: Option<List<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    io: IoArgs,
}

#[derive(Args, Debug, Default)]
struct PropsArgs {
    /// Samples per check.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, hide = true)]
    inject_fault: bool,
    #[command(flatten)]
    io: IoArgs,
}

/// A comma-separated flag value. Repeating the flag replaces the list.
#[derive(Clone, Debug, PartialEq)]
struct List<T>(Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|item| {
                item.trim()
                    .parse::<T>()
                    .map_err(|e| format!("'{}': {e}", item.trim()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims(usize, usize);

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (m, n) = s
            .split_once('x')
            .ok_or_else(|| format!("expected MxN, got '{s}'"))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad dimension '{t}': {e}"))
        };
        Ok(Dims(parse(m)?, parse(n)?))
    }
}

impl FromStr for ScanModeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <ScanModeArg as ValueEnum>::from_str(s, false)
            .map_err(|_| "expected identity or theorem-exact".to_string())
    }
}

/// A rejected flag value, reported with exit code 2.
#[derive(Debug)]
struct Usage {
    flag: &'static str,
    message: String,
}

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid value for --{}: {}", self.flag, self.message)
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(flag: &'static str, message: impl Into<String>) -> Usage {
    Usage {
        flag,
        message: message.into(),
    }
}

fn require(ok: bool, flag: &'static str, message: &str) -> Result<(), Usage> {
    if ok {
        Ok(())
    } else {
        Err(usage(flag, message))
    }
}

fn positive(x: f64, flag: &'static str) -> Result<f64, Usage> {
    require(
        x > 0.0 && x.is_finite(),
        flag,
        &format!("must be positive and finite, got {x}"),
    )?;
    Ok(x)
}

fn non_negative(x: f64, flag: &'static str) -> Result<f64, Usage> {
    require(
        x >= 0.0 && x.is_finite(),
        flag,
        &format!("must be non-negative and finite, got {x}"),
    )?;
    Ok(x)
}

fn at_least_one(x: usize, flag: &'static str) -> Result<usize, Usage> {
    require(x >= 1, flag, "must be at least 1")?;
    Ok(x)
}

/// Builds a canonical argument list from resolved values.
#[derive(Default)]
struct Canon(Vec<String>);

impl Canon {
    fn push(&mut self, flag: &str, value: impl fmt::Display) {
        self.0.push(format!("--{flag}"));
        self.0.push(value.to_string());
    }

    fn push_list<T: fmt::Display>(&mut self, flag: &str, values: &[T]) {
        let joined = values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.push(flag, joined);
    }
}

fn value_name<T: ValueEnum>(v: &T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let d = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        d.as_secs().wrapping_mul(1_000_000_007) ^ u64::from(d.subsec_nanos())
    })
}

fn resolve_init(a: &InitArgs, default: InitSpec, canon: &mut Canon) -> Result<InitSpec, Usage> {
    let sigma_a = non_negative(a.sigma_a.unwrap_or(default.sigma_a), "sigma-a")?;
    let default_b = match default.b {
        BInit::Zero => BInitArg::Zero,
        BInit::Gaussian(_) => BInitArg::Gaussian,
    };
    let default_sigma_b = match default.b {
        BInit::Gaussian(s) => s,
        BInit::Zero => 1.0,
    };
    let b_init = a.b_init.unwrap_or(default_b);
    canon.push("sigma-a", sigma_a);
    canon.push("b-init", value_name(&b_init));
    let b = match b_init {
        BInitArg::Zero => BInit::Zero,
        BInitArg::Gaussian => {
            let s = non_negative(a.sigma_b.unwrap_or(default_sigma_b), "sigma-b")?;
            canon.push("sigma-b", s);
            BInit::Gaussian(s)
        }
    };
    Ok(InitSpec { sigma_a, b })
}

fn check_eta(eta: f64, mode: ModeArg, flag: &'static str) -> Result<f64, Usage> {
    if eta == 0.0 && mode.needs_lipschitz() {
        return Err(usage(
            flag,
            "0 is not allowed with a theorem-exact mode: the optimal refactoring is discontinuous at eta = 0 \
             (balanced for eta < 0, a root that blows up as eta -> 0+)",
        ));
    }
    positive(eta, flag)
}

/// Step settings shared by the training subcommands, before the method and
/// learning rate are attached.
struct StepTemplate {
    optimizer: OptimizerKind,
    mode: RefactorMode,
    mode_arg: ModeArg,
    warmup: usize,
    adam: AdamHyper,
}

impl StepTemplate {
    fn config(&self, eta: f64, method: Method) -> StepConfig {
        let mut c = StepConfig::new(eta, method)
            .with_optimizer(self.optimizer)
            .with_mode(self.mode)
            .with_warmup(self.warmup);
        c.adam = self.adam;
        c
    }
}

fn resolve_optim(o: &OptimArgs, lipschitz: f64, canon: &mut Canon) -> Result<StepTemplate, Usage> {
    let optimizer = o.optimizer.unwrap_or_default();
    let mode_arg = o.mode.unwrap_or(ModeArg::Balanced);
    let warmup = o.warmup.unwrap_or(1);
    let d = AdamHyper::default();
    let adam = AdamHyper {
        beta1: o.beta1.unwrap_or(d.beta1),
        beta2: o.beta2.unwrap_or(d.beta2),
        eps: positive(o.adam_eps.unwrap_or(d.eps), "adam-eps")?,
        weight_decay: non_negative(o.weight_decay.unwrap_or(d.weight_decay), "weight-decay")?,
    };
    require(
        (0.0..1.0).contains(&adam.beta1),
        "beta1",
        "must lie in [0, 1)",
    )?;
    require(
        (0.0..1.0).contains(&adam.beta2),
        "beta2",
        "must lie in [0, 1)",
    )?;
    canon.push("optimizer", optimizer.name());
    canon.push("mode", value_name(&mode_arg));
    let root = o.root.unwrap_or(RootArg::Plus);
    let mode = match mode_arg {
        ModeArg::Balanced => RefactorMode::BalancedAlways,
        ModeArg::Identity => RefactorMode::Identity,
        ModeArg::Scalar => RefactorMode::Scalar,
        ModeArg::TheoremExact | ModeArg::ScalarTheoremExact => {
            let lipschitz = positive(o.lipschitz.unwrap_or(lipschitz), "lipschitz")?;
            canon.push("root", value_name(&root));
            canon.push("lipschitz", lipschitz);
            if mode_arg == ModeArg::TheoremExact {
                RefactorMode::TheoremExact {
                    lipschitz,
                    root: root.into(),
                }
            } else {
                RefactorMode::ScalarTheoremExact {
                    lipschitz,
                    root: root.into(),
                }
            }
        }
    };
    canon.push("warmup", warmup);
    canon.push("beta1", adam.beta1);
    canon.push("beta2", adam.beta2);
    canon.push("adam-eps", adam.eps);
    canon.push("weight-decay", adam.weight_decay);
    Ok(StepTemplate {
        optimizer,
        mode,
        mode_arg,
        warmup,
        adam,
    })
}

struct LoopSettings {
    rank: usize,
    alpha: f64,
    steps: usize,
    log_every: usize,
    record_timing: bool,
}

fn resolve_loop(
    l: &LoopArgs,
    default_rank: usize,
    m: usize,
    n: usize,
    canon: &mut Canon,
) -> Result<LoopSettings, Usage> {
    let rank = at_least_one(l.rank.unwrap_or(default_rank), "rank")?;
    require(
        rank <= m.min(n),
        "rank",
        &format!("must not exceed min(m, n) = {}", m.min(n)),
    )?;
    let s = LoopSettings {
        rank,
        alpha: positive(l.alpha.unwrap_or(rank as f64), "alpha")?,
        steps: at_least_one(l.steps.unwrap_or(2000), "steps")?,
        log_every: at_least_one(l.log_every.unwrap_or(1), "log-every")?,
        record_timing: l.record_timing.unwrap_or(false),
    };
    canon.push("rank", s.rank);
    canon.push("alpha", s.alpha);
    canon.push("steps", s.steps);
    canon.push("log-every", s.log_every);
    canon.push("record-timing", s.record_timing);
    Ok(s)
}

fn run_spec(problem: ProblemSpec, l: &LoopSettings, step: StepConfig, init: InitSpec) -> RunSpec {
    let mut spec = RunSpec::new(problem, l.rank, step, l.steps);
    spec.alpha = Some(l.alpha);
    spec.log_every = l.log_every;
    spec.init = init;
    spec.record_timing = l.record_timing;
    spec
}

fn problem_lipschitz(p: &ProblemSpec) -> Result<f64, Failure> {
    let inst = p.build()?;
    inst.as_problem().lipschitz().ok_or_else(|| {
        Failure::Runtime(Error::InvalidConfig(
            "problem has no known smoothness constant".into(),
        ))
    })
}

fn mf_problem(
    m: Option<usize>,
    n: Option<usize>,
    r: Option<usize>,
    seed: u64,
    canon: &mut Canon,
) -> Result<ProblemSpec, Usage> {
    let m = at_least_one(m.unwrap_or(128), "m")?;
    let n = at_least_one(n.unwrap_or(100), "n")?;
    let r = at_least_one(r.unwrap_or(8), "r")?;
    require(
        r <= m.min(n),
        "r",
        &format!("must not exceed min(m, n) = {}", m.min(n)),
    )?;
    canon.push("m", m);
    canon.push("n", n);
    canon.push("r", r);
    Ok(ProblemSpec::Mf { m, n, r, seed })
}

fn linreg_problem(
    m: Option<usize>,
    n: Option<usize>,
    k: Option<usize>,
    seed: u64,
    canon: &mut Canon,
) -> Result<ProblemSpec, Usage> {
    let m = at_least_one(m.unwrap_or(32), "m")?;
    let n = at_least_one(n.unwrap_or(32), "n")?;
    let k = at_least_one(k.unwrap_or(64), "k")?;
    canon.push("m", m);
    canon.push("n", n);
    canon.push("k", k);
    Ok(ProblemSpec::LinReg { m, n, k, seed })
}

/// Resolved output of a subcommand: canonical flags, seed and body.
struct Rendered {
    sub: &'static str,
    canon: Canon,
    seed: u64,
    body: Vec<u8>,
    out: Option<PathBuf>,
    ok: bool,
}

/// Flags shared by the `mf` and `linreg` subcommands.
struct TrainFlags<'a> {
    method: Option<Method>,
    eta: Option<f64>,
    run: &'a LoopArgs,
    optim: &'a OptimArgs,
    init: &'a InitArgs,
    io: &'a IoArgs,
}

fn train(
    sub: &'static str,
    problem: ProblemSpec,
    a: TrainFlags<'_>,
    mut canon: Canon,
) -> Result<Rendered, Failure> {
    let seed = problem.seed();
    let (m, n, default_rank, default_eta, default_init) = match problem {
        ProblemSpec::Mf { m, n, r, .. } => (m, n, r, 0.01, InitSpec::lora()),
        ProblemSpec::LinReg { m, n, .. } => {
            (m, n, 4.min(m).min(n), 1e-4, InitSpec::linreg_default())
        }
    };
    let loop_settings = resolve_loop(a.run, default_rank, m, n, &mut canon)?;
    let lipschitz = problem_lipschitz(&problem)?;
    let method = a.method.unwrap_or(Method::RefLoRa);
    canon.push("method", method);
    let template = resolve_optim(a.optim, lipschitz, &mut canon)?;
    let eta = check_eta(a.eta.unwrap_or(default_eta), template.mode_arg, "eta")?;
    canon.push("eta", eta);
    let init = resolve_init(a.init, default_init, &mut canon)?;
    let spec = run_spec(problem, &loop_settings, template.config(eta, method), init);
    let trace = run(&spec)?;
    let mut body = Vec::new();
    trace.write_csv(&mut body)?;
    Ok(Rendered {
        sub,
        canon,
        seed,
        body,
        out: a.io.out.clone(),
        ok: true,
    })
}

fn dispatch_mf(a: &MfArgs) -> Result<Rendered, Failure> {
    let seed = resolve_seed(a.io.seed);
    let mut canon = Canon::default();
    let problem = mf_problem(a.m, a.n, a.r, seed, &mut canon)?;
    let flags = TrainFlags {
        method: a.method,
        eta: a.eta,
        run: &a.run,
        optim: &a.optim,
        init: &a.init,
        io: &a.io,
    };
    train("mf", problem, flags, canon)
}

fn dispatch_linreg(a: &LinregArgs) -> Result<Rendered, Failure> {
    let seed = resolve_seed(a.io.seed);
    let mut canon = Canon::default();
    let problem = linreg_problem(a.m, a.n, a.k, seed, &mut canon)?;
    let flags = TrainFlags {
        method: a.method,
        eta: a.eta,
        run: &a.run,
        optim: &a.optim,
        init: &a.init,
        io: &a.io,
    };
    train("linreg", problem, flags, canon)
}

fn compare_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("REFLORA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .map_or(available, |t| t.min(available))
}

fn dispatch_compare(a: &CompareArgs) -> Result<Rendered, Failure> {
    let seed = resolve_seed(a.io.seed);
    let mut canon = Canon::default();
    let kind = a.problem.unwrap_or(ProblemArg::Mf);
    canon.push("problem", value_name(&kind));
    let (problem, default_init) = match kind {
        ProblemArg::Mf => {
            require(a.k.is_none(), "k", "only applies to --problem linreg")?;
            (
                mf_problem(a.m, a.n, a.r, seed, &mut canon)?,
                InitSpec::lora(),
            )
        }
        ProblemArg::Linreg => {
            require(a.r.is_none(), "r", "only applies to --problem mf")?;
            (
                linreg_problem(a.m, a.n, a.k, seed, &mut canon)?,
                InitSpec::linreg_default(),
            )
        }
    };
    let (m, n, default_rank) = match problem {
        ProblemSpec::Mf { m, n, r, .. } => (m, n, r),
        ProblemSpec::LinReg { m, n, .. } => (m, n, 4.min(m).min(n)),
    };
    let loop_settings = resolve_loop(&a.run, default_rank, m, n, &mut canon)?;
    let lipschitz = problem_lipschitz(&problem)?;
    let methods = a.methods.clone().map_or_else(
        || vec![Method::LoRaGd, Method::RefLoRa, Method::ScaledGd],
        |l| l.0,
    );
    require(
        !methods.is_empty(),
        "methods",
        "must name at least one method",
    )?;
    canon.push_list("methods", &methods);
    let template = resolve_optim(&a.optim, lipschitz, &mut canon)?;
    let etas = a.etas.clone().map_or_else(
        || {
            vec![match kind {
                ProblemArg::Mf => 0.01,
                ProblemArg::Linreg => 1e-4,
            }]
        },
        |l| l.0,
    );
    for &eta in &etas {
        check_eta(eta, template.mode_arg, "etas")?;
    }
    canon.push_list("etas", &etas);
    let init = resolve_init(&a.init, default_init, &mut canon)?;
    let specs: Vec<RunSpec> = etas
        .iter()
        .flat_map(|&eta| methods.iter().map(move |&method| (eta, method)))
        .map(|(eta, method)| run_spec(problem, &loop_settings, template.config(eta, method), init))
        .collect();
    let traces = compare(&specs, compare_threads())?;
    let mut body = Vec::new();
    write_compare_csv(&traces, &mut body)?;
    Ok(Rendered {
        sub: "compare",
        canon,
        seed,
        body,
        out: a.io.out.clone(),
        ok: true,
    })
}

fn dispatch_scan(a: &ScanArgs) -> Result<Rendered, Failure> {
    let seed = resolve_seed(a.io.seed);
    let mut canon = Canon::default();
    let d = BoundScanSpec::default_with_seed(seed);
    let m = at_least_one(a.m.unwrap_or(d.m), "m")?;
    let n = at_least_one(a.n.unwrap_or(d.n), "n")?;
    let k = at_least_one(a.k.unwrap_or(d.k), "k")?;
    let rank = at_least_one(a.rank.unwrap_or(d.rank), "rank")?;
    require(
        rank <= m.min(n),
        "rank",
        &format!("must not exceed min(m, n) = {}", m.min(n)),
    )?;
    let eta_min = a.eta_min.unwrap_or(d.eta_min);
    let eta_max = a.eta_max.unwrap_or(d.eta_max);
    require(eta_min.is_finite(), "eta-min", "must be finite")?;
    require(
        eta_max.is_finite() && eta_max > eta_min,
        "eta-max",
        "must be finite and greater than --eta-min",
    )?;
    let points = a.points.unwrap_or(d.points);
    require(points >= 2, "points", "must be at least 2")?;
    let mode_args = a.modes.clone().map_or_else(
        || vec![ScanModeArg::Identity, ScanModeArg::TheoremExact],
        |l| l.0,
    );
    let root = a.root.unwrap_or(RootArg::Plus);
    canon.push("m", m);
    canon.push("n", n);
    canon.push("k", k);
    canon.push("rank", rank);
    canon.push("eta-min", eta_min);
    canon.push("eta-max", eta_max);
    canon.push("points", points);
    canon.push_list(
        "modes",
        &mode_args.iter().map(value_name).collect::<Vec<_>>(),
    );
    canon.push("root", value_name(&root));
    let init = resolve_init(&a.init, d.init, &mut canon)?;
    let spec = BoundScanSpec {
        m,
        n,
        k,
        rank,
        seed,
        eta_min,
        eta_max,
        points,
        modes: mode_args
            .iter()
            .map(|m| match m {
                ScanModeArg::Identity => ScanMode::Identity,
                ScanModeArg::TheoremExact => ScanMode::TheoremExact,
            })
            .collect(),
        root: root.into(),
        init,
    };
    let rows = bound_scan(&spec)?;
    let mut body = Vec::new();
    write_bound_scan_csv(&rows, &mut body)?;
    Ok(Rendered {
        sub: "bound-scan",
        canon,
        seed,
        body,
        out: a.io.out.clone(),
        ok: true,
    })
}

fn dispatch_overhead(a: &OverheadArgs) -> Result<Rendered, Failure> {
    let seed = resolve_seed(a.io.seed);
    let mut canon = Canon::default();
    let dims: Vec<(usize, usize)> = a.dims.clone().map_or_else(
        || vec![(2048, 2048)],
        |l| l.0.into_iter().map(|Dims(m, n)| (m, n)).collect(),
    );
    let ranks = a.ranks.clone().map_or_else(|| vec![8, 32], |l| l.0);
    let repeats = a.repeats.unwrap_or(15);
    require(repeats >= 10, "repeats", "must be at least 10")?;
    for &(m, n) in &dims {
        require(m >= 1 && n >= 1, "dims", "dimensions must be at least 1")?;
        for &r in &ranks {
            require(
                r >= 1 && r <= m.min(n),
                "ranks",
                &format!("rank {r} does not fit shape {m}x{n}"),
            )?;
        }
    }
    canon.push_list(
        "dims",
        &dims
            .iter()
            .map(|(m, n)| format!("{m}x{n}"))
            .collect::<Vec<_>>(),
    );
    canon.push_list("ranks", &ranks);
    canon.push("repeats", repeats);
    let rows = overhead_probe(&dims, &ranks, repeats, seed)?;
    let mut body = Vec::new();
    write_overhead_csv(&rows, &mut body)?;
    Ok(Rendered {
        sub: "overhead",
        canon,
        seed,
        body,
        out: a.io.out.clone(),
        ok: true,
    })
}

fn dispatch_props(a: &PropsArgs) -> Result<Rendered, Failure> {
    let seed = resolve_seed(a.io.seed);
    let mut canon = Canon::default();
    let trials = at_least_one(a.trials.unwrap_or(100), "trials")?;
    canon.push("trials", trials);
    if a.inject_fault {
        canon.0.push("--inject-fault".into());
    }
    let mut rng = stream_rng(seed, Stream::Probe);
    let results = run_all(&mut rng, trials, a.inject_fault)?;
    let mut body = Vec::new();
    write_report(&results, &mut body)?;
    Ok(Rendered {
        sub: "props-report",
        canon,
        seed,
        body,
        out: a.io.out.clone(),
        ok: results.iter().all(|r| r.passed()),
    })
}

/// The `#` header placed before every output body.
fn header(r: &Rendered) -> String {
    format!(
        "# reflora {}\n# command: reflora {} {} --seed {}\n# seed: {}\n",
        env!("CARGO_PKG_VERSION"),
        r.sub,
        r.canon.0.join(" "),
        r.seed,
        r.seed
    )
}

fn emit(r: &Rendered, stdout: &mut dyn Write) -> Result<(), Failure> {
    let mut bytes = header(r).into_bytes();
    bytes.extend_from_slice(&r.body);
    match &r.out {
        Some(path) => std::fs::write(path, &bytes).map_err(|e| {
            Failure::Runtime(Error::InvalidConfig(format!(
                "cannot write {}: {e}",
                path.display()
            )))
        }),
        None => Ok(stdout.write_all(&bytes)?),
    }
}

/// Reads `key = value` lines into `--key=value` arguments.
pub fn config_to_args(path: &Path) -> Result<Vec<OsString>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            line: i + 1,
            reason,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(parse_err(format!("invalid key '{key}'")));
        }
        if key == "config" {
            return Err(parse_err(
                "config files cannot include other config files".into(),
            ));
        }
        let value = value
            .split(',')
            .map(str::trim)
            .collect::<Vec<_>>()
            .join(",");
        args.push(format!("--{key}={value}").into());
    }
    Ok(args)
}

/// Moves `--config FILE` contents in front of the remaining flags so that
/// explicit flags override file entries.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    if argv.len() < 2 || argv[1].to_string_lossy().starts_with('-') {
        return Ok(argv);
    }
    let mut head = argv[..2].to_vec();
    let mut from_files = Vec::new();
    let mut rest = Vec::new();
    let mut it = argv.into_iter().skip(2);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        let path = if s == "--config" {
            match it.next() {
                Some(p) => PathBuf::from(p),
                None => return Err("invalid value for --config: a file path is required".into()),
            }
        } else if let Some(p) = s.strip_prefix("--config=") {
            PathBuf::from(p)
        } else {
            rest.push(arg);
            continue;
        };
        let entries = config_to_args(&path)
            .map_err(|e| format!("invalid value for --config: {}: {e}", path.display()))?;
        from_files.extend(entries);
    }
    head.extend(from_files);
    head.extend(rest);
    Ok(head)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 on a usage error, 1 otherwise.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = match expand_config(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Mf(a) => dispatch_mf(a),
        Command::Linreg(a) => dispatch_linreg(a),
        Command::BoundScan(a) => dispatch_scan(a),
        Command::Compare(a) => dispatch_compare(a),
        Command::Overhead(a) => dispatch_overhead(a),
        Command::PropsReport(a) => dispatch_props(a),
    }
    .and_then(|r| emit(&r, stdout).map(|()| r.ok));
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            let _ = writeln!(
                stderr,
                "error: at least one property exceeded its tolerance"
            );
            EXIT_RUNTIME
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
