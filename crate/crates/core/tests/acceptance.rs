//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use reflora::error::Result;
use reflora::harness::{
    bound_scan, compare, overhead_probe, BoundScanSpec, ProblemSpec, RunSpec, ScanMode,
};
use reflora::optim::{Method, StepConfig};
use reflora::props::{
    check_descent_sandwich, check_dual_paths, check_geometric_mean, check_gradients,
    check_horizontal, check_orthogonal_invariance, check_refactor_invariance, check_scalar,
    check_theorem_exact, PropertyResult, Shapes,
};
use reflora::rng::{stream_rng, Stream};

/// Iteration count for the factorization comparison, fixed from a pilot run.
const MF_ITERATIONS: usize = 2000;
const MF_SEED: u64 = 42;
const SCAN_SEED: u64 = 3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn from_props(results: &[PropertyResult]) -> Verdict {
    let pass = results.iter().all(|r| r.passed());
    let detail = results
        .iter()
        .map(|r| {
            format!(
                "{}: {:.2e} (tol {:.0e}, n={})",
                r.name, r.max_residual, r.tolerance, r.trials
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Verdict { pass, detail }
}

fn with_budget(v: Verdict, secs: f64, budget: f64) -> Verdict {
    let ok = secs < budget;
    Verdict {
        pass: v.pass && ok,
        detail: format!("{}; runtime {:.2} s (budget {budget} s)", v.detail, secs),
    }
}

fn full_range() -> Shapes {
    Shapes {
        max_dim: 64,
        max_rank: 16,
        min_ratio: 1,
    }
}

fn ac01_03() -> Result<Vec<(String, Verdict)>> {
    let mut rng = stream_rng(101, Stream::Probe);
    let start = Instant::now();
    let res = check_geometric_mean(&mut rng, 1000, 0, full_range(), false)?;
    let secs = start.elapsed().as_secs_f64();
    let mut rng = stream_rng(101, Stream::Probe);
    let with_perturbations = check_geometric_mean(&mut rng, 1000, 100, full_range(), false)?;
    Ok(vec![
        (
            "AC01 balanced refactor identity".into(),
            with_budget(from_props(&res[0..1]), secs, 5.0),
        ),
        ("AC02 closed forms agree".into(), from_props(&res[1..2])),
        (
            "AC03 stationarity and minimality".into(),
            from_props(&with_perturbations[2..5]),
        ),
    ])
}

fn ac04() -> Result<Verdict> {
    let mut rng = stream_rng(104, Stream::Probe);
    Ok(from_props(&check_theorem_exact(
        &mut rng,
        1000,
        full_range(),
    )?))
}

fn ac05() -> Result<Verdict> {
    let mut rng = stream_rng(105, Stream::Probe);
    Ok(from_props(&check_scalar(&mut rng, 1000, full_range())?))
}

fn ac06() -> Result<Verdict> {
    let mut rng = stream_rng(106, Stream::Probe);
    Ok(from_props(&[check_refactor_invariance(
        &mut rng,
        200,
        Shapes::default(),
        1e4,
    )?]))
}

fn ac07() -> Result<Verdict> {
    let mut rng = stream_rng(107, Stream::Probe);
    Ok(from_props(&[check_orthogonal_invariance(
        &mut rng,
        200,
        full_range(),
    )?]))
}

fn ac08() -> Result<Verdict> {
    let mut rng = stream_rng(108, Stream::Probe);
    Ok(from_props(&check_dual_paths(&mut rng, 200, full_range())?))
}

fn ac09() -> Result<Verdict> {
    let mut rng = stream_rng(109, Stream::Probe);
    Ok(from_props(&[check_horizontal(
        &mut rng,
        200,
        full_range(),
    )?]))
}

fn ac10() -> Result<Verdict> {
    let mut rng = stream_rng(110, Stream::Probe);
    Ok(from_props(&check_descent_sandwich(
        &mut rng,
        500,
        full_range(),
    )?))
}

fn ac11() -> Result<Verdict> {
    let start = Instant::now();
    let rows = bound_scan(&BoundScanSpec::default_with_seed(SCAN_SEED))?;
    let secs = start.elapsed().as_secs_f64();
    let mut worst = f64::NEG_INFINITY;
    for r in &rows {
        // Positive means the bound falls short of the true loss.
        let shortfall = (r.true_loss - r.upper_bound - r.remainder) / r.true_loss.abs().max(1.0);
        worst = worst.max(shortfall);
    }
    let dominated = worst <= 1e-12;
    let min_of = |mode: ScanMode| {
        rows.iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.true_loss)
            .fold(f64::INFINITY, f64::min)
    };
    let (exact, identity) = (min_of(ScanMode::TheoremExact), min_of(ScanMode::Identity));
    let zero_free = rows.iter().all(|r| r.eta != 0.0) && rows.len() == 2 * 201;
    let v = Verdict {
        pass: dominated && exact <= identity && zero_free,
        detail: format!(
            "{} rows, worst relative shortfall {worst:.2e} (must be <= 1e-12), min loss theorem-exact {exact:.6e} vs identity {identity:.6e}",
            rows.len()
        ),
    };
    Ok(with_budget(v, secs, 10.0))
}

fn ac12() -> Result<Verdict> {
    let start = Instant::now();
    let problem = ProblemSpec::Mf {
        m: 128,
        n: 100,
        r: 8,
        seed: MF_SEED,
    };
    let spec = |method, eta| RunSpec::new(problem, 8, StepConfig::new(eta, method), MF_ITERATIONS);
    let specs = [
        spec(Method::LoRaGd, 0.03),
        spec(Method::RefLoRa, 0.03),
        spec(Method::LoRaGd, 0.01),
        spec(Method::RefLoRa, 0.01),
        spec(Method::ScaledGd, 0.01),
    ];
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let t = compare(&specs, threads)?;
    let secs = start.elapsed().as_secs_f64();

    let lora_diverged = t[0].diverged();
    let reflora_ratio = t[1].final_loss() / t[1].initial_loss;
    let mut worst_step = None;
    for (l, r) in t[2].records.iter().zip(&t[3].records) {
        if l.step > 10 && r.loss.partial_cmp(&l.loss).is_none_or(|o| o.is_gt()) {
            worst_step.get_or_insert(l.step);
        }
    }
    let final_ok = t[3].final_loss() <= t[4].final_loss();
    let v = Verdict {
        pass: lora_diverged && reflora_ratio <= 1e-10 && worst_step.is_none() && final_ok,
        detail: format!(
            "eta=0.03: LoRA diverged at {:?}, RefLoRA final/initial {reflora_ratio:.2e}; eta=0.01: first step where RefLoRA > LoRA after 10: {worst_step:?}, final RefLoRA {:.3e} vs ScaledGD {:.3e}",
            t[0].diverged_at,
            t[3].final_loss(),
            t[4].final_loss()
        ),
    };
    Ok(with_budget(v, secs, 60.0))
}

fn ac13() -> Result<Verdict> {
    let mut rng = stream_rng(113, Stream::Probe);
    Ok(from_props(&check_gradients(&mut rng, 50)?))
}

fn ac14() -> Result<Verdict> {
    let start = Instant::now();
    let rows = overhead_probe(&[(2048, 2048)], &[8, 32], 15, 114)?;
    let secs = start.elapsed().as_secs_f64();
    let get = |r: usize, m: Method| {
        rows.iter()
            .find(|x| x.r == r && x.method == m)
            .expect("row present")
    };
    let mut ordering = true;
    let mut parts = Vec::new();
    for r in [8, 32] {
        let (s, f) = (get(r, Method::RefLoRaS), get(r, Method::RefLoRa));
        ordering &= s.median_step_ns <= f.median_step_ns;
        parts.push(format!(
            "r={r}: step reflora-s {} ns, reflora {} ns",
            s.median_step_ns, f.median_step_ns
        ));
    }
    let growth = |m: Method| {
        get(32, m).median_refactor_ns as f64 / get(8, m).median_refactor_ns.max(1) as f64
    };
    let (full, scalar) = (growth(Method::RefLoRa), growth(Method::RefLoRaS));
    let v = Verdict {
        pass: ordering && full >= 2.0 && scalar <= 6.0 * 4.0,
        detail: format!(
            "{}; refactor growth r=8 to 32: reflora {full:.2}x (>= 2), reflora-s {scalar:.2}x (<= 24)",
            parts.join(", ")
        ),
    };
    Ok(with_budget(v, secs, 120.0))
}

fn main() -> ExitCode {
    let mut verdicts: Vec<(String, Result<Verdict>, f64)> = Vec::new();
    let start = Instant::now();
    match ac01_03() {
        Ok(list) => {
            let secs = start.elapsed().as_secs_f64();
            for (name, v) in list {
                verdicts.push((name, Ok(v), secs));
            }
        }
        Err(e) => verdicts.push((
            "AC01-03 geometric mean".into(),
            Err(e),
            start.elapsed().as_secs_f64(),
        )),
    }
    let mut timed = |name: &str, f: &dyn Fn() -> Result<Verdict>| {
        let start = Instant::now();
        let v = f();
        verdicts.push((name.to_string(), v, start.elapsed().as_secs_f64()));
    };
    timed("AC04 small-eta branch", &ac04);
    timed("AC05 scalar branch", &ac05);
    timed("AC06 refactoring invariance", &ac06);
    timed("AC07 orthogonal invariance", &ac07);
    timed("AC08 dual-path equivalence", &ac08);
    timed("AC09 horizontal update", &ac09);
    timed("AC10 descent sandwich", &ac10);
    timed("AC11 loss and bound scan", &ac11);
    timed("AC12 factorization comparison", &ac12);
    timed("AC13 gradient correctness", &ac13);
    timed("AC14 overhead ordering", &ac14);

    let mut failures = 0;
    for (name, v, secs) in &verdicts {
        match v {
            Ok(v) => {
                if !v.pass {
                    failures += 1;
                }
                println!(
                    "{} {name} [{secs:.2} s]: {}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            Err(e) => {
                failures += 1;
                println!("FAIL {name} [{secs:.2} s]: error: {e}");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        verdicts.len() - failures,
        verdicts.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
