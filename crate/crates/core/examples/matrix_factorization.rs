//! LoRA, ScaledGD and RefLoRA on a rank-8 matrix factorization problem at two
//! learning rates, from `A₀ ~ N(0, 1)`, `B₀ = 0`.
//!
//! ```text
//! cargo run --release --example matrix_factorization -- [iterations] [out.csv]
//! ```
//!
//! Prints a short summary and, if a path is given, writes the wide
//! comparison table for plotting.

use std::fs::File;
use std::io::BufWriter;

use reflora::harness::{compare, write_compare_csv, ProblemSpec, RunSpec};
use reflora::optim::{Method, StepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let out = args.next();

    let problem = ProblemSpec::Mf {
        m: 128,
        n: 100,
        r: 8,
        seed: 42,
    };
    let mut specs = Vec::new();
    for eta in [0.01, 0.03] {
        for method in [Method::LoRaGd, Method::ScaledGd, Method::RefLoRa] {
            specs.push(RunSpec::new(
                problem,
                8,
                StepConfig::new(eta, method),
                iterations,
            ));
        }
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let traces = compare(&specs, threads)?;

    println!(
        "{:<22} {:>14} {:>14} {:>10}",
        "run", "initial loss", "final loss", "diverged"
    );
    for t in &traces {
        let div = t
            .diverged_at
            .map_or("-".to_string(), |s| format!("step {s}"));
        println!(
            "{:<22} {:>14.6e} {:>14.6e} {:>10}",
            t.label,
            t.initial_loss,
            t.final_loss(),
            div
        );
    }
    for t in &traces {
        let last = t.records.last().expect("non-empty trace");
        println!(
            "{:<22} |A| = {:>10.4e}  |B| = {:>10.4e}  gap = {:.3e}",
            t.label, last.norm_a, last.norm_b, last.balance_gap
        );
    }

    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(&path)?);
        write_compare_csv(&traces, &mut w)?;
        println!("wrote {path}");
    }
    Ok(())
}
