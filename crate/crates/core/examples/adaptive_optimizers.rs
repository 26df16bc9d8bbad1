//! Adam and AdamW with and without refactoring on the matrix factorization
//! problem.

use reflora::harness::{compare, ProblemSpec, RunSpec};
use reflora::optim::{Method, OptimizerKind, StepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = ProblemSpec::Mf {
        m: 64,
        n: 48,
        r: 4,
        seed: 5,
    };
    let mut specs = Vec::new();
    for optimizer in [OptimizerKind::Adam, OptimizerKind::AdamW] {
        for method in [Method::LoRaGd, Method::RefLoRa, Method::RefLoRaS] {
            let mut step = StepConfig::new(0.01, method).with_optimizer(optimizer);
            if optimizer == OptimizerKind::AdamW {
                step.adam.weight_decay = 1e-3;
            }
            let mut spec = RunSpec::new(problem, 4, step, 600);
            spec.log_every = 100;
            specs.push(spec);
        }
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    for t in compare(&specs, threads)? {
        let losses: Vec<String> = t
            .records
            .iter()
            .map(|r| format!("{:.3e}", r.loss))
            .collect();
        println!("{:<24} {}", t.label, losses.join("  "));
    }
    Ok(())
}
