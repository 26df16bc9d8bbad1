//! Median per-step cost of each method relative to plain LoRA.
//!
//! ```text
//! cargo run --release --example overhead -- [m] [n]
//! ```

use reflora::harness::overhead_probe;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let m: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1024);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(m);
    let rows = overhead_probe(&[(m, n)], &[4, 8, 16, 32], 15, 1)?;
    println!(
        "{:>5}  {:<10} {:>14} {:>14} {:>8}",
        "r", "method", "step ns", "refactor ns", "ratio"
    );
    for row in rows {
        println!(
            "{:>5}  {:<10} {:>14} {:>14} {:>8.2}",
            row.r, row.method, row.median_step_ns, row.median_refactor_ns, row.ratio
        );
    }
    Ok(())
}
