//! One refactored step on a 2×2 rank-one regression, over a grid of
//! learning rates, next to the quadratic upper bound.
//!
//! ```text
//! cargo run --release --example bound_scan -- [seed] [out.csv]
//! ```

use std::fs::File;
use std::io::BufWriter;

use reflora::harness::{bound_scan, write_bound_scan_csv, BoundScanSpec, ScanMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let rows = bound_scan(&BoundScanSpec::default_with_seed(seed))?;

    for mode in [ScanMode::Identity, ScanMode::TheoremExact] {
        let best = rows
            .iter()
            .filter(|r| r.mode == mode)
            .min_by(|a, b| a.true_loss.total_cmp(&b.true_loss))
            .expect("non-empty scan");
        let slack = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.upper_bound + r.remainder - r.true_loss)
            .fold(f64::INFINITY, f64::min);
        println!(
            "{:<14} best loss {:.6} at eta {:+.3e}, smallest bound slack {:.3e}",
            mode.name(),
            best.true_loss,
            best.eta,
            slack
        );
    }

    if let Some(path) = args.next() {
        write_bound_scan_csv(&rows, &mut BufWriter::new(File::create(&path)?))?;
        println!("wrote {path}");
    }
    Ok(())
}
