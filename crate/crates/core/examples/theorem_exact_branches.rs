//! Which refactoring the exact minimiser picks as the learning rate varies.
//!
//! Below `1/(C̃·L)` the minimiser is a multiple `γ·S̃` of the balanced
//! solution; at and above it, and for negative rates, it is `S̃` itself.

use reflora::refactor::LowRankFactors;
use reflora::refactor::{c_tilde, optimal_s, RefactorMode, RootChoice};
use reflora::rng::{gaussian_matrix, stream_rng, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = stream_rng(3, Stream::Probe);
    let f = LowRankFactors::new(
        gaussian_matrix(&mut rng, 12, 3, 1.0),
        gaussian_matrix(&mut rng, 9, 3, 1.0),
    )?;
    let lipschitz = 1.0;
    let boundary = 1.0 / (c_tilde(&f) * lipschitz);
    println!("boundary 1/(C̃L) = {boundary:.6e}");
    println!(
        "{:>12}  {:>6}  {:>15}  {:>12}  {:>12}",
        "eta", "root", "branch", "g(S)", "1/(L·eta)"
    );
    for scale in [-1.0, 0.05, 0.25, 0.5, 0.9, 1.0, 2.0] {
        let eta = scale * boundary;
        for root in [RootChoice::Plus, RootChoice::Minus] {
            let res = optimal_s(&f, eta, RefactorMode::TheoremExact { lipschitz, root })?;
            println!(
                "{:>12.4e}  {:>6}  {:>15}  {:>12.6}  {:>12.6}",
                eta,
                format!("{root:?}"),
                format!("{:?}", res.branch),
                res.g_value,
                1.0 / (lipschitz * eta)
            );
        }
    }
    Ok(())
}
