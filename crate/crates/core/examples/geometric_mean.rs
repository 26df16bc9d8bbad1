//! The balancing refactor of a random factor pair.
//!
//! Computes `S̃` two ways, applies it, and shows that the refactored pair has
//! equal Gram matrices while `A·Bᵀ` is untouched.

use reflora::linalg::SpdMatrix;
use reflora::linalg::{nonsym_psd_sqrt, nuclear_norm, relative_error};
use reflora::refactor::{c_tilde, g_objective, geometric_mean_s, LowRankFactors};
use reflora::rng::{gaussian_matrix, stream_rng, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (m, n, r) = (40, 30, 5);
    let mut rng = stream_rng(7, Stream::Probe);
    // Deliberately unbalanced: A is ten times larger than B.
    let f = LowRankFactors::new(
        gaussian_matrix(&mut rng, m, r, 3.0),
        gaussian_matrix(&mut rng, n, r, 0.3),
    )?;

    let s = geometric_mean_s(&f)?;
    let (x, y) = f.gram_pair()?;
    let other = x.inverse()?.as_matrix() * nonsym_psd_sqrt(&x, &y)?;
    println!(
        "closed forms differ by      {:.3e}",
        relative_error(&other, s.as_matrix())
    );

    let balanced = f.refactored_by(&s)?;
    println!(
        "Gram gap before / after     {:.3e} / {:.3e}",
        f.gram_gap(),
        balanced.gram_gap()
    );
    println!(
        "product change              {:.3e}",
        relative_error(&balanced.product(), &f.product())
    );

    let at_identity = g_objective(&f, &SpdMatrix::identity(r))?;
    let at_mean = g_objective(&f, &s)?;
    println!("g(I)                        {at_identity:.6}");
    println!("g(S̃)                        {at_mean:.6}");
    println!(
        "2·nuclear norm of A·Bᵀ      {:.6}",
        2.0 * nuclear_norm(&f.product())
    );
    println!("c_tilde                     {:.6}", c_tilde(&f));
    Ok(())
}
