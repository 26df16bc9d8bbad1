//! Factor pairs related by an invertible `P` give the same weight. The
//! refactored step moves orthogonally to that orbit; the plain step does not.

use reflora::harness::InitSpec;
use reflora::linalg::relative_error;
use reflora::optim::{
    horizontal_check, lora_gd_step, reflora_step, GradientPair, Method, StepConfig,
};
use reflora::problems::{make_mf, Problem};
use reflora::rng::{random_invertible, stream_rng, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = make_mf(30, 20, 3, 11)?;
    let init = InitSpec {
        sigma_a: 1.0,
        b: reflora::harness::BInit::Gaussian(0.2),
    };
    let f = init.sample(11, 30, 20, 3)?;

    let mut rng = stream_rng(11, Stream::Probe);
    let p = random_invertible(&mut rng, 3, 50.0);
    let g = f.refactored(&p)?;
    println!("loss at (A, B)        {:.10}", problem.loss_at(&f));
    println!("loss at (AP, BP⁻ᵀ)    {:.10}", problem.loss_at(&g));
    println!(
        "weight difference     {:.3e}",
        relative_error(&g.product(), &f.product())
    );

    let grads: GradientPair = problem.grad_pair(&f);
    let eta = 0.01;
    let plain = lora_gd_step(&f, &grads, eta);
    let refactored = reflora_step(
        &f,
        &grads,
        &StepConfig::new(eta, Method::RefLoRa),
        None,
        usize::MAX,
    )?
    .factors;
    for (name, next) in [("lora", &plain), ("reflora", &refactored)] {
        let ua = next.a() - f.a();
        let ub = next.b() - f.b();
        println!(
            "{name:<8} vertical component {:.3e}",
            horizontal_check(&f, (&ua, &ub))?
        );
    }
    Ok(())
}
