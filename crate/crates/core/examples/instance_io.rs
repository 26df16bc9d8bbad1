//! Saving a problem instance to text and loading it back.

use reflora::harness::InitSpec;
use reflora::problems::{make_linreg, read_instance, write_instance, Instance};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inst = Instance::LinReg(make_linreg(4, 3, 6, 21)?);
    let mut text = Vec::new();
    write_instance(&inst, &mut text)?;
    let text = String::from_utf8(text)?;
    println!("{}", text.lines().take(4).collect::<Vec<_>>().join("\n"));
    println!("... {} lines in total", text.lines().count());

    let back = read_instance(text.as_bytes())?;
    let f = InitSpec::linreg_default().sample(21, 4, 3, 2)?;
    let (p, q) = (inst.as_problem(), back.as_problem());
    println!(
        "loss before / after reload: {:.12} / {:.12}",
        p.loss_at(&f),
        q.loss_at(&f)
    );
    println!("smoothness constant: {:?}", q.lipschitz());
    Ok(())
}
