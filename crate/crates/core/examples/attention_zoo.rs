//! Runs every attention scheme on one random image and prints output norms
//! and analytic costs side by side.

use concertormer::bench::Variant;
use concertormer::zoo::{csa_prototype, self_attention, transposed_sa, window_msa, ProjWeights};
use concertormer::{Dist, Tensor};

fn main() -> concertormer::Result<()> {
    let (h, w, d, k) = (16, 16, 8, 4);
    let x = Tensor::<f64>::from_seed(1, &[h, w, d], Dist::Gaussian)?;
    let p = ProjWeights::random(d, 2)?;
    let outs = [
        ("sa", self_attention(&x.reshape(&[h * w, d])?, &p)?.reshape(&[h, w, d])?),
        ("wmsa", window_msa(&x, k, &p)?),
        ("transposed", transposed_sa(&x.reshape(&[h * w, d])?, &p)?.1.reshape(&[h, w, d])?),
        ("prototype", csa_prototype(&x, k, 1.0, 1.0, &p)?),
    ];
    println!("{:<12} {:>10} {:>12}", "scheme", "max |out|", "GMACs@256²");
    for (name, out) in &outs {
        let cost = match *name {
            "sa" => Variant::SelfAttention.cost(256, 256, d, k)?,
            "wmsa" => Variant::WindowMsa.cost(256, 256, d, k)?,
            "transposed" => Variant::Transposed.cost(256, 256, d, k)?,
            _ => Variant::CsaSplit.cost(256, 256, d, k)?,
        };
        println!("{:<12} {:>10.4} {:>12.4}", name, out.max_abs(), cost.gflops());
    }
    Ok(())
}
