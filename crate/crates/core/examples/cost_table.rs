//! Prints analytic cost of the lite ablation ladder at 256×256.

use concertormer::model::{count_cost, ModelConfig};

fn main() -> concertormer::Result<()> {
    println!("{:<8} {:>10} {:>10} {:>10} {:>10} {:>10}", "model", "GMACs", "linear", "attention", "fixed", "Mparams");
    for i in 0..=8 {
        let c = count_cost(&ModelConfig::ablation(i)?, 256, 256)?;
        println!(
            "{:<8} {:>10.2} {:>10.2} {:>10.2} {:>10.3} {:>10.2}",
            i,
            c.gflops(),
            c.linear as f64 / 1e9,
            c.attention as f64 / 1e9,
            c.fixed as f64 / 1e9,
            c.mparams()
        );
    }
    Ok(())
}
