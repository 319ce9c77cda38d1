//! Overfits the tiny model to one synthetic blur pair and prints the trace.

use concertormer::overfit::{run_overfit, OverfitConfig};

fn main() -> concertormer::Result<()> {
    let mut cfg = OverfitConfig::default();
    if let Some(lr) = std::env::args().nth(1) {
        cfg.lr = lr.parse().expect("learning rate");
    }
    if let Some(c) = std::env::args().nth(2) {
        cfg.noise_cells = c.parse().expect("noise cells");
    }
    let t = std::time::Instant::now();
    let report = run_overfit::<f32>(&cfg, |step, loss| {
        if step % 20 == 0 {
            println!("step {step:4}  loss {loss:.5}");
        }
    })?;
    println!(
        "initial {:.5}  final {:.5}  reduction {:.1}%  ({:.1?})",
        report.initial(),
        report.last(),
        100.0 * report.reduction(),
        t.elapsed()
    );
    Ok(())
}
