//! Shuffling pixels leaves the transposed attention map unchanged; swapping
//! two pixels inside a block changes concerto attention.

use concertormer::permtest::{run_permtest, PermtestConfig};

fn main() -> concertormer::Result<()> {
    let report = run_permtest(&PermtestConfig { trials: 100, ..PermtestConfig::default() })?;
    println!("{report}");
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
