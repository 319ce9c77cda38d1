//! Analytic cost and wall time of each attention scheme as the image grows.

use concertormer::bench::{run_bench, BenchConfig};

fn main() {
    let cfg = BenchConfig { sizes: vec![(32, 32), (64, 64), (128, 128)], trials: 3, ..BenchConfig::default() };
    print!("{}", run_bench(&cfg));
}
