//! Command-line front end. Exit codes: 0 success, 1 property or golden
//! failure, 2 usage or configuration error, 3 I/O error, 4 undecodable image.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use concertormer::bench::{run_bench, BenchConfig};
use concertormer::golden;
use concertormer::infer::infer_image;
use concertormer::model::{count_cost, ModelConfig};
use concertormer::overfit::{run_overfit, Optimizer, OverfitConfig, Schedule};
use concertormer::permtest::{run_permtest, PermtestConfig};
use concertormer::Error;

#[derive(Parser)]
#[command(name = "concertormer", version, about = "Concerto attention analysis tools")]
struct Cli {
    /// Model config: JSON file, preset (lite, full, tiny) or ablationN.
    #[arg(long, global = true)]
    config: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run in 64-bit arithmetic where the command supports it.
    #[arg(long = "f64", global = true)]
    f64: bool,
    /// Output path (CSV, PNG, trace or report, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analytic multiply-accumulates and parameters.
    Cost {
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Print the whole ablation ladder instead of one config.
        #[arg(long)]
        ablations: bool,
    },
    /// Attention scaling benchmark.
    Bench {
        /// Comma-separated variants; empty for none.
        #[arg(long, value_delimiter = ',', default_value = "sa,wmsa,transposed,csa-split,csa-cdc")]
        variants: Vec<String>,
        /// Comma-separated HxW sizes.
        #[arg(long, value_delimiter = ',', default_value = "32x32,64x64,128x128")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Golden-vector suite management.
    Golden {
        #[command(subcommand)]
        action: GoldenCmd,
    },
    /// Permutation experiments on transposed and concerto attention.
    Permtest {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Restore a PNG image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        tile: usize,
    },
    /// Overfit the tiny model to one synthetic blur pair.
    Overfit {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = Opt::Adamw)]
        optimizer: Opt,
        #[arg(long, value_enum, default_value_t = Sched::Constant)]
        schedule: Sched,
    },
}

#[derive(Subcommand)]
enum GoldenCmd {
    /// Write the default suite.
    Gen { dir: PathBuf },
    /// Recompute a suite and compare.
    Check { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sched {
    Constant,
    Cosine,
}

enum Failure {
    Property(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::MissingParam(_) => 3,
        Error::Image(_) => 4,
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) | Error::Json(_) => 2,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize), Error> {
    s.split_once('x')
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
        .ok_or_else(|| Error::InvalidArgument(format!("size `{s}` is not HxW")))
}

fn load_config(cli: &Cli, default: &str) -> Result<ModelConfig, Error> {
    ModelConfig::load(cli.config.as_deref().unwrap_or(default))
}

fn cost_line(name: &str, c: &concertormer::cost::Cost) -> String {
    format!(
        "{:<10} {:>10.2} {:>10.2} {:>10.2} {:>10.3} {:>10.2}\n",
        name,
        c.gflops(),
        c.linear as f64 / 1e9,
        c.attention as f64 / 1e9,
        c.fixed as f64 / 1e9,
        c.mparams()
    )
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Cost { height, width, ablations } => {
            let mut text = format!(
                "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
                "config", "GMACs", "linear", "attention", "fixed", "Mparams"
            );
            if *ablations {
                for i in 0..=8 {
                    text += &cost_line(&format!("ablation{i}"), &count_cost(&ModelConfig::ablation(i)?, *height, *width)?);
                }
            } else {
                let name = cli.config.as_deref().unwrap_or("lite");
                text += &cost_line(name, &count_cost(&load_config(cli, "lite")?, *height, *width)?);
            }
            emit(out, &text)
        }
        Cmd::Bench { variants, sizes, dim, k, trials } => {
            let cfg = BenchConfig {
                variants: variants.iter().filter(|v| !v.is_empty()).map(|v| v.parse()).collect::<Result<_, Error>>()?,
                sizes: sizes.iter().map(|s| parse_size(s)).collect::<Result<_, Error>>()?,
                dim: *dim,
                k: *k,
                seed: cli.seed,
                trials: *trials,
                ..BenchConfig::default()
            };
            let report = run_bench(&cfg);
            print!("{report}");
            if let Some(p) = out {
                std::fs::write(p, report.to_csv())?;
            }
            Ok(())
        }
        Cmd::Golden { action: GoldenCmd::Gen { dir } } => {
            let cases = golden::default_suite(cli.seed);
            golden::generate(dir, &cases)?;
            println!("wrote {} cases to {}", cases.len(), dir.display());
            Ok(())
        }
        Cmd::Golden { action: GoldenCmd::Check { dir } } => {
            let results = golden::check(dir)?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            let mut text: String = results.iter().map(|r| format!("{r}\n")).collect();
            text += &format!("{} passed, {failed} failed\n", results.len() - failed);
            emit(out, &text)?;
            if failed > 0 {
                return Err(Failure::Property(format!("{failed} golden case(s) failed")));
            }
            Ok(())
        }
        Cmd::Permtest { trials } => {
            let report = run_permtest(&PermtestConfig { trials: *trials, seed: cli.seed, ..PermtestConfig::default() })?;
            emit(out, &format!("{report}\n"))?;
            if !report.passed() {
                return Err(Failure::Property("permutation dichotomy not observed".into()));
            }
            Ok(())
        }
        Cmd::Infer { weights, input, tile } => {
            let output = out.ok_or_else(|| Error::InvalidArgument("infer needs --out <png>".into()))?;
            let cfg = load_config(cli, "lite")?;
            if !weights.exists() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("weights {} not found", weights.display()),
                ))
                .into());
            }
            infer_image(&cfg, weights, input, output, *tile, cli.f64)?;
            Ok(())
        }
        Cmd::Overfit { steps, lr, optimizer, schedule } => {
            let cfg = OverfitConfig {
                model: load_config(cli, "tiny")?,
                seed: cli.seed,
                steps: *steps,
                lr: *lr,
                optimizer: match optimizer {
                    Opt::Sgd => Optimizer::Sgd,
                    Opt::Adamw => Optimizer::adamw(),
                },
                schedule: match schedule {
                    Sched::Constant => Schedule::Constant,
                    Sched::Cosine => Schedule::Cosine,
                },
                ..OverfitConfig::default()
            };
            let print = |step: usize, loss: f64| println!("step {step:4}  loss {loss:.6}");
            let report = if cli.f64 { run_overfit::<f64>(&cfg, print)? } else { run_overfit::<f32>(&cfg, print)? };
            if let Some(p) = out {
                let trace: String = report.trace.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
                std::fs::write(p, format!("step,loss\n{trace}"))?;
            }
            match report.succeeded() {
                None => println!("no steps taken"),
                Some(ok) => {
                    println!(
                        "initial {:.6}  final {:.6}  reduction {:.1}%",
                        report.initial(),
                        report.last(),
                        100.0 * report.reduction()
                    );
                    if !ok {
                        return Err(Failure::Property("loss did not halve".into()));
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
