use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use confspace::harness::{self, ExperimentConfig, Format, HarnessError};

#[derive(Parser)]
#[command(name = "confspace", version, about = "Run verification experiments on Poisson configuration spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment.
    Run {
        /// One of: laplace, series-vs-mc, mecke, ibp, dirichlet, factorization,
        /// weitzenbock, adjointness, semigroup-ou, generator, bounds, acceptance-all.
        experiment: String,
        /// TOML config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Output file for the run record.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Print the resolved default config.
    Defaults,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Defaults => {
            print!("{}", toml::to_string(&ExperimentConfig::default()).expect("config serializes"));
            ExitCode::SUCCESS
        }
        Command::Run { experiment, config, seed, samples, out, format } => {
            let mut cfg = match config {
                Some(p) => match ExperimentConfig::load(&p) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("{e}");
                        return ExitCode::from(2);
                    }
                },
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = samples {
                cfg.samples = n;
            }
            if out.is_some() {
                cfg.out = out;
            }
            if let Some(f) = format {
                cfg.format = f;
            }
            let record = match harness::run(&experiment, &cfg) {
                Ok(r) => r,
                Err(e @ HarnessError::Config(_)) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            for c in &record.checks {
                println!("{}", harness::describe(c));
            }
            if let Some(path) = &record.config.out {
                if let Err(e) = harness::emit(&record, record.config.format, path) {
                    eprintln!("{e}");
                    return ExitCode::from(1);
                }
            }
            if record.pass {
                ExitCode::SUCCESS
            } else {
                for c in record.failures() {
                    eprintln!("failed: {}", serde_json::to_string(c).expect("check serializes"));
                }
                ExitCode::from(1)
            }
        }
    }
}
