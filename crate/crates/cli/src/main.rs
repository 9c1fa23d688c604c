use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Result;
use clap::{Parser, Subcommand};
use estimator_cli::commands::{self, ScalingOptions};
use estimator_cli::{exit_code, JobConfig};

#[derive(Parser)]
#[command(name = "estimator", version, about = "Train, evaluate, serve and benchmark canned models on CSV data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train up to the configured number of steps.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate the latest checkpoint and print its metrics.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write one JSON line of predictions per CSV row.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Export the latest checkpoint for serving.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Measure global steps per second at several worker counts.
    BenchmarkScaling {
        /// Job to benchmark; defaults to a built-in compute-bound model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        num_ps: usize,
        /// Wall-time budget per worker count, in seconds.
        #[arg(long, default_value_t = 30.0)]
        budget_secs: f64,
        /// CSV output path.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "scaling-runs")]
        scratch: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let value = match cli.command {
        Command::Train { config } => commands::train(&JobConfig::load(&config)?)?,
        Command::Evaluate { config } => commands::evaluate(&JobConfig::load(&config)?)?,
        Command::Predict { config, input, output } => {
            commands::predict(&JobConfig::load(&config)?, &input, &output)?
        }
        Command::Export { config, dir } => commands::export(&JobConfig::load(&config)?, &dir)?,
        Command::BenchmarkScaling { config, workers, num_ps, budget_secs, output, scratch, seed } => {
            let job = config.as_deref().map(JobConfig::load).transpose()?;
            let opts = ScalingOptions {
                workers,
                num_ps,
                budget: Duration::from_secs_f64(budget_secs),
                scratch,
                seed,
            };
            let rows = commands::benchmark(job.as_ref(), &opts)?;
            print!("{}", commands::scaling_table(&rows));
            if let Some(path) = output {
                commands::write_csv(&path, &rows)?;
            }
            return Ok(());
        }
    };
    println!("{value}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
