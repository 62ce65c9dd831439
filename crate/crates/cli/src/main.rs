use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lse_core::benchmarks::{build_pool, write_csv_pool, Benchmark, BenchmarkSpec};
use lse_core::experiment::{emit_plot, read_trace, run_experiment, write_trace, ExperimentConfig};
use lse_core::LseError;

/// Active level-set estimation with MC-dropout surrogates.
#[derive(Parser)]
#[command(name = "lse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write `<out>/traces.csv`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render F1 curves (mean ± standard error) from trace CSVs as SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a benchmark pool as CSV (`x1..xd,y`).
    Pool {
        #[arg(long)]
        benchmark: Benchmark,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<LseError> for Failure {
    fn from(e: LseError) -> Self {
        match e {
            LseError::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let traces = run_experiment(&cfg)?;
            fs::create_dir_all(&out)?;
            let path = out.join("traces.csv");
            write_trace(&traces, &path)?;
            log::info!("wrote {}", path.display());
        }
        Command::Plot { traces, out } => {
            let mut rows = Vec::new();
            for path in &traces {
                rows.extend(read_trace(path)?);
            }
            emit_plot(&rows, &out)?;
        }
        Command::Pool {
            benchmark,
            dim,
            size,
            seed,
            out,
        } => {
            if dim == 0 {
                return Err(Failure::Config("config error: --dim must be >= 1".into()));
            }
            let mut spec = BenchmarkSpec::new(benchmark, dim, seed);
            if let Some(size) = size {
                spec.pool_size = size;
            }
            let pool = build_pool(&spec)?;
            write_csv_pool(&pool, BufWriter::new(File::create(&out)?))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
