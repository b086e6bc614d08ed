use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gradlab::cli::{error_record, run_config_file, Overrides, RunSummary};
use gradlab::Error;

/// Run a gradient-leakage experiment described by a JSON config.
#[derive(Debug, Parser)]
#[command(name = "gradlab", version)]
struct Args {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Worker threads for trial-level parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(args: &Args) -> Result<RunSummary, Error> {
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
        repeats: args.repeats,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = args.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        return pool.install(|| run_config_file(&args.config, &overrides));
    }
    run_config_file(&args.config, &overrides)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(summary) => {
            println!(
                "{} rows -> {} ({})",
                summary.rows,
                summary.out_dir.display(),
                summary.files.join(", ")
            );
            if summary.failed_checks > 0 {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(2)
        }
    }
}
