use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use smrlab::output::FileError;
use smrlab::{run_file, Kind, RunError};

/// Run one smrlab experiment and write its CSV table and JSON manifest.
#[derive(Parser)]
#[command(name = "smrlab", version)]
struct Args {
    /// simulate | verify-transform | parabolicity | smr-norms | picard | tent | sweep
    kind: Kind,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        eprintln!("smrlab: cannot start worker pool: {e}");
        return ExitCode::from(4);
    }
    match run_file(args.kind, &args.config, &args.out, workers) {
        Ok(report) => {
            for w in &report.outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", report.csv.display());
            if report.outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &report.outcome.failures {
                    eprintln!("invariant failed: {f}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("smrlab: {e}");
            ExitCode::from(match e {
                FileError::Run(RunError::Config(_)) => 2,
                FileError::Run(RunError::BlowUp { .. }) => 3,
                FileError::Run(RunError::Numeric { .. }) => 1,
                FileError::Io { .. } => 4,
            })
        }
    }
}
