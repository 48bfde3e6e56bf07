use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use obstacle_mfg::cli::{apply_overrides, load_config, run, Mode, Overrides, EXIT_CONFIG};

/// Penalized mean-field obstacle solver.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured mode (solve, continue, sweep, uniqueness, validate).
    #[arg(long)]
    mode: Option<Mode>,
    /// Overrides the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppresses progress messages.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let overrides = Overrides { mode: args.mode, output_dir: args.output, seed: args.seed };
    let config = match load_config(&args.config).and_then(|c| apply_overrides(c, &overrides)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(&config, args.quiet) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
