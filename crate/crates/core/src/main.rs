use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedcomloc::harness::{self, ExperimentConfig, RunOptions};

/// Run a federated-training experiment described by a TOML file.
#[derive(Debug, Parser)]
#[command(name = "fedcomloc", version)]
struct Cli {
    /// Experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress the summary table.
    #[arg(long)]
    quiet: bool,
    /// Worker threads for running cells.
    #[arg(long)]
    threads: Option<usize>,
    /// Validate the file and list its cells without running anything.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let options = RunOptions {
        seed: cli.seed,
        output_dir: cli.out.clone(),
        quiet: cli.quiet,
        threads: cli.threads,
    };

    if cli.check {
        let config = match ExperimentConfig::load(&cli.config) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        };
        let violations = harness::validate_config(&config);
        if !violations.is_empty() {
            for v in &violations {
                eprintln!("invalid: {v}");
            }
            return ExitCode::from(2);
        }
        for cell in config.cells() {
            println!("{}", cell.name);
        }
        return ExitCode::SUCCESS;
    }

    match harness::run_experiment(&cli.config, &options) {
        Ok(report) => {
            if report.all_ok() {
                ExitCode::SUCCESS
            } else {
                for (name, err) in report.failures() {
                    eprintln!("cell {name} failed: {err}");
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
