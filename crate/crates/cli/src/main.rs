use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clta::{dump_config, emit_plots, load_config, read_results, run_dir, run_experiment, write_results};

#[derive(Parser)]
#[command(name = "clta", version, about = "Class-incremental distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write tables and charts.
    Run {
        config: PathBuf,
        /// Run seeds one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Validate a config and print its fully defaulted form.
    Validate { config: PathBuf },
    /// Regenerate charts from a run directory.
    Plot { run_dir: PathBuf },
    /// Print the aggregate table of a run directory.
    Report { run_dir: PathBuf },
}

const VALIDATION_FAILED: u8 = 1;
const RUN_FAILED: u8 = 2;

fn run(config: &Path, sequential: bool) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(VALIDATION_FAILED);
        }
    };
    let dir = run_dir(&cfg);
    let table = run_experiment(&cfg, !sequential);
    let outcome = std::fs::create_dir_all(&dir)
        .map_err(anyhow::Error::from)
        .and_then(|_| std::fs::write(dir.join("config.toml"), dump_config(&cfg)).map_err(Into::into))
        .and_then(|_| write_results(&table, &dir).map_err(Into::into))
        .and_then(|_| emit_plots(&table, &dir.join("plots")).map_err(Into::into));
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        return ExitCode::from(RUN_FAILED);
    }
    print!("{}", table.report());
    println!("results written to {}", dir.display());
    if table.any_failed() {
        eprintln!("error: some runs failed; see results.json");
        return ExitCode::from(RUN_FAILED);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, sequential } => run(&config, sequential),
        Command::Validate { config } => match load_config(&config) {
            Ok(cfg) => {
                print!("{}", dump_config(&cfg));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(VALIDATION_FAILED)
            }
        },
        Command::Plot { run_dir } => match read_results(&run_dir).and_then(|t| emit_plots(&t, &run_dir.join("plots"))) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(RUN_FAILED)
            }
        },
        Command::Report { run_dir } => match read_results(&run_dir) {
            Ok(t) => {
                print!("{}", t.report());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(RUN_FAILED)
            }
        },
    }
}
