use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use crlbench::experiment::{cmd_generate_data, cmd_plot, cmd_report, cmd_run, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "crlbench", version, about = "Continual representation learning benchmark")]
struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset(s) as manifest + feature files.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Accuracy-trajectory figures (SVG + PNG) from one or more runs.
    Plot {
        /// Run directories or aggregate results.json files.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Accuracy/forgetting table (CSV + markdown) from one or more runs.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("CRLBENCH_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("CRLBENCH_THREADS must be a positive integer, got {value:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenerateData { config, output } => {
            let (cfg, _) = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                output,
                seeds: None,
                quiet: cli.quiet,
            };
            cmd_generate_data(&cfg, &config_dir(&config), &opts)?;
        }
        Command::Run { config, output, seeds } => {
            let (cfg, text) = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                output,
                seeds,
                quiet: cli.quiet,
            };
            cmd_run(&cfg, &text, &config_dir(&config), &opts)?;
        }
        Command::Plot { results, output } => {
            for f in cmd_plot(&results, &output)? {
                if !cli.quiet {
                    println!("{}", f.display());
                }
            }
        }
        Command::Report { results, output } => {
            let files = cmd_report(&results, &output)?;
            if !cli.quiet {
                print!("{}", std::fs::read_to_string(&files[1])?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
