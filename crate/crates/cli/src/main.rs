use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use circuit_reuse_cli::{commands, CliError, Run, RunConfig};

#[derive(Parser)]
#[command(
    name = "circuit-reuse",
    version,
    about = "Circuit extraction and reuse analysis on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the model and write the scheduled checkpoints.
    Train,
    /// Extract per-example circuits at every K.
    Extract,
    /// Within-task reuse, composition, layer CDFs and necessity.
    Analyze,
    /// Cross-task overlap, drop matrix, decomposition and selective ablation.
    Crosstask,
    /// Reuse and necessity at every scheduled checkpoint.
    Sweep,
    /// Collect the reports into summary.json.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut config = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let run = Run::new(config)?;
    match cli.command {
        Command::Train => commands::cmd_train(&run),
        Command::Extract => commands::cmd_extract(&run),
        Command::Analyze => commands::cmd_analyze(&run),
        Command::Crosstask => commands::cmd_crosstask(&run),
        Command::Sweep => commands::cmd_sweep(&run),
        Command::Report => commands::cmd_report(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
