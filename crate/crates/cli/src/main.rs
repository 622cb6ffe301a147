mod output;
mod run;
mod spec;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use output::Format;
use spec::{ExperimentSpec, Mode};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    #[error("invariant violations:\n  {}", .0.join("\n  "))]
    Violation(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Violation(_) => 1,
            _ => 2,
        }
    }
}

/// Batched priority lock experiments: simulation sweeps, native
/// benchmarks and verification suites.
#[derive(Parser, Debug)]
#[command(name = "batchlock", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML experiment file; built-in defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for result files and the manifest.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a simulation sweep.
    Sim {
        #[command(flatten)]
        run: RunArgs,
        /// Worker threads for simulation cells (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Measure uncontended overhead and contended delays on this machine.
    Bench {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the stress and exhaustive interleaving suites.
    Verify {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Normalize and aggregate result files into a comparison table.
    Summarize {
        /// Metrics files written by `sim` or `bench`.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn load(run: &RunArgs, mode: Mode) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &run.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seeds) = &run.seeds {
        spec.seeds = spec::parse_seeds(seeds).map_err(|e| CliError::Config(vec![format!("--seeds: {e}")]))?;
    }
    spec.validate(mode)?;
    output::ensure_dir(&run.out)?;
    Ok(spec)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sim { run, threads } => {
            if threads == Some(0) {
                return Err(CliError::Config(vec!["--threads must be positive".into()]));
            }
            let spec = load(&run, Mode::Sim)?;
            run::sim(&spec, &run.out, run.format, threads)
        }
        Command::Bench { run } => {
            let spec = load(&run, Mode::Bench)?;
            run::bench(&spec, &run.out, run.format)
        }
        Command::Verify { run } => {
            let spec = load(&run, Mode::Verify)?;
            run::verify(&spec, &run.out, run.format)
        }
        Command::Summarize { files, format } => {
            let mut rows = Vec::new();
            for f in &files {
                rows.extend(output::read_metrics(f)?);
            }
            let cells = summary::summarize(rows)?;
            match format {
                Format::Csv => print!("{}", summary::render(&cells)),
                Format::Json => println!(
                    "{}",
                    serde_json::to_string_pretty(&cells).map_err(|e| CliError::Io(e.to_string()))?
                ),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
