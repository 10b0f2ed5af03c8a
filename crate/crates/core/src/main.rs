use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmf_core::driver::{self, CliOverrides, Preset, RunConfig, RunMode};
use mmf_core::MmfError;

#[derive(Parser)]
#[command(name = "mmf", version, about = "Spectral-element MMF moist atmosphere simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a standard or MMF simulation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// desk or paper
        #[arg(long)]
        preset: Option<String>,
        /// standard or mmf
        #[arg(long)]
        mode: Option<String>,
        /// SSP worker threads
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the cost model and write the report.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two snapshots field by field.
    DiffSnapshots {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
    },
}

fn load(path: &PathBuf, cli: &CliOverrides) -> Result<RunConfig, MmfError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MmfError::Config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text, cli)
}

fn execute(command: Command) -> Result<ExitCode, MmfError> {
    match command {
        Command::Run { config, preset, mode, workers, seed } => {
            let mode = mode.as_deref().map(RunMode::parse).transpose()?;
            if mode == Some(RunMode::Analyze) {
                return Err(MmfError::Config("use the analyze subcommand for mode analyze".into()));
            }
            let cli = CliOverrides { preset: preset.as_deref().map(Preset::parse).transpose()?, mode, workers, seed };
            let cfg = load(&config, &cli)?;
            let summary = driver::run(&cfg)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("{} steps written to {}", summary.steps, summary.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { config } => {
            let cli = CliOverrides { mode: Some(RunMode::Analyze), ..Default::default() };
            let cfg = load(&config, &cli)?;
            let summary = driver::run(&cfg)?;
            if let Some(report) = summary.cost {
                print!("{}", report.to_text());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DiffSnapshots { a, b, tol } => {
            let (sa, sb) = (driver::read_snapshot(&a)?, driver::read_snapshot(&b)?);
            let diffs = driver::diff_snapshots(&sa, &sb)?;
            let mut ok = true;
            for (name, d) in &diffs {
                println!("{name} {d:e}");
                ok &= *d <= tol;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
