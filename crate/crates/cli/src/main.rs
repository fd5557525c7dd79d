use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lat_cli::manifest::ExperimentManifest;
use lat_cli::report::{self, ReportKind};
use lat_cli::runner::{self, RunOutcome};
use lat_cli::store::Store;
use lat_core::error::Error;

/// Robust fine-tuning experiments: backdoor implantation, adversarial
/// and latent-space defenses, and tradeoff reports.
#[derive(Parser)]
#[command(name = "lat", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a manifest: poison, pretrain, sweep, and measure.
    Run {
        manifest: PathBuf,
        /// Discard any existing store for this manifest first.
        #[arg(long)]
        force: bool,
    },
    /// Emit a CSV table and SVG figure from a finished store.
    Report {
        store: PathBuf,
        /// pareto-novel, pareto-backdoor, delta-over-time, or layer-sweep.
        kind: String,
    },
    /// Train at every valid latent split with a norm-scaled budget.
    SweepLayers { manifest: PathBuf },
    /// Check a manifest without executing it.
    Validate { manifest: PathBuf },
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { manifest, force } => {
            let (dir, outcome) = runner::run(&manifest, force)?;
            match outcome {
                RunOutcome::PretrainOnly => {
                    println!("sweep grid is empty; store at {} holds the pretrained model", dir.display());
                }
                RunOutcome::Completed { new_runs, skipped } => {
                    println!(
                        "completed {new_runs} runs ({skipped} already stored) at {}",
                        dir.display()
                    );
                }
                RunOutcome::UpToDate => {
                    println!("store at {} is already up to date with this manifest", dir.display());
                }
            }
        }
        Command::Report { store, kind } => {
            let kind = ReportKind::parse(&kind)?;
            let store = Store::open(&store)?;
            let (csv, svg) = report::generate(&store, kind)?;
            println!("{}", csv.display());
            println!("{}", svg.display());
        }
        Command::SweepLayers { manifest } => {
            let (csv, svg) = runner::sweep_layers(&manifest)?;
            println!("{}", csv.display());
            println!("{}", svg.display());
        }
        Command::Validate { manifest } => {
            let parsed = ExperimentManifest::load(&manifest)?;
            let cells = parsed.sweep.modes.len()
                * parsed.sweep.epsilons.len()
                * parsed.sweep.seeds.len()
                * parsed.sweep.splits.len();
            println!(
                "manifest ok: {} task, {cells} sweep cells, store {}",
                parsed.task.kind,
                parsed.store_dir(&manifest).display()
            );
        }
    }
    Ok(())
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Format { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
