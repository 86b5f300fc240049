mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "saddlefem", version, about = "Mixed finite elements for Stokes and hydrostatic Stokes")]
struct Cli {
    /// cap on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// validate the config and exit
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and validate the meshes of every level; write VTK
    Mesh { config: PathBuf },
    /// Estimate the discrete inf-sup constant per level
    Infsup { config: PathBuf },
    /// Resolvent error rates and the dual-norm |λ| sweep
    Resolvent { config: PathBuf },
    /// Evolve every level and record the trajectory
    Evolve { config: PathBuf },
    /// Convergence study at t_end
    Converge { config: PathBuf },
    /// Time-weighted error profile on the finest level
    Singularity { config: PathBuf },
    /// Oracle self-check and structural invariants
    Selftest { config: Option<PathBuf> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    let (name, path) = match &cli.command {
        Command::Mesh { config } => ("mesh", Some(config)),
        Command::Infsup { config } => ("infsup", Some(config)),
        Command::Resolvent { config } => ("resolvent", Some(config)),
        Command::Evolve { config } => ("evolve", Some(config)),
        Command::Converge { config } => ("converge", Some(config)),
        Command::Singularity { config } => ("singularity", Some(config)),
        Command::Selftest { config } => ("selftest", config.as_ref()),
    };
    match run::run(name, path.map(|p| p.as_path()), cli.dry_run) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if outcome.pass {
                println!("PASS");
                ExitCode::SUCCESS
            } else {
                println!("FAIL");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
