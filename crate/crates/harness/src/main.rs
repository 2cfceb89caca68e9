use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use felicia_harness::{
    emit_plot_data, resume, run_experiment, validate_config, ConfigError, Figure, RunError,
    RunManifest,
};

#[derive(Parser)]
#[command(
    name = "felicia",
    version,
    about = "Federated GAN experiments with a synthetic-only central adversary"
)]
struct Cli {
    /// Sequential, bitwise-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML or JSON config.
    Run { config: PathBuf },
    /// Continue an interrupted run.
    Resume { manifest: PathBuf },
    /// Write plot-ready CSVs for a finished run.
    Plot {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        figure: Figure,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config } => {
            let mut config = validate_config(&config)?;
            if cli.deterministic {
                config.deterministic = true;
            }
            if let Some(out) = cli.out {
                config.output_dir = Some(out);
            }
            if let Some(seed) = cli.seed {
                config.seeds = vec![seed];
            }
            let manifest = run_experiment(&config)?;
            println!("{}", manifest.path().display());
        }
        Command::Resume { manifest } => {
            let manifest = resume(&manifest)?;
            println!("{}", manifest.path().display());
        }
        Command::Plot { manifest, figure } => {
            let manifest =
                RunManifest::load(&manifest).map_err(|e| ConfigError::Invalid(format!("{e:#}")))?;
            for path in emit_plot_data(&manifest, figure)? {
                println!("{}", path.display());
            }
        }
        Command::Validate { config } => {
            let config = validate_config(&config)?;
            println!("ok: {} ({})", config.name, config.experiment.label());
        }
    }
    Ok(())
}
