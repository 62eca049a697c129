mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hogn::integrators::Integrator;
use hogn::models::ModelKind;
use hogn::Error;

/// Graph-network simulators for particle-spring systems: data generation,
/// training, learning-rate sweeps, evaluation grids and metric export.
#[derive(Debug, Parser)]
#[command(name = "hogn", version)]
struct Cli {
    /// Directory for datasets, checkpoints and metrics.
    #[arg(long, global = true, env = "HOGN_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long, default_value = "configs/desk.cfg")]
    config: PathBuf,

    /// Override a configuration value, e.g. `--set training.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,

    /// Integrator used during training (ignored by DeltaGN).
    #[arg(long, value_parser = parse_integrator, default_value = "RK4")]
    integrator: Integrator,

    /// Train on the variable-step dataset.
    #[arg(long)]
    variable: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write pair datasets and evaluation trajectories.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one model and save its best-validation checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train over the learning-rate grid and rank runs by validation rollout error.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate checkpoints on every test integrator and step size.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Runs to evaluate; defaults to every checkpoint in the output directory.
        #[arg(long = "run")]
        runs: Vec<String>,
    },
    /// Roll a model out from a sampled initial state and save the trajectory.
    Rollout {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpointed run, or `TrueHamiltonian`.
        #[arg(long)]
        run: String,
        #[arg(long, value_parser = parse_integrator, default_value = "RK4")]
        integrator: Integrator,
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        particles: usize,
        /// Which sampled system to start from.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write a deduplicated, sorted copy of the metrics for plotting.
    Export {
        /// Destination; defaults to `export.jsonl` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Include training curves.
        #[arg(long)]
        curves: bool,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_integrator(s: &str) -> Result<Integrator, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit status for an error: 1 for bad input, 2 for failures at run time.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Shape(_)
        | Error::NonScalar { .. }
        | Error::Format { .. }
        | Error::Version { .. }
        | Error::Missing(_)
        | Error::DegenerateEnergy(_) => 1,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::SweepDiverged | Error::BelowNoise | Error::Io(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 1 { "validation" } else { "runtime" };
            eprintln!("{}", serde_json::json!({ "status": "error", "kind": kind, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
