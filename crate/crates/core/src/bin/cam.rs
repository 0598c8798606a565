//! `cam`: train, sample, and evaluate causal autoregressive models of
//! continuous embedding sequences.
//!
//! Every subcommand reads an optional `--config` TOML, applies flag
//! overrides (flags win), stamps the global seed into all components, and
//! writes `resolved-config.toml` next to its outputs. Exit codes: 0
//! success, 2 configuration error, 3 numeric failure, 4 I/O failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use cam_core::cli::{
    cmd_compare, cmd_eval, cmd_gen_data, cmd_generate, cmd_sweep_kinf, cmd_train, Flags,
    RunConfig, DEFAULT_K_GRID,
};
use cam_core::model::config::Preset;
use cam_core::training::Objective;

#[derive(Parser)]
#[command(
    name = "cam",
    version,
    about = "Causal autoregressive modeling of continuous embedding sequences"
)]
struct Cli {
    /// Run-config TOML; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, stamped into every component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training objective.
    #[arg(long, global = true, value_enum)]
    objective: Option<Objective>,
    /// Mixture components for GMM-head objectives.
    #[arg(long, global = true)]
    modes: Option<usize>,
    /// Inference error-injection level in [0,1].
    #[arg(long, global = true)]
    k_inf: Option<f64>,
    /// ODE/DDIM solver steps at inference.
    #[arg(long, global = true)]
    num_steps: Option<usize>,
    /// GMM sampling temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Training steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Architecture preset.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic process into an embedding file.
    GenData {
        /// Process dimension override.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        num_sequences: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train an objective: checkpoints plus a per-step metrics CSV.
    Train {
        /// Embedding file to train on; sampled from the process spec when
        /// absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate traces from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a trace file against a reference distribution.
    Eval {
        /// Trace embedding file (sidecar .meta.toml read when present).
        #[arg(long)]
        traces: PathBuf,
        /// Reference embedding file; sampled from the process spec when
        /// absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Checkpoint for oracle conditional accuracy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FED/FED_acc across a grid of k_inf values.
    SweepKinf {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Comma-separated k_inf grid.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_GRID)]
        grid: Vec<f64>,
    },
    /// Train baselines across seeds and tabulate FED/FED_acc.
    Compare {
        /// Seeds per model (cell seeds are seed, seed+1, ...).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Comma-separated subset of models; all five when absent.
        #[arg(long, value_delimiter = ',', value_enum)]
        models: Option<Vec<Objective>>,
    },
}

fn run(cli: Cli) -> cam_core::Result<()> {
    let flags = Flags {
        seed: cli.seed,
        objective: cli.objective,
        modes: cli.modes,
        k_inf: cli.k_inf,
        num_steps: cli.num_steps,
        temperature: cli.temperature,
        steps: cli.steps,
        preset: cli.preset,
        out: cli.out,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_flags(&flags);

    match cli.command {
        Command::GenData {
            dim,
            num_sequences,
            length,
        } => {
            if let Some(d) = dim {
                cfg.process.dim = d;
            }
            if let Some(n) = num_sequences {
                cfg.data.num_sequences = n;
            }
            if let Some(l) = length {
                cfg.data.length = l;
            }
            cmd_gen_data(&cfg)?;
        }
        Command::Train { data, resume } => {
            cmd_train(&cfg, data.as_deref(), resume.as_deref())?;
        }
        Command::Generate { checkpoint } => {
            cmd_generate(&cfg, &checkpoint)?;
        }
        Command::Eval {
            traces,
            reference,
            checkpoint,
        } => {
            cmd_eval(&cfg, &traces, reference.as_deref(), checkpoint.as_deref())?;
        }
        Command::SweepKinf {
            checkpoint,
            reference,
            grid,
        } => {
            cmd_sweep_kinf(&cfg, &checkpoint, reference.as_deref(), &grid)?;
        }
        Command::Compare { seeds, models } => {
            let models = models.unwrap_or_else(|| Objective::ALL.to_vec());
            cmd_compare(&cfg, &models, seeds)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
