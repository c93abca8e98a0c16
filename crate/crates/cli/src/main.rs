//! Pipeline front end: collect → train → edit / generate / s4rl → bc → eval
//! → report.
//!
//! Exit codes: 0 success, 2 configuration/format errors, 3 I/O errors,
//! 4 numeric divergence.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "xted",
    about = "Diffusion-based trajectory editing pipeline over a point-mass benchmark"
)]
struct Cli {
    /// Experiment configuration (strict TOML).
    #[arg(long, global = true, default_value = "xted.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted controller and write a dataset.
    Collect {
        /// "source" or "target".
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the trajectory denoiser on a (target) dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit a (source) dataset with a trained checkpoint.
    Edit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate windows from pure noise, anchored on a target dataset.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Target dataset supplying initial-transition anchors.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// State-noise augmentation baseline.
    S4rl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior-clone a policy from one or more datasets.
    Bc {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy on the target environment.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Arm label written into the output rows.
        #[arg(long)]
        arm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join eval CSVs into the comparison report (+ long-format CSV).
    Report {
        #[arg(long, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Allow inputs from different runs.
        #[arg(long)]
        force: bool,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    use xted_core::Error as E;
    if let Some(core) = err.downcast_ref::<E>() {
        return match core {
            E::Config(_) | E::Validation(_) | E::Format(_) | E::Dimension(_) | E::Index(_) => 2,
            E::Io(_) => 3,
            E::Divergence(_) | E::Simulation(_) => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    2
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = ExperimentConfig::load(&cli.config)?;
    match &cli.command {
        Command::Collect { domain, out } => commands::cmd_collect(&cfg, domain, out),
        Command::Train { data, out } => commands::cmd_train(&cfg, data, out),
        Command::Edit { data, ckpt, out } => commands::cmd_edit(&cfg, data, ckpt, out),
        Command::Generate { ckpt, data, out } => commands::cmd_generate(&cfg, ckpt, data, out),
        Command::S4rl { data, out } => commands::cmd_s4rl(&cfg, data, out),
        Command::Bc { data, out } => commands::cmd_bc(&cfg, data, out),
        Command::Eval { policy, arm, out } => commands::cmd_eval(&cfg, policy, arm, out),
        Command::Report { inputs, out, force } => commands::cmd_report(&cfg, inputs, out, *force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
