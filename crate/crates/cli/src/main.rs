//! `vpnpp`: dataset generation, training, evaluation, timing, ablations and
//! attention dumps. Exit codes: 0 success, 2 config error, 3 missing
//! dependency artifact, 4 data error.

mod commands;
mod error;
mod experiment;
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpnpp::trainer::Recipe;

use commands::{Context, Grid};
use error::{CliError, CliResult};
use experiment::{ExperimentConfig, Layout};

const THREADS_ENV: &str = "VPNPP_THREADS";

#[derive(Parser)]
#[command(name = "vpnpp", version, about = "Video-pose attention and cross-modal distillation experiments")]
struct Cli {
    /// Experiment TOML file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config; default `runs`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the dataset seed and every recipe's seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Rebuild artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Train one recipe.
    Train {
        #[arg(long, value_name = "NAME")]
        recipe: Recipe,
    },
    /// Evaluate a trained recipe on the test split.
    Eval {
        #[arg(long, value_name = "NAME")]
        recipe: Recipe,
        /// Feed poses at inference (implied for pose_teacher and vpn_teacher).
        #[arg(long)]
        pose_inputs: bool,
    },
    /// Time inference per clip for the student, pose teacher, VPN teacher and late fusion.
    Bench {
        #[arg(long, default_value_t = 16)]
        clips: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Re-run a weight grid or the pose-quality sweep.
    Ablate {
        #[arg(long, value_enum, required_unless_present = "pose_quality", conflicts_with = "pose_quality")]
        grid: Option<Grid>,
        #[arg(long)]
        pose_quality: bool,
    },
    /// Write attention heatmaps (PGM) for a few test clips.
    DumpAttention {
        #[arg(long, value_name = "NAME")]
        recipe: Recipe,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

fn threads() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
    }
}

fn run(cli: Cli) -> CliResult {
    let exp = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    }
    .with_seed(cli.seed);
    exp.validate()?;
    let out = cli.out.clone().or_else(|| exp.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = Context {
        exp,
        layout: Layout::new(out),
        force: cli.force,
        threads: threads()?,
    };
    match cli.command {
        Command::Gen => ctx.gen(),
        Command::Train { recipe } => ctx.train(recipe),
        Command::Eval { recipe, pose_inputs } => ctx.eval(recipe, pose_inputs),
        Command::Bench { clips, repeats } => ctx.bench(clips, repeats),
        Command::Ablate { grid: Some(g), .. } => ctx.ablate_grid(g),
        Command::Ablate { .. } => ctx.ablate_pose_quality(),
        Command::DumpAttention { recipe, samples } => ctx.dump_attention(recipe, samples),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("vpnpp: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::from(e.exit_code())
        }
    }
}
