//! `avatarbg`: dataset generation, training, sampling, evaluation and mask
//! inspection for the avatar-background video restoration model.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "avatarbg", version, about = "Avatar-background conditioned video restoration at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset (manifest plus tensor files).
    GenData(GenDataArgs),
    /// Train adapters and towers on a dataset directory.
    Train(TrainArgs),
    /// Sample restored joint clips from a checkpoint.
    Sample(SampleArgs),
    /// Score predicted clips against ground truth.
    Eval(EvalArgs),
    /// Dump the soft mask, the joint masks and the packed mask channels as PNGs.
    InspectMasks(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    /// Motion frames per clip; a clip holds one extra frame.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Frame size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Degradation as inline JSON or a path to a JSON file; missing fields
    /// keep their defaults.
    #[arg(long)]
    pub degradation: Option<String>,
    /// Probability that a scene gets a moving background.
    #[arg(long)]
    pub dynamic_background_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossMaskingArg {
    Uniform,
    BodyWeighted,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub loss_masking: Option<LossMaskingArg>,
    #[arg(long)]
    pub no_avatar_condition: bool,
    #[arg(long)]
    pub no_mask_strategy: bool,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sample id; repeat to sample several clips.
    #[arg(long = "sample", required = true)]
    pub samples: Vec<String>,
    #[arg(long, default_value_t = avatarbg_core::sampler::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted clips named `<sample_id>.bin`.
    #[arg(long, required_unless_present = "condition", conflicts_with = "condition")]
    pub pred: Option<PathBuf>,
    /// Score the avatar-background condition video instead of predictions.
    #[arg(long)]
    pub condition: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask softening sigma in pixels; derived from the frame size by default.
    #[arg(long)]
    pub mask_sigma: Option<f64>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample_cmd(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::InspectMasks(a) => commands::inspect_masks(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert_eq!(parse_size("96X96"), Ok((96, 96)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax8").is_err());
    }

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
