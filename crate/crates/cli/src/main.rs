//! `inpaint3d` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "inpaint3d", version, about = "Self-supervised point-cloud completion by octant inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural multi-view dataset.
    GenData(GenDataArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a CSV report.
    Eval(EvalArgs),
    /// Complete one partial cloud.
    Complete(CompleteArgs),
    /// Split a cloud into octant regions.
    Partition(PartitionArgs),
    /// Apply a random rigid perturbation to a cloud.
    Noise(NoiseArgs),
    /// Non-learned baselines.
    Baseline {
        #[command(subcommand)]
        which: BaselineCommand,
    },
    /// Summarize finished runs into one CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 2048)]
    pub gt_points: usize,
    /// Comma-separated subset of box,cylinder,ellipsoid,composite.
    #[arg(long, default_value = "box,cylinder,ellipsoid,composite")]
    pub shapes: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub max_rotation_deg: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub max_translation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Disable a component: inpainting, multiview, global or local. Repeatable.
    #[arg(long, value_parser = ["inpainting", "multiview", "global", "local"])]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint; not needed with --identity.
    #[arg(long, required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pose-noise sweep as `deg:translation` pairs, e.g. `5:0.01,10:0.05`.
    #[arg(long)]
    pub noise: Option<String>,
    /// Input view index per instance.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Remove this many present regions from every input.
    #[arg(long, default_value_t = 0)]
    pub remove_count: usize,
    /// Resample size for EMD (0 disables EMD).
    #[arg(long, default_value_t = 512)]
    pub emd_points: usize,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.02, allow_negative_numbers = true)]
    pub overlap: f64,
    #[arg(long, default_value_t = 4)]
    pub threshold: usize,
    #[arg(long, default_value_t = 0.2, conflicts_with = "remove_count", allow_negative_numbers = true)]
    pub remove_prob: f64,
    /// Remove exactly this many present regions instead of sampling.
    #[arg(long)]
    pub remove_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub max_rotation_deg: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub max_translation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum BaselineCommand {
    /// Sample inside 10-NN ellipsoids around every input point.
    Densify(DensifyArgs),
}

#[derive(Args, Debug)]
pub struct DensifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub points_per_seed: usize,
    #[arg(long, default_value_t = 8192)]
    pub target: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Complete(a) => commands::complete(a),
        Command::Partition(a) => commands::partition(a),
        Command::Noise(a) => commands::noise(a),
        Command::Baseline { which: BaselineCommand::Densify(a) } => commands::densify(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
