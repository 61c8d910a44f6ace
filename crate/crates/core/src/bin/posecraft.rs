use clap::{Parser, Subcommand};
use posecraft::pipeline::{self, Command, Invocation};
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-view keypoint articulation and diffusion-control toolkit.
#[derive(Debug, Parser)]
#[command(name = "posecraft", version)]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "POSECRAFT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Fit the rig pose to the configured target keypoints.
    Pose(Common),
    /// Render target keypoints from a known pose.
    MakeTargets {
        #[command(flatten)]
        common: Common,
        /// Ground-truth pose JSON.
        #[arg(long)]
        pose: PathBuf,
        /// Gaussian pixel noise (std-dev, px).
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        /// Probability of marking each keypoint invisible, in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
    },
    /// Invert, select a depth and articulate with a toy noise predictor.
    DiffusionDemo(Common),
    /// Check the config and every file it references.
    Validate(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Verb::Pose(c) => (Command::Pose, c),
        Verb::MakeTargets { common, pose, noise_sigma, drop_rate } => {
            (Command::MakeTargets { pose, noise_sigma, drop_rate }, common)
        }
        Verb::DiffusionDemo(c) => (Command::DiffusionDemo, c),
        Verb::Validate(c) => (Command::Validate, c),
    };
    let inv = Invocation { command, config: common.config, seed: common.seed, out: common.out };
    let (code, result) = pipeline::run(&inv);
    match result {
        Ok(out) if inv.command == Command::Validate => {
            println!("valid");
            for (k, v) in &out.report.counts {
                println!("  {k}: {v}");
            }
        }
        Ok(_) => println!("{}", pipeline::output_dir(&inv).display()),
        Err(e) => eprintln!("posecraft {}: {e}", inv.command.name()),
    }
    ExitCode::from(code as u8)
}
