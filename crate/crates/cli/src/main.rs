//! `weave`: scene generation, pretraining, texture optimization, baking,
//! rendering, evaluation, benchmarking and ablations.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "weave", version, about = "Reference-conditioned texture synthesis for indoor scenes")]
pub struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run directory or checkpoint bundle to continue from (optimize).
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Inputs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Reference image, once per instance in instance order.
    #[arg(long = "reference")]
    pub references: Vec<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub sr: Option<PathBuf>,
    /// Field checkpoint: `.wtfx` file, checkpoint bundle or run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a box room and write the scene file and flat references.
    MakeScene {
        /// TOML file with the `[room]` keys at top level.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the conditioned teacher and the SR prior.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        sr_steps: Option<usize>,
    },
    /// Distill a texture field for a scene.
    Optimize {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Bake a field into a texture image.
    Bake {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        tile: Option<usize>,
    },
    /// Render a field from sampled viewpoints.
    Render {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        camera_seed: Option<u64>,
    },
    /// Score a field against its references.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Time baking across resolutions.
    Bench {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        tile: Option<usize>,
    },
    /// Train and compare the ablation variants.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::dispatch(cli) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
