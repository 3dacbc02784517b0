//! Command-line interface: one subcommand per pipeline operation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::core::config::load_config;
use crate::core::error::{InpaintError, Result};
use crate::core::rng::seeded_rng;
use crate::harness::imageio::{load_image, load_mask, save_image, save_mask};
use crate::harness::pipeline;
use crate::harness::stages;
use crate::maskgen::{generate_training_masks, MaskParams};
use crate::sparn_gan::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "inpaint",
    about = "Diverse facial image inpainting: staged training, pluralistic inference, delta sweeps, and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Path to a key = value config file.
    #[arg(long)]
    pub config: PathBuf,
    /// RNG seed; equal seeds reproduce runs byte for byte.
    #[arg(long)]
    pub seed: u64,
    /// Run directory for checkpoints, logs, and outputs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImageArgs {
    /// Input image to complete.
    #[arg(long)]
    pub image: PathBuf,
    /// Mask file (8-bit, >= 128 marks valid pixels).
    #[arg(long, conflicts_with = "mask_auto")]
    pub mask: Option<PathBuf>,
    /// Sample a training-style mask instead of reading one.
    #[arg(long)]
    pub mask_auto: bool,
    /// Number of completions to emit.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Semantic direction index for the delta sweep.
    #[arg(long, default_value_t = 0)]
    pub direction: usize,
    /// Sweep lower bound; for infer, the draw magnitude uses |delta-max|.
    #[arg(long, allow_hyphen_values = true)]
    pub delta_min: Option<f64>,
    /// Sweep upper bound.
    #[arg(long, allow_hyphen_values = true)]
    pub delta_max: Option<f64>,
    /// Number of sweep tiles.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the stage-1 coarse inpainter.
    TrainCoarse {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the stage-2 style autoencoder and factorize directions.
    TrainLatent {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the stage-3 generator and critic.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Normalization variant: sparn, spade_decoder, or no_rn.
        #[arg(long, default_value = "sparn")]
        variant: String,
    },
    /// Emit several completions of one masked image.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        io: ImageArgs,
    },
    /// Sweep one semantic direction and write a tile grid.
    Explore {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        io: ImageArgs,
    },
    /// Compute bucketed metrics and diversity tables.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Variant the loaded generator must have been trained with.
        #[arg(long, default_value = "sparn")]
        variant: String,
    },
}

fn resolve_mask(
    io: &ImageArgs,
    resolution: usize,
    rng: &mut crate::core::rng::Rng,
) -> Result<crate::core::types::Mask<f32>> {
    match (&io.mask, io.mask_auto) {
        (Some(path), false) => load_mask(path, resolution),
        (None, true) => {
            let params = MaskParams::for_resolution(resolution);
            generate_training_masks(resolution, &params, 1, rng)
        }
        _ => Err(InpaintError::Invalid(
            "pass exactly one of --mask PATH or --mask-auto".into(),
        )),
    }
}

/// Runs one parsed invocation end to end.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainCoarse { common } => {
            let cfg = load_config(&common.config)?;
            stages::run_train_coarse(&cfg, common.seed, &common.out)
        }
        Command::TrainLatent { common } => {
            let cfg = load_config(&common.config)?;
            stages::run_train_latent(&cfg, common.seed, &common.out)
        }
        Command::Train { common, variant } => {
            let cfg = load_config(&common.config)?;
            let variant = Variant::parse(&variant)?;
            stages::run_train_stage3(&cfg, common.seed, &common.out, variant)
        }
        Command::Infer { common, io } => {
            let cfg = load_config(&common.config)?;
            let pipe = stages::load_pipeline(&cfg, &common.out, None)?;
            let mut rng = seeded_rng(common.seed);
            let image = load_image::<f32>(&io.image, cfg.resolution)?;
            let mask = resolve_mask(&io, cfg.resolution, &mut rng)?;
            let magnitude = io
                .delta_max
                .map(f64::abs)
                .unwrap_or(cfg.delta_magnitude);
            let outs = pipeline::infer(&pipe, &image, &mask, io.n, magnitude, &mut rng)?;
            save_mask(&common.out.join("infer_mask.png"), &mask)?;
            for (i, out) in outs.iter().enumerate() {
                save_image(&common.out.join(format!("infer_{i}.png")), out)?;
            }
            Ok(())
        }
        Command::Explore { common, io } => {
            let cfg = load_config(&common.config)?;
            let pipe = stages::load_pipeline(&cfg, &common.out, None)?;
            let mut rng = seeded_rng(common.seed);
            let image = load_image::<f32>(&io.image, cfg.resolution)?;
            let mask = resolve_mask(&io, cfg.resolution, &mut rng)?;
            let lo = io.delta_min.unwrap_or(-cfg.delta_magnitude);
            let hi = io.delta_max.unwrap_or(cfg.delta_magnitude);
            save_mask(&common.out.join("explore_mask.png"), &mask)?;
            pipeline::explore(
                &pipe,
                &image,
                &mask,
                io.direction,
                lo,
                hi,
                io.steps,
                &common.out.join("explore.png"),
            )
        }
        Command::Evaluate { common, variant } => {
            let cfg = load_config(&common.config)?;
            let variant = Variant::parse(&variant)?;
            stages::run_evaluate(&cfg, common.seed, &common.out, variant)
        }
    }
}
