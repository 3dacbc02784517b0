//! Shared domain types, configuration, deterministic RNG, and the portable
//! checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod rng;
pub mod types;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, CheckpointMeta};
pub use config::{load_config, parse_config, LossWeights, TrainConfig};
pub use error::{InpaintError, Result};
pub use rng::{fork, seeded_rng, Rng};
pub use types::{const_image, ImageTensor, Mask, SemanticDirections, StyleCode};
