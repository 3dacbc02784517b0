//! Diverse facial image inpainting.
//!
//! The pipeline composes three trained stages: a coarse encoder-decoder
//! inpainter, a W+ style autoencoder whose decoder weights admit closed-form
//! semantic factorization, and a region-normalized conditional generator
//! trained adversarially against a spectrally-normalized Wasserstein critic.
//! Feeding the generator style conditions perturbed along the factorized
//! directions yields multiple distinct completions for one masked input.

pub mod core;
pub mod coarsenet;
pub mod evalkit;
pub mod harness;
pub mod latentspace;
pub mod losses;
pub mod maskgen;
pub mod sparn_gan;
