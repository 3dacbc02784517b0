//! The assembled three-stage model and its inference operations.

use std::path::Path;

use autodiff::{Scalar, Tensor};

use crate::core::config::TrainConfig;
use crate::core::error::{InpaintError, Result};
use crate::core::rng::Rng;
use crate::core::types::{ImageTensor, Mask, SemanticDirections};
use crate::coarsenet::{coarse_inpaint, CoarseNet};
use crate::latentspace::{
    build_style_condition, encode_style, perturb_style, synthesize, StyleEncoder,
    SynthesisDecoder,
};
use crate::losses::FeatureExtractor;
use crate::maskgen::apply_mask;
use crate::sparn_gan::{generate, Critic, Generator, Variant};
use rand::Rng as _;

/// Every trained stage plus the fixed extractor, resolution-consistent.
pub struct Pipeline<F: Scalar> {
    pub coarse: CoarseNet<F>,
    pub encoder: StyleEncoder<F>,
    pub decoder: SynthesisDecoder<F>,
    pub directions: SemanticDirections<F>,
    pub generator: Generator<F>,
    pub critic: Option<Critic<F>>,
    pub extractor: FeatureExtractor<F>,
    pub config: TrainConfig,
}

impl<F: Scalar> Pipeline<F> {
    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn variant(&self) -> Variant {
        self.generator.variant()
    }

    /// One completion along a chosen semantic direction: coarse fill, style
    /// code from the coarse result, code shifted by `delta`, decoded style
    /// image spliced into the hole, generator pass, hard blend.
    pub fn complete(
        &self,
        image: &ImageTensor<F>,
        mask: &Mask<F>,
        direction: usize,
        delta: f64,
    ) -> Result<ImageTensor<F>> {
        let masked = apply_mask(image, mask)?;
        let coarse = coarse_inpaint(&self.coarse, image, mask)?;
        let mut w = encode_style(&self.encoder, &coarse)?;
        if delta != 0.0 {
            w = perturb_style(
                &w,
                &self.directions,
                direction,
                delta,
                self.directions.source_layers,
            )?;
        }
        let style = synthesize(&self.decoder, &w)?;
        let condition = build_style_condition(&masked, mask, &style)?;
        let out = generate(&self.generator, &masked, &condition, mask)?;
        hard_blend(&out, &masked, mask)
    }
}

/// out ⊙ M_r + I_masked: the emitted image keeps every valid pixel of the
/// input bit for bit and takes generated content only in the hole.
pub fn hard_blend<F: Scalar>(
    out: &ImageTensor<F>,
    masked: &ImageTensor<F>,
    mask: &Mask<F>,
) -> Result<ImageTensor<F>> {
    if out.tensor().shape() != masked.tensor().shape() {
        return Err(InpaintError::Shape(format!(
            "blend: {:?} vs {:?}",
            out.tensor().shape(),
            masked.tensor().shape()
        )));
    }
    // Splice at the data level so valid pixels are bitwise those of the
    // masked input rather than products that round differently.
    let mut data = out.tensor().data().clone();
    let md = mask.tensor().data();
    let src = masked.tensor().data();
    let (b, c, h, w) = (
        data.shape()[0],
        data.shape()[1],
        data.shape()[2],
        data.shape()[3],
    );
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if md[[bi, 0, y, x]] == F::one() {
                        data[[bi, ci, y, x]] = src[[bi, ci, y, x]];
                    }
                }
            }
        }
    }
    ImageTensor::new(Tensor::constant(data))
}

/// Emits `n` completions, each from a distinct direction and delta draw.
/// With `magnitude` 0 every draw collapses to the unperturbed code.
pub fn infer<F: Scalar>(
    pipeline: &Pipeline<F>,
    image: &ImageTensor<F>,
    mask: &Mask<F>,
    n: usize,
    magnitude: f64,
    rng: &mut Rng,
) -> Result<Vec<ImageTensor<F>>> {
    if n == 0 {
        return Err(InpaintError::Invalid("infer needs n >= 1".into()));
    }
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(InpaintError::Invalid(format!(
            "infer magnitude must be finite and non-negative, got {magnitude}"
        )));
    }
    let mut outs = Vec::with_capacity(n);
    for _ in 0..n {
        let direction = rng.gen_range(0..pipeline.directions.count());
        let delta = if magnitude == 0.0 {
            0.0
        } else {
            rng.gen_range(-magnitude..=magnitude)
        };
        outs.push(pipeline.complete(image, mask, direction, delta)?);
    }
    Ok(outs)
}

/// Writes a horizontal grid of completions at linearly spaced deltas along
/// one direction.
pub fn explore<F: Scalar>(
    pipeline: &Pipeline<F>,
    image: &ImageTensor<F>,
    mask: &Mask<F>,
    direction_index: usize,
    delta_min: f64,
    delta_max: f64,
    steps: usize,
    out_path: &Path,
) -> Result<()> {
    if steps < 2 {
        return Err(InpaintError::Invalid(format!(
            "explore needs at least 2 steps, got {steps}"
        )));
    }
    if !delta_min.is_finite() || !delta_max.is_finite() || delta_min > delta_max {
        return Err(InpaintError::Invalid(format!(
            "bad delta range [{delta_min}, {delta_max}]"
        )));
    }
    let mut tiles = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let delta = delta_min + (delta_max - delta_min) * t;
        tiles.push(pipeline.complete(image, mask, direction_index, delta)?);
    }
    crate::harness::imageio::save_grid(out_path, &tiles)
}
