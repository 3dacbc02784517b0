//! Mask synthesis (random squares and free-form strokes) and the masking
//! algebra used throughout training: application, reversal, combination,
//! ratio measurement, and hole-dominant downsampling.

use autodiff::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;

use crate::core::error::{InpaintError, Result};
use crate::core::rng::Rng;
use crate::core::types::{ImageTensor, Mask};

/// Knobs for synthetic mask generation.
#[derive(Clone, Debug)]
pub struct MaskParams {
    /// Side length of the square hole, in pixels.
    pub square_size: usize,
    /// Inclusive range for the number of strokes per mask.
    pub stroke_count_range: (usize, usize),
    /// Inclusive range for stroke thickness, in pixels.
    pub stroke_width_range: (usize, usize),
    /// Inclusive range for polyline vertex count per stroke.
    pub vertex_count_range: (usize, usize),
    /// When set, stroke masks are resampled until their hole ratio lands in
    /// [lo, hi] (bounded retries).
    pub target_ratio_bucket: Option<(f64, f64)>,
}

impl MaskParams {
    /// Defaults scaled to a given resolution. The square side keeps the
    /// 85-at-256 hole fraction; stroke widths scale with the frame.
    pub fn for_resolution(resolution: usize) -> Self {
        let square = ((85.0 / 256.0) * resolution as f64).round() as usize;
        MaskParams {
            square_size: square,
            stroke_count_range: (1, 4),
            stroke_width_range: ((resolution / 16).max(1), (resolution / 8).max(2)),
            vertex_count_range: (4, 8),
            target_ratio_bucket: None,
        }
    }
}

fn grid_to_mask<F: Scalar>(grid: &[u8], resolution: usize) -> Mask<F> {
    let data: Vec<F> = grid
        .iter()
        .map(|&v| if v == 0 { F::zero() } else { F::one() })
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&[1, 1, resolution, resolution]), data).unwrap();
    Mask::from_array(arr).expect("grid is binary by construction")
}

/// All-valid mask except one axis-aligned square hole placed uniformly at
/// random, fully inside the frame.
pub fn generate_square_mask<F: Scalar>(
    resolution: usize,
    params: &MaskParams,
    rng: &mut Rng,
) -> Result<Mask<F>> {
    let s = params.square_size;
    if s >= resolution {
        return Err(InpaintError::Invalid(format!(
            "square_size {s} must be smaller than resolution {resolution}"
        )));
    }
    let top = rng.gen_range(0..=resolution - s);
    let left = rng.gen_range(0..=resolution - s);
    let mut grid = vec![1u8; resolution * resolution];
    for y in top..top + s {
        for x in left..left + s {
            grid[y * resolution + x] = 0;
        }
    }
    Ok(grid_to_mask(&grid, resolution))
}

fn raster_strokes(resolution: usize, params: &MaskParams, rng: &mut Rng) -> Vec<u8> {
    let mut grid = vec![1u8; resolution * resolution];
    let count = rng.gen_range(params.stroke_count_range.0..=params.stroke_count_range.1);
    for _ in 0..count {
        let vertices = rng.gen_range(params.vertex_count_range.0..=params.vertex_count_range.1);
        let width = rng.gen_range(params.stroke_width_range.0..=params.stroke_width_range.1);
        let radius = width as f64 / 2.0;
        let mut points = Vec::with_capacity(vertices);
        for _ in 0..vertices {
            let x = rng.gen_range(0..resolution) as f64;
            let y = rng.gen_range(0..resolution) as f64;
            points.push((x, y));
        }
        for seg in points.windows(2) {
            stamp_segment(&mut grid, resolution, seg[0], seg[1], radius);
        }
    }
    grid
}

/// Marks every pixel within `radius` of the segment as hole.
fn stamp_segment(grid: &mut [u8], resolution: usize, a: (f64, f64), b: (f64, f64), radius: f64) {
    let r = radius.max(0.5);
    let x_lo = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let x_hi = ((a.0.max(b.0) + r).ceil() as usize).min(resolution - 1);
    let y_lo = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let y_hi = ((a.1.max(b.1) + r).ceil() as usize).min(resolution - 1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
            };
            let (cx, cy) = (px - t * dx, py - t * dy);
            if cx * cx + cy * cy <= r * r {
                grid[y * resolution + x] = 0;
            }
        }
    }
}

const BUCKET_RETRIES: usize = 200;

/// Free-form polyline strokes on a valid field. With a target ratio bucket,
/// resamples until the hole ratio lands inside it.
pub fn generate_stroke_mask<F: Scalar>(
    resolution: usize,
    params: &MaskParams,
    rng: &mut Rng,
) -> Result<Mask<F>> {
    match params.target_ratio_bucket {
        None => Ok(grid_to_mask(&raster_strokes(resolution, params, rng), resolution)),
        Some((lo, hi)) => {
            for _ in 0..BUCKET_RETRIES {
                let grid = raster_strokes(resolution, params, rng);
                let holes = grid.iter().filter(|&&v| v == 0).count();
                let ratio = holes as f64 / grid.len() as f64;
                if ratio >= lo && ratio <= hi {
                    return Ok(grid_to_mask(&grid, resolution));
                }
            }
            Err(InpaintError::Invalid(format!(
                "could not reach hole-ratio bucket [{lo}, {hi}] in {BUCKET_RETRIES} samples"
            )))
        }
    }
}

/// Union of holes: elementwise minimum.
pub fn combine_masks<F: Scalar>(a: &Mask<F>, b: &Mask<F>) -> Result<Mask<F>> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(InpaintError::Shape(format!(
            "combine_masks: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let data = ndarray::Zip::from(a.tensor().data())
        .and(b.tensor().data())
        .map_collect(|&x, &y| if x < y { x } else { y });
    Mask::from_array(data)
}

/// Per-sample stroke mask combined with a square hole, the default training
/// corruption; one mask per batch element.
pub fn generate_training_masks<F: Scalar>(
    resolution: usize,
    params: &MaskParams,
    batch: usize,
    rng: &mut Rng,
) -> Result<Mask<F>> {
    let mut rows: Vec<ArrayD<F>> = Vec::with_capacity(batch);
    for _ in 0..batch {
        let strokes = generate_stroke_mask::<F>(resolution, params, rng)?;
        let square = generate_square_mask::<F>(resolution, params, rng)?;
        let combined = combine_masks(&strokes, &square)?;
        rows.push(combined.tensor().data().clone());
    }
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
        .expect("uniform mask shapes")
        .as_standard_layout()
        .into_owned();
    Mask::from_array(stacked)
}

/// I ⊙ M, broadcasting the single mask channel across image channels. The
/// result keeps the image tensor's autodiff history.
pub fn apply_mask<F: Scalar>(image: &ImageTensor<F>, mask: &Mask<F>) -> Result<ImageTensor<F>> {
    check_spatial(image, mask)?;
    ImageTensor::new(image.tensor().mul(mask.tensor()))
}

/// M_r = 1 - M.
pub fn reverse_mask<F: Scalar>(mask: &Mask<F>) -> Mask<F> {
    let data = mask.tensor().data().mapv(|v| F::one() - v);
    Mask::from_array(data).expect("complement of binary is binary")
}

/// Fraction of hole (0) pixels.
pub fn mask_ratio<F: Scalar>(mask: &Mask<F>) -> f64 {
    let total = mask.tensor().len();
    let holes = mask
        .tensor()
        .data()
        .iter()
        .filter(|&&v| v == F::zero())
        .count();
    holes as f64 / total as f64
}

/// Hole-dominant pooling: an output cell is valid only if every covered
/// input cell is valid, so no hole ever disappears by downsampling.
pub fn downsample_mask<F: Scalar>(mask: &Mask<F>, factor: usize) -> Result<Mask<F>> {
    if factor == 1 {
        return Ok(mask.clone());
    }
    let (b, h, w) = (mask.batch(), mask.height(), mask.width());
    if !factor.is_power_of_two() || h % factor != 0 || w % factor != 0 {
        return Err(InpaintError::Invalid(format!(
            "downsample factor {factor} must be a power of 2 dividing {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = mask.tensor().data();
    let mut out = ArrayD::from_elem(IxDyn(&[b, 1, oh, ow]), F::one());
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                'cell: for dy in 0..factor {
                    for dx in 0..factor {
                        if src[[bi, 0, oy * factor + dy, ox * factor + dx]] == F::zero() {
                            out[[bi, 0, oy, ox]] = F::zero();
                            break 'cell;
                        }
                    }
                }
            }
        }
    }
    Mask::from_array(out)
}

fn check_spatial<F: Scalar>(image: &ImageTensor<F>, mask: &Mask<F>) -> Result<()> {
    if image.batch() != mask.batch()
        || image.height() != mask.height()
        || image.width() != mask.width()
    {
        return Err(InpaintError::Shape(format!(
            "image {:?} vs mask {:?}",
            image.tensor().shape(),
            mask.tensor().shape()
        )));
    }
    Ok(())
}
