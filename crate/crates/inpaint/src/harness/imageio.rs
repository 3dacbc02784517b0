//! 8-bit image files in and out of `[-1, 1]` tensors.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use ndarray::{ArrayD, IxDyn};

use autodiff::Scalar;

use crate::core::error::{InpaintError, Result};
use crate::core::types::{ImageTensor, Mask};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| InpaintError::ImageFile {
        path: path.display().to_string(),
        msg: format!("cannot decode: {e}"),
    })
}

fn center_crop_square(img: DynamicImage) -> DynamicImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
}

/// Reads an RGB image, center-crops to square, resizes, and maps to
/// `[-1, 1]`, returning a single-sample tensor.
pub fn load_image<F: Scalar>(path: &Path, resolution: usize) -> Result<ImageTensor<F>> {
    let img = center_crop_square(open(path)?);
    let img = img
        .resize_exact(resolution as u32, resolution as u32, FilterType::Triangle)
        .to_rgb8();
    let mut data = ArrayD::<F>::zeros(IxDyn(&[1, 3, resolution, resolution]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = p.0[c] as f64 / 127.5 - 1.0;
            data[[0, c, y as usize, x as usize]] = F::from_f64(v);
        }
    }
    ImageTensor::from_array(data)
}

/// Reads an 8-bit mask image: a pixel with luma >= 128 is valid (1), the
/// rest are holes (0). The file must already match the working resolution.
pub fn load_mask<F: Scalar>(path: &Path, resolution: usize) -> Result<Mask<F>> {
    let img = open(path)?.to_luma8();
    if img.width() as usize != resolution || img.height() as usize != resolution {
        return Err(InpaintError::ImageFile {
            path: path.display().to_string(),
            msg: format!(
                "mask is {}x{}, expected {resolution}x{resolution}",
                img.width(),
                img.height()
            ),
        });
    }
    let mut data = ArrayD::<F>::zeros(IxDyn(&[1, 1, resolution, resolution]));
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[0] >= 128 {
            data[[0, 0, y as usize, x as usize]] = F::one();
        }
    }
    Mask::from_array(data)
}

fn sample_to_rgb8<F: Scalar>(img: &ImageTensor<F>, index: usize) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let data = img.tensor().data();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = Scalar::to_f64(data[[index, c, y, x]]);
                px[c] = (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

/// Writes a single-sample tensor as an 8-bit RGB file (linear map from
/// `[-1, 1]`).
pub fn save_image<F: Scalar>(path: &Path, img: &ImageTensor<F>) -> Result<()> {
    if img.batch() != 1 {
        return Err(InpaintError::Invalid(format!(
            "save_image wants a single sample, got batch {}",
            img.batch()
        )));
    }
    sample_to_rgb8(img, 0)
        .save(path)
        .map_err(|e| InpaintError::ImageFile {
            path: path.display().to_string(),
            msg: format!("cannot write: {e}"),
        })
}

/// Writes a binary mask as an 8-bit grayscale file (valid = 255).
pub fn save_mask<F: Scalar>(path: &Path, mask: &Mask<F>) -> Result<()> {
    if mask.batch() != 1 {
        return Err(InpaintError::Invalid(format!(
            "save_mask wants a single sample, got batch {}",
            mask.batch()
        )));
    }
    let (h, w) = (mask.height(), mask.width());
    let data = mask.tensor().data();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if data[[0, 0, y, x]] == F::one() { 255 } else { 0 };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path)
        .map_err(|e| InpaintError::ImageFile {
            path: path.display().to_string(),
            msg: format!("cannot write: {e}"),
        })
}

/// Writes single-sample tiles side by side as one image file.
pub fn save_grid<F: Scalar>(path: &Path, tiles: &[ImageTensor<F>]) -> Result<()> {
    if tiles.is_empty() {
        return Err(InpaintError::Invalid("empty grid".into()));
    }
    let (h, w) = (tiles[0].height(), tiles[0].width());
    for t in tiles {
        if t.batch() != 1 || t.height() != h || t.width() != w {
            return Err(InpaintError::Invalid(
                "grid tiles must be single samples of equal size".into(),
            ));
        }
    }
    let mut out = RgbImage::new((w * tiles.len()) as u32, h as u32);
    for (i, t) in tiles.iter().enumerate() {
        let tile = sample_to_rgb8(t, 0);
        image::imageops::replace(&mut out, &tile, (i * w) as i64, 0);
    }
    out.save(path)
        .map_err(|e| InpaintError::ImageFile {
            path: path.display().to_string(),
            msg: format!("cannot write: {e}"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::rng::seeded_rng;
    use rand::Rng as _;

    #[test]
    fn image_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(0);
        // Quantized lattice values survive the 8-bit roundtrip exactly.
        let data: Vec<f64> = (0..3 * 8 * 8)
            .map(|_| {
                let byte: u8 = rng.gen();
                byte as f64 / 127.5 - 1.0
            })
            .collect();
        let img = ImageTensor::from_array(
            ArrayD::from_shape_vec(IxDyn(&[1, 3, 8, 8]), data).unwrap(),
        )
        .unwrap();
        let path = dir.path().join("img.png");
        save_image(&path, &img).unwrap();
        let back = load_image::<f64>(&path, 8).unwrap();
        for (a, b) in img.tensor().data().iter().zip(back.tensor().data().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mask_roundtrip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 8, 8]));
        for y in 0..8 {
            for x in 0..4 {
                data[[0, 0, y, x]] = 1.0;
            }
        }
        let mask = Mask::from_array(data).unwrap();
        let path = dir.path().join("mask.png");
        save_mask(&path, &mask).unwrap();
        let back = load_mask::<f64>(&path, 8).unwrap();
        assert_eq!(mask.tensor().data(), back.tensor().data());
        assert!(load_mask::<f64>(&path, 16).is_err(), "size mismatch must fail");

        // Gray values straddling 128 resolve by threshold.
        let gpath = dir.path().join("gray.png");
        let mut gray = image::GrayImage::new(2, 2);
        gray.put_pixel(0, 0, image::Luma([127]));
        gray.put_pixel(1, 0, image::Luma([128]));
        gray.put_pixel(0, 1, image::Luma([0]));
        gray.put_pixel(1, 1, image::Luma([255]));
        gray.save(&gpath).unwrap();
        let m = load_mask::<f64>(&gpath, 2).unwrap();
        let d = m.tensor().data();
        assert_eq!(d[[0, 0, 0, 0]], 0.0);
        assert_eq!(d[[0, 0, 0, 1]], 1.0);
        assert_eq!(d[[0, 0, 1, 0]], 0.0);
        assert_eq!(d[[0, 0, 1, 1]], 1.0);
    }

    #[test]
    fn grid_concatenates_horizontally() {
        let dir = tempfile::tempdir().unwrap();
        let a = ImageTensor::from_array(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), -1.0)).unwrap();
        let b = ImageTensor::from_array(ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 1.0)).unwrap();
        let path = dir.path().join("grid.png");
        save_grid(&path, &[a, b, ImageTensor::from_array(ArrayD::zeros(IxDyn(&[1, 3, 4, 4]))).unwrap()]).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), 12);
        assert_eq!(img.height(), 4);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(4, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(8, 0).0, [128, 128, 128]);
    }

    #[test]
    fn undecodable_file_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_an_image.png");
        std::fs::write(&path, b"plain text").unwrap();
        let err = load_image::<f64>(&path, 8).unwrap_err();
        assert!(err.to_string().contains("not_an_image.png"), "{err}");
    }
}
