//! Folder-of-images ingestion with a deterministic train/test split.

use std::path::{Path, PathBuf};

use autodiff::{Scalar, Tensor};

use crate::core::error::{InpaintError, Result};
use crate::core::types::ImageTensor;
use crate::harness::imageio::load_image;

/// An ingested image folder: stacked `[-1, 1]` tensors, filename-ordered,
/// split by the configured fraction.
pub struct Dataset<F: Scalar> {
    pub train: ImageTensor<F>,
    pub test: ImageTensor<F>,
    pub files: Vec<String>,
}

impl<F: Scalar> Dataset<F> {
    pub fn train_len(&self) -> usize {
        self.train.batch()
    }

    pub fn test_len(&self) -> usize {
        self.test.batch()
    }
}

/// Loads every file in `dir` (sorted by name), center-crops, resizes to
/// `resolution`, and splits the leading `split` fraction into `train`.
pub fn ingest_dataset<F: Scalar>(
    dir: &Path,
    resolution: usize,
    split: f64,
) -> Result<Dataset<F>> {
    let entries = std::fs::read_dir(dir).map_err(|e| {
        InpaintError::Dataset(format!("cannot read dataset dir {}: {e}", dir.display()))
    })?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry
            .map_err(|e| InpaintError::Dataset(format!("cannot list {}: {e}", dir.display())))?;
        if entry
            .file_type()
            .map_err(|e| InpaintError::Dataset(e.to_string()))?
            .is_file()
        {
            paths.push(entry.path());
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(InpaintError::Dataset(format!(
            "no image files in {}",
            dir.display()
        )));
    }

    let mut stack = Vec::with_capacity(paths.len());
    let mut files = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = load_image::<F>(p, resolution)?;
        stack.push(img.tensor().clone());
        files.push(
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    let refs: Vec<Tensor<F>> = stack;
    let all = Tensor::concat(&refs, 0);
    let n = files.len();
    let n_train = ((n as f64) * split).floor() as usize;
    if n_train == 0 {
        return Err(InpaintError::Dataset(format!(
            "train split of {n} files at fraction {split} is empty"
        )));
    }
    let train = ImageTensor::new(Tensor::constant(
        all.narrow(0, 0, n_train).data().clone(),
    ))?;
    let test = if n_train < n {
        ImageTensor::new(Tensor::constant(
            all.narrow(0, n_train, n - n_train).data().clone(),
        ))?
    } else {
        ImageTensor::new(Tensor::constant(ndarray::ArrayD::zeros(
            ndarray::IxDyn(&[0, 3, resolution, resolution]),
        )))?
    };
    Ok(Dataset { train, test, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_of<T>(r: Result<T>) -> String {
        match r {
            Ok(_) => panic!("expected an error"),
            Err(e) => e.to_string(),
        }
    }

    fn write_png(dir: &Path, name: &str, value: f64, side: u32) {
        let v = (((value + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
        let img = image::RgbImage::from_pixel(side, side, image::Rgb([v, v, v]));
        img.save(dir.join(name)).unwrap();
    }

    #[test]
    fn split_ordering_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        // Write out of order; ingestion sorts by name.
        for (i, name) in ["c.png", "a.png", "b.png", "e.png", "d.png"].iter().enumerate() {
            write_png(dir.path(), name, -1.0 + 0.4 * i as f64, 8);
        }
        let ds = ingest_dataset::<f64>(dir.path(), 8, 0.8).unwrap();
        assert_eq!(ds.train_len(), 4);
        assert_eq!(ds.test_len(), 1);
        assert_eq!(ds.files, vec!["a.png", "b.png", "c.png", "d.png", "e.png"]);
        // a.png was written with value index 1 (-0.6).
        let d = ds.train.tensor().data();
        assert!((d[[0, 0, 0, 0]] + 0.6).abs() < 0.01);

        let ds2 = ingest_dataset::<f64>(dir.path(), 8, 0.8).unwrap();
        assert_eq!(ds.train.tensor().data(), ds2.train.tensor().data());
        assert_eq!(ds.test.tensor().data(), ds2.test.tensor().data());
    }

    #[test]
    fn ten_files_split_eight_two() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            write_png(dir.path(), &format!("{i:02}.png"), 0.0, 4);
        }
        let ds = ingest_dataset::<f64>(dir.path(), 4, 0.8).unwrap();
        assert_eq!(ds.train_len(), 8);
        assert_eq!(ds.test_len(), 2);
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let dir = tempfile::tempdir().unwrap();
        // 8x4 image: left half black, middle columns white, right black.
        let mut img = image::RgbImage::from_pixel(8, 4, image::Rgb([0, 0, 0]));
        for y in 0..4 {
            for x in 2..6 {
                img.put_pixel(x, y, image::Rgb([255, 255, 255]));
            }
        }
        img.save(dir.path().join("wide.png")).unwrap();
        let ds = ingest_dataset::<f64>(dir.path(), 4, 1.0).unwrap();
        // The centered 4x4 crop is all white.
        assert!(ds.train.tensor().data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn errors_name_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let empty = err_of(ingest_dataset::<f64>(dir.path(), 4, 0.8));
        assert!(empty.contains("no image files"), "{empty}");

        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        let err = err_of(ingest_dataset::<f64>(dir.path(), 4, 0.8));
        assert!(err.contains("junk.png"), "{err}");

        let missing = err_of(ingest_dataset::<f64>(&dir.path().join("nope"), 4, 0.8));
        assert!(missing.contains("nope"), "{missing}");
    }

    #[test]
    fn resize_maps_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "big.png", 0.5, 32);
        let ds = ingest_dataset::<f64>(dir.path(), 8, 1.0).unwrap();
        assert_eq!(ds.train.tensor().shape(), &[1, 3, 8, 8]);
        let d = ds.train.tensor().data();
        assert!((d[[0, 0, 4, 4]] - 0.5).abs() < 0.01);
    }
}
