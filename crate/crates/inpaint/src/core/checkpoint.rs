//! Portable checkpoint directories: a text manifest naming each tensor and
//! its shape, a flat little-endian float32 payload, and a metadata file
//! carrying the stage tag, seed, variant, and config snapshot.
//!
//! The format is deliberately dumb so any language can read it; the load
//! path verifies that manifest and payload agree before returning anything.

use std::io::Read;
use std::path::Path;

use autodiff::Scalar;
use ndarray::{ArrayD, IxDyn};

use super::error::{InpaintError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "meta.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// Pipeline stage this bundle belongs to: `coarse`, `latent`,
    /// `generator`, or `critic`.
    pub stage: String,
    pub seed: u64,
    /// Generator variant the weights were trained as (empty when not
    /// applicable).
    pub variant: String,
    /// Config snapshot at save time, in canonical key order.
    pub config: Vec<(String, String)>,
}

fn ckpt_err(dir: &Path, msg: impl Into<String>) -> InpaintError {
    InpaintError::Checkpoint {
        path: dir.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(
    dir: &Path,
    weights: &[(String, ArrayD<f32>)],
    meta: &CheckpointMeta,
) -> Result<()> {
    for (i, (name, tensor)) in weights.iter().enumerate() {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(ckpt_err(dir, format!("invalid tensor name `{name}`")));
        }
        if weights[..i].iter().any(|(n, _)| n == name) {
            return Err(ckpt_err(dir, format!("duplicate tensor name `{name}`")));
        }
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(ckpt_err(dir, format!("tensor `{name}` has non-finite values")));
        }
    }

    std::fs::create_dir_all(dir).map_err(|e| InpaintError::io(dir.display().to_string(), e))?;
    let write_err = |f: &str, e: std::io::Error| InpaintError::io(dir.join(f).display().to_string(), e);

    let mut manifest = String::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in weights {
        manifest.push_str(name);
        for d in tensor.shape() {
            manifest.push(' ');
            manifest.push_str(&d.to_string());
        }
        manifest.push('\n');
        for v in tensor.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest).map_err(|e| write_err(MANIFEST_FILE, e))?;
    std::fs::write(dir.join(WEIGHTS_FILE), payload).map_err(|e| write_err(WEIGHTS_FILE, e))?;

    let mut meta_text = String::new();
    meta_text.push_str(&format!("stage={}\n", meta.stage));
    meta_text.push_str(&format!("seed={}\n", meta.seed));
    meta_text.push_str(&format!("variant={}\n", meta.variant));
    for (k, v) in &meta.config {
        meta_text.push_str(&format!("config.{k}={v}\n"));
    }
    std::fs::write(dir.join(META_FILE), meta_text).map_err(|e| write_err(META_FILE, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Vec<(String, ArrayD<f32>)>, CheckpointMeta)> {
    let read = |f: &str| -> Result<Vec<u8>> {
        let path = dir.join(f);
        let mut buf = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut fh| fh.read_to_end(&mut buf))
            .map_err(|e| InpaintError::io(path.display().to_string(), e))?;
        Ok(buf)
    };

    let manifest = String::from_utf8(read(MANIFEST_FILE)?)
        .map_err(|_| ckpt_err(dir, "manifest is not valid UTF-8"))?;
    let payload = read(WEIGHTS_FILE)?;

    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    let mut total: usize = 0;
    for (idx, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap().to_string();
        let mut shape = Vec::new();
        for p in parts {
            let d: usize = p.parse().map_err(|_| {
                ckpt_err(dir, format!("manifest line {}: bad dimension `{p}`", idx + 1))
            })?;
            shape.push(d);
        }
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(ckpt_err(dir, format!("duplicate tensor name `{name}`")));
        }
        total += shape.iter().product::<usize>();
        entries.push((name, shape));
    }

    if payload.len() != total * 4 {
        return Err(ckpt_err(
            dir,
            format!(
                "payload holds {} bytes but manifest describes {} ({} floats)",
                payload.len(),
                total * 4,
                total
            ),
        ));
    }

    let mut weights = Vec::with_capacity(entries.len());
    let mut off = 0usize;
    for (name, shape) in entries {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let b = &payload[(off + i) * 4..(off + i) * 4 + 4];
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        off += count;
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| ckpt_err(dir, format!("tensor `{name}`: {e}")))?;
        weights.push((name, arr));
    }

    let meta_text = String::from_utf8(read(META_FILE)?)
        .map_err(|_| ckpt_err(dir, "metadata is not valid UTF-8"))?;
    let mut stage = None;
    let mut seed = None;
    let mut variant = None;
    let mut config = Vec::new();
    for line in meta_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ckpt_err(dir, format!("metadata line `{line}` is not key=value")));
        };
        match k {
            "stage" => stage = Some(v.to_string()),
            "seed" => {
                seed = Some(v.parse::<u64>().map_err(|_| {
                    ckpt_err(dir, format!("metadata seed `{v}` is not an integer"))
                })?)
            }
            "variant" => variant = Some(v.to_string()),
            _ => {
                if let Some(key) = k.strip_prefix("config.") {
                    config.push((key.to_string(), v.to_string()));
                } else {
                    return Err(ckpt_err(dir, format!("unknown metadata key `{k}`")));
                }
            }
        }
    }
    let meta = CheckpointMeta {
        stage: stage.ok_or_else(|| ckpt_err(dir, "metadata missing stage"))?,
        seed: seed.ok_or_else(|| ckpt_err(dir, "metadata missing seed"))?,
        variant: variant.unwrap_or_default(),
        config,
    };
    Ok((weights, meta))
}

/// An in-memory checkpoint: the named tensors and metadata exactly as they
/// are written to a checkpoint directory. Training ops return one of these;
/// drivers decide where it lands on disk.
#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub weights: Vec<(String, ArrayD<f32>)>,
    pub meta: CheckpointMeta,
}

impl CheckpointBundle {
    /// Packs parameter-store entries, narrowing to the f32 payload type.
    pub fn from_entries<F: Scalar>(
        entries: Vec<(String, ArrayD<F>)>,
        meta: CheckpointMeta,
    ) -> Self {
        let weights = entries
            .into_iter()
            .map(|(n, a)| (n, a.mapv(|v| Scalar::to_f64(v) as f32)))
            .collect();
        CheckpointBundle { weights, meta }
    }

    /// The stored tensors widened to the model's scalar type.
    pub fn entries_as<F: Scalar>(&self) -> Vec<(String, ArrayD<F>)> {
        self.weights
            .iter()
            .map(|(n, a)| (n.clone(), a.mapv(|v| F::from_f64(v as f64))))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.weights, &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (weights, meta) = load_checkpoint(dir)?;
        Ok(CheckpointBundle { weights, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: "coarse".into(),
            seed: 42,
            variant: "sparn".into(),
            config: vec![("resolution".into(), "64".into())],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let weights = vec![
            (
                "a.weight".to_string(),
                arr2(&[[1.0f32, 2.0], [3.0, 4.0]]).into_dyn(),
            ),
            (
                "b.bias".to_string(),
                ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1f32, -0.25, 1e-20]).unwrap(),
            ),
        ];
        save_checkpoint(dir.path(), &weights, &meta()).unwrap();
        let (loaded, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.len(), 2);
        for ((n0, t0), (n1, t1)) in weights.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (x, y) in t0.iter().zip(t1.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_mapping_is_a_valid_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &[], &meta()).unwrap();
        let (loaded, m) = load_checkpoint(dir.path()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(m.stage, "coarse");
    }

    #[test]
    fn truncated_payload_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let weights = vec![(
            "w".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        )];
        save_checkpoint(dir.path(), &weights, &meta()).unwrap();
        let bin = dir.path().join(WEIGHTS_FILE);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.pop();
        std::fs::write(&bin, bytes).unwrap();
        let e = load_checkpoint(dir.path()).unwrap_err();
        assert!(e.to_string().contains("payload"), "{e}");
    }

    #[test]
    fn manifest_payload_shape_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let weights = vec![(
            "w".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f32, 2.0]).unwrap(),
        )];
        save_checkpoint(dir.path(), &weights, &meta()).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "w 3\n").unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn scalar_tensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let weights = vec![(
            "s".to_string(),
            ArrayD::from_elem(IxDyn(&[]), 0.5f32),
        )];
        save_checkpoint(dir.path(), &weights, &meta()).unwrap();
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded[0].1.ndim(), 0);
        assert_eq!(loaded[0].1[IxDyn(&[])], 0.5);
    }

    #[test]
    fn non_finite_weights_are_refused_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let weights = vec![(
            "w".to_string(),
            ArrayD::from_elem(IxDyn(&[1]), f32::NAN),
        )];
        assert!(save_checkpoint(dir.path(), &weights, &meta()).is_err());
    }
}
