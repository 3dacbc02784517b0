//! Plain-text `key=value` configuration with documented defaults for every
//! knob. Unknown keys are rejected rather than ignored, and every diagnostic
//! carries the offending line number.

use std::path::Path;

use super::error::{InpaintError, Result};

/// Loss-term weights and the style-variant count used during adversarial
/// training.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_ssim: f64,
    pub lambda_sty: f64,
    pub lambda_hole: f64,
    pub lambda_valid: f64,
    pub lambda_gp: f64,
    /// Number of perturbed style variants fed to the generator per sample.
    pub alpha: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 0.5,
            lambda_ssim: 120.0,
            lambda_sty: 3.0,
            lambda_hole: 0.5,
            lambda_valid: 0.5,
            lambda_gp: 10.0,
            alpha: 4,
        }
    }
}

/// Every run-controlling setting, all overridable from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub resolution: usize,
    /// Channel width multiplier shared by all networks.
    pub base_width: usize,
    /// Dimension D of each per-layer style vector.
    pub style_dim: usize,
    pub weights: LossWeights,
    pub lr_coarse: f64,
    pub lr_latent: f64,
    pub lr_gen: f64,
    pub lr_critic: f64,
    pub steps_coarse: usize,
    pub steps_latent: usize,
    pub steps_gan: usize,
    pub batch_size: usize,
    /// Top eigen-directions eligible for training-time perturbation.
    pub num_directions: usize,
    /// Training deltas are drawn uniform(-magnitude, magnitude).
    pub delta_magnitude: f64,
    pub sefa_layer_start: usize,
    /// Exclusive end of the factorized layer range; 0 means "through the
    /// last layer".
    pub sefa_layer_end: usize,
    pub train_split: f64,
    pub data_dir: String,
    pub eval_buckets: Vec<(f64, f64)>,
    pub eval_per_bucket: usize,
    pub diversity_images: usize,
    pub diversity_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resolution: 64,
            base_width: 64,
            style_dim: 128,
            weights: LossWeights::default(),
            lr_coarse: 1e-3,
            lr_latent: 1e-3,
            lr_gen: 2e-4,
            lr_critic: 2e-4,
            steps_coarse: 300,
            steps_latent: 300,
            steps_gan: 300,
            batch_size: 4,
            num_directions: 8,
            delta_magnitude: 3.0,
            sefa_layer_start: 0,
            sefa_layer_end: 0,
            train_split: 0.8,
            data_dir: "data".into(),
            eval_buckets: vec![(0.1, 0.2), (0.2, 0.3)],
            eval_per_bucket: 8,
            diversity_images: 32,
            diversity_k: 4,
        }
    }
}

impl TrainConfig {
    /// Number of modulated synthesis layers: two per upsampling level from
    /// the 4x4 constant up to the configured resolution.
    pub fn style_layers(&self) -> usize {
        2 * (self.resolution as f64 / 4.0).log2() as usize
    }

    /// Resolved [start, end) layer range for factorization.
    pub fn sefa_layer_range(&self) -> (usize, usize) {
        let end = if self.sefa_layer_end == 0 {
            self.style_layers()
        } else {
            self.sefa_layer_end
        };
        (self.sefa_layer_start, end)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(InpaintError::Invalid(msg));
        if self.resolution < 32 || !self.resolution.is_power_of_two() {
            return bad(format!(
                "resolution must be a power of 2 >= 32, got {}",
                self.resolution
            ));
        }
        for (name, v) in [
            ("lambda_adv", self.weights.lambda_adv),
            ("lambda_ssim", self.weights.lambda_ssim),
            ("lambda_sty", self.weights.lambda_sty),
            ("lambda_hole", self.weights.lambda_hole),
            ("lambda_valid", self.weights.lambda_valid),
            ("lambda_gp", self.weights.lambda_gp),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name}: nonnegative required, got {v}"));
            }
        }
        if self.weights.alpha < 1 {
            return bad("alpha must be >= 1".into());
        }
        for (name, v) in [
            ("lr_coarse", self.lr_coarse),
            ("lr_latent", self.lr_latent),
            ("lr_gen", self.lr_gen),
            ("lr_critic", self.lr_critic),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.base_width < 4 {
            return bad("base_width must be >= 4".into());
        }
        if self.style_dim < 2 {
            return bad("style_dim must be >= 2".into());
        }
        if self.num_directions < 1 || self.num_directions > self.style_dim {
            return bad(format!(
                "num_directions must be in [1, style_dim={}], got {}",
                self.style_dim, self.num_directions
            ));
        }
        if self.delta_magnitude < 0.0 {
            return bad("delta_magnitude: nonnegative required".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("steps_coarse", self.steps_coarse),
            ("steps_latent", self.steps_latent),
            ("steps_gan", self.steps_gan),
        ] {
            if v < 1 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.train_split > 0.0 && self.train_split < 1.0) {
            return bad(format!(
                "train_split must be in (0, 1), got {}",
                self.train_split
            ));
        }
        let layers = self.style_layers();
        let (s, e) = self.sefa_layer_range();
        if s >= e || e > layers {
            return bad(format!(
                "sefa layer range [{s}, {e}) invalid for {layers} layers"
            ));
        }
        if self.data_dir.is_empty() {
            return bad("data_dir must not be empty".into());
        }
        if self.eval_buckets.is_empty() {
            return bad("eval_buckets must list at least one bucket".into());
        }
        for &(lo, hi) in &self.eval_buckets {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad(format!("eval bucket [{lo}, {hi}] is not a valid ratio range"));
            }
        }
        if self.eval_per_bucket < 1 {
            return bad("eval_per_bucket must be >= 1".into());
        }
        if self.diversity_images < 1 {
            return bad("diversity_images must be >= 1".into());
        }
        if self.diversity_k < 2 {
            return bad("diversity_k must be >= 2".into());
        }
        Ok(())
    }

    /// Canonical (key, value) listing, used for checkpoint metadata and the
    /// determinism of everything derived from it.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let buckets = self
            .eval_buckets
            .iter()
            .map(|(lo, hi)| format!("{lo}:{hi}"))
            .collect::<Vec<_>>()
            .join(",");
        [
            ("resolution", self.resolution.to_string()),
            ("base_width", self.base_width.to_string()),
            ("style_dim", self.style_dim.to_string()),
            ("alpha", w.alpha.to_string()),
            ("lambda_adv", w.lambda_adv.to_string()),
            ("lambda_ssim", w.lambda_ssim.to_string()),
            ("lambda_sty", w.lambda_sty.to_string()),
            ("lambda_hole", w.lambda_hole.to_string()),
            ("lambda_valid", w.lambda_valid.to_string()),
            ("lambda_gp", w.lambda_gp.to_string()),
            ("lr_coarse", self.lr_coarse.to_string()),
            ("lr_latent", self.lr_latent.to_string()),
            ("lr_gen", self.lr_gen.to_string()),
            ("lr_critic", self.lr_critic.to_string()),
            ("steps_coarse", self.steps_coarse.to_string()),
            ("steps_latent", self.steps_latent.to_string()),
            ("steps_gan", self.steps_gan.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("num_directions", self.num_directions.to_string()),
            ("delta_magnitude", self.delta_magnitude.to_string()),
            ("sefa_layer_start", self.sefa_layer_start.to_string()),
            ("sefa_layer_end", self.sefa_layer_end.to_string()),
            ("train_split", self.train_split.to_string()),
            ("data_dir", self.data_dir.clone()),
            ("eval_buckets", buckets),
            ("eval_per_bucket", self.eval_per_bucket.to_string()),
            ("diversity_images", self.diversity_images.to_string()),
            ("diversity_k", self.diversity_k.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| InpaintError::io(path.display().to_string(), e))?;
    parse_config(&text, &path.display().to_string())
}

/// Parses config text. `origin` labels diagnostics (a path, or a test tag).
pub fn parse_config(text: &str, origin: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();
    let err = |line: usize, msg: String| InpaintError::Config {
        path: origin.to_string(),
        line,
        msg,
    };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(lineno, format!("expected key=value, got `{line}`")));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(err(lineno, format!("duplicate key `{key}`")));
        }
        seen.push(key.to_string());

        let fnum = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| err(lineno, format!("`{v}` is not a number for key `{key}`")))
        };
        let unum = |v: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| {
                err(lineno, format!("`{v}` is not a nonnegative integer for key `{key}`"))
            })
        };

        match key {
            "resolution" => cfg.resolution = unum(value)?,
            "base_width" => cfg.base_width = unum(value)?,
            "style_dim" => cfg.style_dim = unum(value)?,
            "alpha" => cfg.weights.alpha = unum(value)?,
            "lambda_adv" => cfg.weights.lambda_adv = fnum(value)?,
            "lambda_ssim" => cfg.weights.lambda_ssim = fnum(value)?,
            "lambda_sty" => cfg.weights.lambda_sty = fnum(value)?,
            "lambda_hole" => cfg.weights.lambda_hole = fnum(value)?,
            "lambda_valid" => cfg.weights.lambda_valid = fnum(value)?,
            "lambda_gp" => cfg.weights.lambda_gp = fnum(value)?,
            "lr_coarse" => cfg.lr_coarse = fnum(value)?,
            "lr_latent" => cfg.lr_latent = fnum(value)?,
            "lr_gen" => cfg.lr_gen = fnum(value)?,
            "lr_critic" => cfg.lr_critic = fnum(value)?,
            "steps_coarse" => cfg.steps_coarse = unum(value)?,
            "steps_latent" => cfg.steps_latent = unum(value)?,
            "steps_gan" => cfg.steps_gan = unum(value)?,
            "batch_size" => cfg.batch_size = unum(value)?,
            "num_directions" => cfg.num_directions = unum(value)?,
            "delta_magnitude" => cfg.delta_magnitude = fnum(value)?,
            "sefa_layer_start" => cfg.sefa_layer_start = unum(value)?,
            "sefa_layer_end" => cfg.sefa_layer_end = unum(value)?,
            "train_split" => cfg.train_split = fnum(value)?,
            "data_dir" => cfg.data_dir = value.to_string(),
            "eval_buckets" => cfg.eval_buckets = parse_buckets(value, lineno, origin)?,
            "eval_per_bucket" => cfg.eval_per_bucket = unum(value)?,
            "diversity_images" => cfg.diversity_images = unum(value)?,
            "diversity_k" => cfg.diversity_k = unum(value)?,
            _ => return Err(err(lineno, format!("unknown key `{key}`"))),
        }
    }

    cfg.validate().map_err(|e| InpaintError::Config {
        path: origin.to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok(cfg)
}

fn parse_buckets(value: &str, lineno: usize, origin: &str) -> Result<Vec<(f64, f64)>> {
    let err = |msg: String| InpaintError::Config {
        path: origin.to_string(),
        line: lineno,
        msg,
    };
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let Some((lo, hi)) = part.split_once(':') else {
            return Err(err(format!("bucket `{part}` must be lo:hi")));
        };
        let lo = lo
            .trim()
            .parse::<f64>()
            .map_err(|_| err(format!("bucket bound `{lo}` is not a number")))?;
        let hi = hi
            .trim()
            .parse::<f64>()
            .map_err(|_| err(format!("bucket bound `{hi}` is not a number")))?;
        out.push((lo, hi));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = parse_config("", "test").unwrap();
        assert_eq!(cfg.weights.lambda_adv, 0.5);
        assert_eq!(cfg.weights.lambda_ssim, 120.0);
        assert_eq!(cfg.weights.lambda_sty, 3.0);
        assert_eq!(cfg.weights.lambda_hole, 0.5);
        assert_eq!(cfg.weights.lambda_valid, 0.5);
        assert_eq!(cfg.weights.lambda_gp, 10.0);
        assert_eq!(cfg.weights.alpha, 4);
        assert_eq!(cfg.resolution, 64);
    }

    #[test]
    fn single_override_keeps_other_defaults() {
        let cfg = parse_config("lambda_hole=6.0\n", "test").unwrap();
        assert_eq!(cfg.weights.lambda_hole, 6.0);
        assert_eq!(cfg.weights.lambda_valid, 0.5);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let e = parse_config("lambda_hole=-1\n", "test").unwrap_err();
        assert!(e.to_string().contains("nonnegative required"), "{e}");
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let e = parse_config("alpha=2\nlambda_zap=1\n", "test").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("unknown key"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let e = parse_config("\n\nresolution 64\n", "test").unwrap_err();
        assert!(e.to_string().contains(":3:"), "{e}");
    }

    #[test]
    fn bad_number_reports_key() {
        let e = parse_config("alpha=three\n", "test").unwrap_err();
        assert!(e.to_string().contains("alpha"), "{e}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let e = parse_config("alpha=2\nalpha=3\n", "test").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# full line comment\n\nalpha=2  # trailing comment\n";
        let cfg = parse_config(text, "test").unwrap();
        assert_eq!(cfg.weights.alpha, 2);
    }

    #[test]
    fn resolution_must_be_power_of_two_at_least_32() {
        assert!(parse_config("resolution=48\n", "test").is_err());
        assert!(parse_config("resolution=16\n", "test").is_err());
        assert!(parse_config("resolution=128\n", "test").is_ok());
    }

    #[test]
    fn style_layer_count_follows_resolution() {
        let cfg = parse_config("", "test").unwrap();
        assert_eq!(cfg.style_layers(), 8); // 64 = 4 * 2^4, two layers per level
        let cfg = parse_config("resolution=256\n", "test").unwrap();
        assert_eq!(cfg.style_layers(), 12);
    }

    #[test]
    fn bucket_list_parses_and_validates() {
        let cfg = parse_config("eval_buckets=0.1:0.2,0.3:0.4\n", "test").unwrap();
        assert_eq!(cfg.eval_buckets, vec![(0.1, 0.2), (0.3, 0.4)]);
        assert!(parse_config("eval_buckets=0.5:0.4\n", "test").is_err());
        assert!(parse_config("eval_buckets=junk\n", "test").is_err());
    }

    #[test]
    fn sefa_range_resolves_zero_end_to_all_layers() {
        let cfg = parse_config("", "test").unwrap();
        assert_eq!(cfg.sefa_layer_range(), (0, 8));
        let cfg = parse_config("sefa_layer_start=2\nsefa_layer_end=6\n", "test").unwrap();
        assert_eq!(cfg.sefa_layer_range(), (2, 6));
        assert!(parse_config("sefa_layer_start=8\n", "test").is_err());
    }
}
