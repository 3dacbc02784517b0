//! Evaluation metrics (SSIM, a perceptual-distance proxy, FID) and the
//! bucketed evaluation protocol, including the diversity score.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use autodiff::{Scalar, Tensor};

use crate::core::error::{InpaintError, Result};
use crate::core::rng::{fork, Rng};
use crate::core::types::{ImageTensor, Mask};
use crate::harness::pipeline::{infer, Pipeline};
use crate::losses::{ssim_per_sample, FeatureExtractor};
use crate::maskgen::{
    generate_stroke_mask, generate_training_masks, mask_ratio, MaskParams,
};

const COV_EPS: f64 = 1e-6;
const SQRTM_TOL: f64 = 1e-6;

/// Single-scale SSIM (11x11 Gaussian window, standard stabilizers),
/// batch-meaned.
pub fn ssim<F: Scalar>(a: &ImageTensor<F>, b: &ImageTensor<F>) -> Result<f64> {
    Ok(Scalar::to_f64(ssim_per_sample(a, b)?.mean_all().item()))
}

/// Perceptual distance proxy: mean over extractor layers of the spatial
/// mean L2 distance between channel-unit-normalized feature vectors. Not a
/// calibrated LPIPS; named `lpips_proxy` in all outputs.
pub fn perceptual_distance<F: Scalar>(
    a: &ImageTensor<F>,
    b: &ImageTensor<F>,
    fx: &FeatureExtractor<F>,
) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(InpaintError::Shape(format!(
            "perceptual_distance: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let eps = F::from_f64(1e-10);
    let unit = |f: &Tensor<F>| {
        let norm = f.mul(f).sum_axes(&[1], true).add_scalar(eps).sqrt();
        f.div(&norm)
    };
    let fa = fx.features(a.tensor());
    let fb = fx.features(b.tensor());
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (ux, uy) = (unit(x), unit(y));
        let diff = ux.sub(&uy);
        let dist = diff
            .mul(&diff)
            .sum_axes(&[1], false)
            .sqrt()
            .mean_all();
        total += Scalar::to_f64(dist.item());
    }
    Ok(total / fa.len() as f64)
}

fn mean_and_cov(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let mut mu = DVector::zeros(d);
    for row in x.rows() {
        for (j, v) in row.iter().enumerate() {
            mu[j] += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in x.rows() {
        let centered = DVector::from_iterator(d, row.iter().cloned()) - &mu;
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from roundoff are clamped to zero. Returns (root, inverse root).
fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let d = m.nrows();
    let mut root = DMatrix::zeros(d, d);
    let mut inv_root = DMatrix::zeros(d, d);
    for i in 0..d {
        let lam = eig.eigenvalues[i].max(0.0);
        let s = lam.sqrt();
        let si = if s > 0.0 { 1.0 / s } else { 0.0 };
        let u = eig.eigenvectors.column(i);
        root += u * u.transpose() * s;
        inv_root += u * u.transpose() * si;
    }
    (root, inv_root)
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples). Covariances are regularized with ε·I, and the matrix square
/// root is validated by squaring on every call.
pub fn fid(features_a: &Array2<f64>, features_b: &Array2<f64>) -> Result<f64> {
    let d = features_a.ncols();
    if features_b.ncols() != d {
        return Err(InpaintError::Shape(format!(
            "fid: feature dims differ ({} vs {})",
            d,
            features_b.ncols()
        )));
    }
    for (name, n) in [("a", features_a.nrows()), ("b", features_b.nrows())] {
        if n < d + 1 {
            return Err(InpaintError::Invalid(format!(
                "fid: set {name} has {n} vectors, needs at least dim+1 = {}",
                d + 1
            )));
        }
    }
    let (mu_a, mut sig_a) = mean_and_cov(features_a);
    let (mu_b, mut sig_b) = mean_and_cov(features_b);
    for i in 0..d {
        sig_a[(i, i)] += COV_EPS;
        sig_b[(i, i)] += COV_EPS;
    }

    let (a_half, a_half_inv) = sqrtm_psd(&sig_a);
    let inner = &a_half * &sig_b * &a_half;
    let (t, _) = sqrtm_psd(&inner);

    // (Σa Σb)^(1/2) = Σa^(1/2) T Σa^(-1/2); validate by squaring.
    let s = &a_half * &t * &a_half_inv;
    let prod = &sig_a * &sig_b;
    let resid = (&s * &s - &prod).norm() / prod.norm();
    if resid >= SQRTM_TOL {
        return Err(InpaintError::Invalid(format!(
            "fid: matrix square root failed validation (relative residual {resid:.3e})"
        )));
    }

    let dmu = &mu_a - &mu_b;
    let value = dmu.dot(&dmu) + sig_a.trace() + sig_b.trace() - 2.0 * t.trace();
    Ok(value.max(0.0))
}

/// FID feature embedding: the extractor's penultimate stage, global-average
/// pooled, one row per sample. Optionally truncated to the first `max_dim`
/// channels so small evaluation sets still fit a covariance.
pub fn image_features<F: Scalar>(
    images: &ImageTensor<F>,
    fx: &FeatureExtractor<F>,
    max_dim: usize,
) -> Array2<f64> {
    let feats = fx.features(images.tensor());
    let stage = &feats[feats.len().saturating_sub(2)];
    let pooled = stage.mean_axes(&[2, 3], false);
    let (n, c) = (pooled.shape()[0], pooled.shape()[1]);
    let keep = c.min(max_dim);
    let mut out = Array2::zeros((n, keep));
    let data = pooled.data();
    for i in 0..n {
        for j in 0..keep {
            out[[i, j]] = Scalar::to_f64(data[[i, j]]);
        }
    }
    out
}

/// Mean over images of the mean pairwise perceptual distance among `k`
/// completions per image, each from its own delta draw.
pub fn diversity_score<F: Scalar>(
    pipeline: &Pipeline<F>,
    images: &ImageTensor<F>,
    masks: &Mask<F>,
    k: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if k < 2 {
        return Err(InpaintError::Invalid(format!(
            "diversity_score needs k >= 2, got {k}"
        )));
    }
    let n = images.batch();
    if n == 0 || masks.batch() != n {
        return Err(InpaintError::Shape(format!(
            "diversity_score: {} images vs {} masks",
            n,
            masks.batch()
        )));
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let img = ImageTensor::new(images.tensor().narrow(0, i, 1))?;
        let mask = Mask::from_array(masks.tensor().narrow(0, i, 1).data().clone())?;
        let outs = infer(
            pipeline,
            &img,
            &mask,
            k,
            pipeline.config.delta_magnitude,
            rng,
        )?;
        let mut pair_sum = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                pair_sum += perceptual_distance(&outs[p], &outs[q], &pipeline.extractor)?;
            }
        }
        total += pair_sum / pairs;
    }
    Ok(total / n as f64)
}

/// One metrics row: reconstruction metrics for a mask bucket.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub bucket: String,
    pub ssim: f64,
    pub lpips_proxy: f64,
    pub fid: f64,
}

/// Bucketed evaluation results, tagged with the generator variant.
#[derive(Clone, Debug)]
pub struct MetricsTable {
    pub variant: String,
    pub rows: Vec<MetricRow>,
    pub diversity: Vec<(String, f64)>,
}

impl MetricsTable {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(r.ssim.is_finite() && r.lpips_proxy.is_finite() && r.fid.is_finite()) {
                return Err(InpaintError::Invalid(format!(
                    "metrics row `{}` contains a non-finite value",
                    r.bucket
                )));
            }
        }
        for (b, v) in &self.diversity {
            if !v.is_finite() {
                return Err(InpaintError::Invalid(format!(
                    "diversity row `{b}` is non-finite"
                )));
            }
        }
        Ok(())
    }

    /// Aligned plain-text rendering.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("variant: {}\n\n", self.variant));
        s.push_str(&format!(
            "{:<12} {:>10} {:>14} {:>12}\n",
            "bucket", "ssim", "lpips_proxy", "fid"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>10.6} {:>14.6} {:>12.6}\n",
                r.bucket, r.ssim, r.lpips_proxy, r.fid
            ));
        }
        s.push('\n');
        s.push_str(&format!("{:<12} {:>10}\n", "bucket", "diversity"));
        for (b, v) in &self.diversity {
            s.push_str(&format!("{:<12} {:>10.6}\n", b, v));
        }
        s
    }

    /// Machine-readable rows: `variant,bucket,metric,value`.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("variant,bucket,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},ssim,{}\n", self.variant, r.bucket, r.ssim));
            s.push_str(&format!(
                "{},{},lpips_proxy,{}\n",
                self.variant, r.bucket, r.lpips_proxy
            ));
            s.push_str(&format!("{},{},fid,{}\n", self.variant, r.bucket, r.fid));
        }
        for (b, v) in &self.diversity {
            s.push_str(&format!("{},{},diversity,{}\n", self.variant, b, v));
        }
        s
    }
}

/// Reconstruction metrics for one batch of completions against ground
/// truth.
fn metric_row<F: Scalar>(
    bucket: &str,
    outs: &ImageTensor<F>,
    gts: &ImageTensor<F>,
    fx: &FeatureExtractor<F>,
) -> Result<MetricRow> {
    let n = outs.batch();
    let fid_dim = n.saturating_sub(1).max(1);
    let fa = image_features(outs, fx, fid_dim);
    let fb = image_features(gts, fx, fid_dim);
    Ok(MetricRow {
        bucket: bucket.to_string(),
        ssim: ssim(outs, gts)?,
        lpips_proxy: perceptual_distance(outs, gts, fx)?,
        fid: fid(&fa, &fb)?,
    })
}

enum BucketKind {
    Stroke,
    Ratio(f64, f64),
}

fn sample_bucket_mask<F: Scalar>(
    kind: &BucketKind,
    name: &str,
    resolution: usize,
    params: &MaskParams,
    rng: &mut Rng,
) -> Result<Mask<F>> {
    match kind {
        BucketKind::Stroke => generate_stroke_mask(resolution, params, rng),
        BucketKind::Ratio(lo, hi) => {
            const ATTEMPTS: usize = 2000;
            for _ in 0..ATTEMPTS {
                let m = generate_training_masks(resolution, params, 1, rng)?;
                let r = mask_ratio(&m);
                if r >= *lo && r < *hi {
                    return Ok(m);
                }
            }
            Err(InpaintError::Dataset(format!(
                "bucket {name} starved: no mask hit ratio [{lo}, {hi}) in {ATTEMPTS} attempts"
            )))
        }
    }
}

fn gather_rows<F: Scalar>(pool: &ImageTensor<F>, indices: &[usize]) -> Result<ImageTensor<F>> {
    let parts: Vec<Tensor<F>> = indices
        .iter()
        .map(|&i| pool.tensor().narrow(0, i, 1))
        .collect();
    ImageTensor::new(Tensor::constant(Tensor::concat(&parts, 0).data().clone()))
}

/// Bucketed evaluation: a stroke-mask row plus one row per hole-ratio
/// bucket, reconstruction metrics at delta = 0 and diversity at the
/// configured magnitude.
pub fn evaluate_buckets<F: Scalar>(
    pipeline: &Pipeline<F>,
    dataset: &ImageTensor<F>,
    bucket_list: &[(f64, f64)],
    per_bucket_count: usize,
    rng: &mut Rng,
) -> Result<MetricsTable> {
    let n = dataset.batch();
    if n == 0 {
        return Err(InpaintError::Dataset(
            "evaluation dataset is empty".into(),
        ));
    }
    if per_bucket_count < 2 {
        return Err(InpaintError::Invalid(
            "evaluation needs at least 2 images per bucket".into(),
        ));
    }
    for (i, (lo, hi)) in bucket_list.iter().enumerate() {
        if !(0.0 <= *lo && lo < hi && *hi <= 1.0) {
            return Err(InpaintError::Invalid(format!(
                "bad bucket [{lo}, {hi})"
            )));
        }
        for (lo2, hi2) in &bucket_list[i + 1..] {
            if lo.max(*lo2) < hi.min(*hi2) {
                return Err(InpaintError::Invalid(format!(
                    "buckets [{lo}, {hi}) and [{lo2}, {hi2}) overlap"
                )));
            }
        }
    }

    let res = pipeline.resolution();
    let params = MaskParams::for_resolution(res);
    let cfg = &pipeline.config;

    let mut buckets: Vec<(String, BucketKind)> = vec![("quickdraw".into(), BucketKind::Stroke)];
    for (lo, hi) in bucket_list {
        let name = format!("{}-{}%", (lo * 100.0).round() as u64, (hi * 100.0).round() as u64);
        buckets.push((name, BucketKind::Ratio(*lo, *hi)));
    }

    let mut rows = Vec::new();
    let mut diversity = Vec::new();
    for (name, kind) in &buckets {
        let mut row_rng = fork(rng);
        let indices = crate::coarsenet::sample_indices(n, per_bucket_count, &mut row_rng);
        let gts = gather_rows(dataset, &indices)?;

        let mut outs = Vec::with_capacity(per_bucket_count);
        for i in 0..per_bucket_count {
            let gt = ImageTensor::new(gts.tensor().narrow(0, i, 1))?;
            let mask = sample_bucket_mask::<F>(kind, name, res, &params, &mut row_rng)?;
            outs.push(pipeline.complete(&gt, &mask, 0, 0.0)?.tensor().clone());
        }
        let outs = ImageTensor::new(Tensor::constant(
            Tensor::concat(&outs, 0).data().clone(),
        ))?;
        rows.push(metric_row(name, &outs, &gts, &pipeline.extractor)?);

        // Diversity over its own draw of images and masks, delta active.
        let div_n = cfg.diversity_images.min(n).max(1);
        let div_idx = crate::coarsenet::sample_indices(n, div_n, &mut row_rng);
        let div_imgs = gather_rows(dataset, &div_idx)?;
        let mut div_masks = Vec::with_capacity(div_n);
        for _ in 0..div_n {
            div_masks.push(
                sample_bucket_mask::<F>(kind, name, res, &params, &mut row_rng)?
                    .tensor()
                    .clone(),
            );
        }
        let div_masks = Mask::from_array(Tensor::concat(&div_masks, 0).data().clone())?;
        let score = diversity_score(
            pipeline,
            &div_imgs,
            &div_masks,
            cfg.diversity_k,
            &mut row_rng,
        )?;
        diversity.push((name.clone(), score));
    }

    let table = MetricsTable {
        variant: pipeline.variant().name().to_string(),
        rows,
        diversity,
    };
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::rng::seeded_rng;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn rand_image(rng: &mut Rng, b: usize, r: usize) -> ImageTensor<f64> {
        let data: Vec<f64> = (0..b * 3 * r * r)
            .map(|_| rng.gen_range(-0.95..0.95))
            .collect();
        ImageTensor::from_array(ArrayD::from_shape_vec(IxDyn(&[b, 3, r, r]), data).unwrap())
            .unwrap()
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_oracle() {
        let mut rng = seeded_rng(0);
        let a = rand_image(&mut rng, 2, 16);
        let b = rand_image(&mut rng, 2, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);

        // Constant images 0 and 1: luminance = C1 / (1 + C1), contrast = 1.
        let zero =
            ImageTensor::from_array(ArrayD::from_elem(IxDyn(&[1, 3, 16, 16]), 0.0)).unwrap();
        let one =
            ImageTensor::from_array(ArrayD::from_elem(IxDyn(&[1, 3, 16, 16]), 1.0)).unwrap();
        let c1 = 0.0004;
        let expected = c1 / (1.0 + c1);
        let got = ssim(&zero, &one).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");

        let small = rand_image(&mut rng, 1, 8);
        assert!(ssim(&a, &small).is_err());
    }

    #[test]
    fn perceptual_distance_identity_symmetry_monotonicity() {
        let fx = FeatureExtractor::<f64>::standard();
        let mut rng = seeded_rng(1);
        let a = rand_image(&mut rng, 1, 16);
        assert_eq!(perceptual_distance(&a, &a, &fx).unwrap(), 0.0);

        let b = rand_image(&mut rng, 1, 16);
        let ab = perceptual_distance(&a, &b, &fx).unwrap();
        let ba = perceptual_distance(&b, &a, &fx).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);

        // Bigger offsets never read as closer, in at least 9 of 10 trials.
        let mut hits = 0;
        for t in 0..10 {
            let x = rand_image(&mut rng, 1, 16);
            let shift = |eps: f64| {
                let d = x.tensor().data().mapv(|v| (v + eps).clamp(-1.0, 1.0));
                ImageTensor::from_array(d).unwrap()
            };
            let d1 = perceptual_distance(&x, &shift(0.02), &fx).unwrap();
            let d2 = perceptual_distance(&x, &shift(0.04), &fx).unwrap();
            if d2 >= d1 {
                hits += 1;
            } else {
                eprintln!("trial {t}: {d2} < {d1}");
            }
        }
        assert!(hits >= 9, "monotone trend failed: {hits}/10");
    }

    fn gaussian_sample(rng: &mut Rng, n: usize, d: usize, mean: f64) -> Array2<f64> {
        let normal = Normal::new(mean, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| normal.sample(rng))
    }

    #[test]
    fn fid_identity_symmetry_and_moment_oracle() {
        let mut rng = seeded_rng(2);
        let a = gaussian_sample(&mut rng, 500, 64, 0.0);
        let same = fid(&a, &a).unwrap();
        assert!(same < 1e-3, "identical sets gave {same}");

        let b = gaussian_sample(&mut rng, 500, 64, 0.5);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "asymmetry {}", (ab - ba).abs());

        // Independent oracle: trace term from the complex eigenvalues of
        // the raw covariance product, no matrix square root involved.
        let (mu_a, mut sig_a) = mean_and_cov(&a);
        let (mu_b, mut sig_b) = mean_and_cov(&b);
        for i in 0..64 {
            sig_a[(i, i)] += COV_EPS;
            sig_b[(i, i)] += COV_EPS;
        }
        let prod = &sig_a * &sig_b;
        let eigs = prod.complex_eigenvalues();
        let tr_sqrt: f64 = eigs.iter().map(|z| z.re.max(0.0).sqrt()).sum();
        let dmu = &mu_a - &mu_b;
        let oracle = dmu.dot(&dmu) + sig_a.trace() + sig_b.trace() - 2.0 * tr_sqrt;
        assert!(
            (ab - oracle).abs() / oracle.abs() < 0.05,
            "fid {ab} vs oracle {oracle}"
        );
        // The population distance for mean offset 0.5 in 64 dims is 16.
        assert!(ab > 10.0 && ab < 40.0, "implausible fid {ab}");

        let tiny = gaussian_sample(&mut rng, 10, 64, 0.0);
        let err = fid(&tiny, &a).unwrap_err();
        assert!(err.to_string().contains("at least dim+1"), "{err}");
    }

    #[test]
    fn metric_row_short_circuits_on_ground_truth() {
        let mut rng = seeded_rng(3);
        let gts = rand_image(&mut rng, 4, 16);
        let fx = FeatureExtractor::<f64>::standard();
        let row = metric_row("self", &gts, &gts, &fx).unwrap();
        assert!((row.ssim - 1.0).abs() < 1e-6);
        assert_eq!(row.lpips_proxy, 0.0);
        assert!(row.fid < 1e-3);
    }

    #[test]
    fn table_rendering_is_tagged_and_parseable() {
        let table = MetricsTable {
            variant: "sparn".into(),
            rows: vec![MetricRow {
                bucket: "10-20%".into(),
                ssim: 0.75,
                lpips_proxy: 0.1,
                fid: 3.5,
            }],
            diversity: vec![("10-20%".into(), 0.02)],
        };
        table.validate().unwrap();
        let text = table.render_text();
        assert!(text.contains("variant: sparn"));
        assert!(text.contains("10-20%"));
        let csv = table.render_csv();
        assert!(csv.lines().any(|l| l == "sparn,10-20%,ssim,0.75"));
        assert!(csv.lines().any(|l| l == "sparn,10-20%,diversity,0.02"));

        let bad = MetricsTable {
            variant: "sparn".into(),
            rows: vec![MetricRow {
                bucket: "x".into(),
                ssim: f64::NAN,
                lpips_proxy: 0.0,
                fid: 0.0,
            }],
            diversity: vec![],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn image_features_shape_and_truncation() {
        let mut rng = seeded_rng(4);
        let imgs = rand_image(&mut rng, 3, 16);
        let fx = FeatureExtractor::<f64>::standard();
        let full = image_features(&imgs, &fx, usize::MAX);
        assert_eq!(full.nrows(), 3);
        assert!(full.ncols() >= 3);
        let cut = image_features(&imgs, &fx, 2);
        assert_eq!(cut.ncols(), 2);
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(cut[[i, j]], full[[i, j]]);
            }
        }
    }
}
