//! Training objectives: masked reconstruction, masked perceptual and
//! gram-style distances over a fixed feature pyramid, multi-scale SSIM, the
//! WGAN gradient penalty, and the weighted total.
//!
//! All losses are built from differentiable tensor ops, so the same code
//! serves f32 training and f64 finite-difference verification.

use autodiff::nn::{Conv2d, ParamStore};
use autodiff::{backward, Scalar, Tensor, WindowSpec};
use rand::Rng as _;

use crate::core::config::LossWeights;
use crate::core::error::{InpaintError, Result};
use crate::core::rng::Rng;
use crate::core::types::{ImageTensor, Mask};
use crate::maskgen::{downsample_mask, reverse_mask};

/// Fixed random-feature pyramid standing in for a pretrained perceptual
/// network. Weights derive from a hardcoded internal seed, independent of
/// the run seed, so feature distances are comparable across runs; they are
/// deliberately not checkpointed.
pub struct FeatureExtractor<F: Scalar> {
    convs: Vec<Conv2d<F>>,
    #[allow(dead_code)]
    store: ParamStore<F>,
}

const FEATURE_SEED: u64 = 0x4645_4154;
const STAGE_WIDTHS: [usize; 5] = [16, 24, 32, 48, 64];

impl<F: Scalar> FeatureExtractor<F> {
    /// The standard 5-stage pyramid over RGB input: stride 1 at full
    /// resolution, then stride 2 per stage.
    pub fn standard() -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::core::rng::seeded_rng(FEATURE_SEED);
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in STAGE_WIDTHS.iter().enumerate() {
            let spec = if i == 0 {
                WindowSpec::new(3, 1, 1)
            } else {
                WindowSpec::new(3, 2, 1)
            };
            convs.push(Conv2d::new(
                &mut store,
                &format!("stage{i}"),
                in_ch,
                out_ch,
                spec,
                true,
                &mut rng,
            ));
            in_ch = out_ch;
        }
        store.set_frozen(true);
        FeatureExtractor { convs, store }
    }

    /// An extractor with no stages: `features(x)` returns `[x]`. Reduces the
    /// feature losses to plain masked pixel distances, which makes them
    /// checkable against direct arithmetic.
    pub fn identity() -> Self {
        FeatureExtractor {
            convs: Vec::new(),
            store: ParamStore::new(),
        }
    }

    /// Feature maps after each stage, coarsest last.
    pub fn features(&self, x: &Tensor<F>) -> Vec<Tensor<F>> {
        if self.convs.is_empty() {
            return vec![x.clone()];
        }
        let mut out = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = conv.forward(&cur).leaky_relu(F::from_f64(0.2));
            out.push(cur.clone());
        }
        out
    }

    pub fn num_stages(&self) -> usize {
        self.convs.len().max(1)
    }
}

/// One training step's named scalars, for logging and the weighted total.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub hole: f64,
    pub valid: f64,
    pub perceptual: f64,
    pub style: f64,
    pub ms_ssim: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub gp: f64,
    pub total: f64,
}

impl LossReport {
    pub fn names_and_values(&self) -> [(&'static str, f64); 9] {
        [
            ("hole", self.hole),
            ("valid", self.valid),
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("ms_ssim", self.ms_ssim),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("gp", self.gp),
            ("total", self.total),
        ]
    }

    /// `step,name,value` lines for the metrics log.
    pub fn log_lines(&self, step: usize) -> Vec<String> {
        self.names_and_values()
            .iter()
            .map(|(n, v)| format!("{step},{n},{v}"))
            .collect()
    }
}

/// Mean absolute difference restricted to `region` (a binary B×1×h×w map),
/// normalized by the number of masked elements. An empty region contributes
/// exactly zero.
fn region_mean_l1<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, region: &Tensor<F>) -> Tensor<F> {
    let channels = a.shape()[1];
    let marked: f64 = region.data().iter().map(|&v| Scalar::to_f64(v)).sum();
    let count = marked * channels as f64;
    if count == 0.0 {
        return Tensor::scalar(F::zero());
    }
    a.sub(b)
        .abs()
        .mul(region)
        .sum_all()
        .mul_scalar(F::from_f64(1.0 / count))
}

/// Per-region mean L1 reconstruction terms: (hole, valid).
pub fn hole_valid_loss<F: Scalar>(
    out: &ImageTensor<F>,
    gt: &ImageTensor<F>,
    mask: &Mask<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    check_image_pair(out, gt)?;
    check_image_mask(out, mask)?;
    let mr = reverse_mask(mask);
    let hole = region_mean_l1(out.tensor(), gt.tensor(), mr.tensor());
    let valid = region_mean_l1(out.tensor(), gt.tensor(), mask.tensor());
    Ok((hole, valid))
}

/// The mask (or its complement) resampled to a feature map's resolution.
/// Validity downsampling is hole-dominant, so the hole indicator at feature
/// scale is the complement of the downsampled validity map.
fn region_at_scale<F: Scalar>(mask: &Mask<F>, feat: &Tensor<F>, hole: bool) -> Result<Tensor<F>> {
    let (h, fh) = (mask.height(), feat.shape()[2]);
    if h % fh != 0 {
        return Err(InpaintError::Shape(format!(
            "feature height {fh} does not divide mask height {h}"
        )));
    }
    let ds = downsample_mask(mask, h / fh)?;
    Ok(if hole {
        reverse_mask(&ds).tensor().clone()
    } else {
        ds.tensor().clone()
    })
}

/// Masked perceptual distance: hole-region feature L1 between each generated
/// variant and its style source, plus valid-region feature L1 between the
/// primary output and the ground truth. Every term is mean-normalized by its
/// masked element count.
pub fn perceptual_loss<F: Scalar>(
    out_variants: &[ImageTensor<F>],
    style_variants: &[ImageTensor<F>],
    out: &ImageTensor<F>,
    gt: &ImageTensor<F>,
    mask: &Mask<F>,
    fx: &FeatureExtractor<F>,
) -> Result<Tensor<F>> {
    if out_variants.len() != style_variants.len() {
        return Err(InpaintError::Invalid(format!(
            "variant list lengths differ: {} vs {}",
            out_variants.len(),
            style_variants.len()
        )));
    }
    check_image_pair(out, gt)?;
    check_image_mask(out, mask)?;

    let mut acc = Tensor::scalar(F::zero());
    for (oj, sj) in out_variants.iter().zip(style_variants) {
        let fo = fx.features(oj.tensor());
        let fs = fx.features(sj.tensor());
        for (a, b) in fo.iter().zip(&fs) {
            let hole_region = region_at_scale(mask, a, true)?;
            acc = acc.add(&region_mean_l1(a, b, &hole_region));
        }
    }
    let fo = fx.features(out.tensor());
    let fg = fx.features(gt.tensor());
    for (a, b) in fo.iter().zip(&fg) {
        let valid_region = region_at_scale(mask, a, false)?;
        acc = acc.add(&region_mean_l1(a, b, &valid_region));
    }
    Ok(acc)
}

/// Per-sample gram matrix: (B,C,h,w) -> (B,C,C), normalized by C*h*w.
pub fn gram<F: Scalar>(feature: &Tensor<F>) -> Tensor<F> {
    assert_eq!(feature.ndim(), 4, "gram expects (B,C,h,w)");
    let (b, c, h, w) = (
        feature.shape()[0],
        feature.shape()[1],
        feature.shape()[2],
        feature.shape()[3],
    );
    let flat = feature.reshape(&[b, c, h * w]);
    let scale = F::from_f64(1.0 / (c * h * w) as f64);
    flat.bmm(&flat.permute(&[0, 2, 1])).mul_scalar(scale)
}

/// Gram-matrix analogue of [`perceptual_loss`]: the same two-term masked
/// structure, with mean L1 between gram matrices of masked features.
pub fn style_loss<F: Scalar>(
    out_variants: &[ImageTensor<F>],
    style_variants: &[ImageTensor<F>],
    out: &ImageTensor<F>,
    gt: &ImageTensor<F>,
    mask: &Mask<F>,
    fx: &FeatureExtractor<F>,
) -> Result<Tensor<F>> {
    if out_variants.len() != style_variants.len() {
        return Err(InpaintError::Invalid(format!(
            "variant list lengths differ: {} vs {}",
            out_variants.len(),
            style_variants.len()
        )));
    }
    check_image_pair(out, gt)?;
    check_image_mask(out, mask)?;

    let gram_term = |a: &Tensor<F>, b: &Tensor<F>, region: &Tensor<F>| -> Tensor<F> {
        gram(&a.mul(region))
            .sub(&gram(&b.mul(region)))
            .abs()
            .mean_all()
    };

    let mut acc = Tensor::scalar(F::zero());
    for (oj, sj) in out_variants.iter().zip(style_variants) {
        let fo = fx.features(oj.tensor());
        let fs = fx.features(sj.tensor());
        for (a, b) in fo.iter().zip(&fs) {
            let hole_region = region_at_scale(mask, a, true)?;
            acc = acc.add(&gram_term(a, b, &hole_region));
        }
    }
    let fo = fx.features(out.tensor());
    let fg = fx.features(gt.tensor());
    for (a, b) in fo.iter().zip(&fg) {
        let valid_region = region_at_scale(mask, a, false)?;
        acc = acc.add(&gram_term(a, b, &valid_region));
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// SSIM machinery
// ---------------------------------------------------------------------------

const SSIM_C1: f64 = 0.0004; // (0.01 * dynamic range 2)^2
const SSIM_C2: f64 = 0.0036; // (0.03 * dynamic range 2)^2
const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window<F: Scalar>(size: usize, sigma: f64) -> Tensor<F> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut vals = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            vals.push(v);
            sum += v;
        }
    }
    let data: Vec<F> = vals.into_iter().map(|v| F::from_f64(v / sum)).collect();
    Tensor::constant(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[size, size]), data).unwrap())
}

/// Valid (unpadded) per-channel window convolution: each channel filtered
/// independently with the same kernel.
fn window_filter<F: Scalar>(x: &Tensor<F>, win: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = win.shape()[0];
    let spec = WindowSpec::new(k, 1, 0);
    let (oh, ow) = spec.out_hw(h, w);
    let cols = x.reshape(&[b * c, 1, h, w]).unfold(spec); // (b*c, k*k, oh*ow)
    let w2 = win.reshape(&[1, 1, k * k]).broadcast_to(&[b * c, 1, k * k]);
    w2.bmm(&cols).reshape(&[b, c, oh, ow])
}

/// Largest usable odd window for the given spatial extent, capped at the
/// standard 11.
fn window_size(h: usize, w: usize) -> usize {
    let m = h.min(w).min(11);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Per-sample luminance and contrast-structure means at one scale.
fn ssim_parts<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let k = window_size(a.shape()[2], a.shape()[3]);
    let win = gaussian_window::<F>(k, 1.5);
    let mu_a = window_filter(a, &win);
    let mu_b = window_filter(b, &win);
    let mu_aa = mu_a.mul(&mu_a);
    let mu_bb = mu_b.mul(&mu_b);
    let mu_ab = mu_a.mul(&mu_b);
    let sig_aa = window_filter(&a.mul(a), &win).sub(&mu_aa);
    let sig_bb = window_filter(&b.mul(b), &win).sub(&mu_bb);
    let sig_ab = window_filter(&a.mul(b), &win).sub(&mu_ab);

    let c1 = F::from_f64(SSIM_C1);
    let c2 = F::from_f64(SSIM_C2);
    let l_map = mu_ab
        .mul_scalar(F::from_f64(2.0))
        .add_scalar(c1)
        .div(&mu_aa.add(&mu_bb).add_scalar(c1));
    let cs_map = sig_ab
        .mul_scalar(F::from_f64(2.0))
        .add_scalar(c2)
        .div(&sig_aa.add(&sig_bb).add_scalar(c2));
    // Reduce to per-sample means over channels and window positions.
    let l = l_map.mean_axes(&[1, 2, 3], false);
    let cs = cs_map.mean_axes(&[1, 2, 3], false);
    (l, cs)
}

/// Single-scale SSIM, returned per sample as a (B,) tensor.
pub fn ssim_per_sample<F: Scalar>(a: &ImageTensor<F>, b: &ImageTensor<F>) -> Result<Tensor<F>> {
    check_image_pair(a, b)?;
    if a.height().min(a.width()) < 3 {
        return Err(InpaintError::Invalid(
            "ssim needs spatial extent of at least 3".into(),
        ));
    }
    let (l, cs) = ssim_parts(a.tensor(), b.tensor());
    Ok(l.mul(&cs))
}

/// Largest feasible MS-SSIM scale count for a spatial extent: the final
/// scale must keep at least 3 pixels on the short side.
pub fn max_feasible_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let mut m = h.min(w);
    while m >= 3 && n < MSSSIM_WEIGHTS.len() {
        n += 1;
        m /= 2;
    }
    n
}

/// Scale count at which the standard 11-pixel window fits unshrunk; what
/// training uses by default.
pub fn standard_scales(resolution: usize) -> usize {
    let mut n = 0;
    let mut m = resolution;
    while m >= 11 && n < MSSSIM_WEIGHTS.len() {
        n += 1;
        m /= 2;
    }
    n.max(1)
}

/// MS-SSIM loss: 1 minus the batch-mean multi-scale SSIM. Scale
/// weights are the standard five, truncated to `scales` and renormalized.
/// Windows shrink below 11 when a scale is too small for the standard size.
pub fn ms_ssim_loss<F: Scalar>(
    out: &ImageTensor<F>,
    gt: &ImageTensor<F>,
    scales: usize,
) -> Result<Tensor<F>> {
    check_image_pair(out, gt)?;
    let feasible = max_feasible_scales(out.height(), out.width());
    if scales == 0 || scales > feasible {
        return Err(InpaintError::Invalid(format!(
            "ms_ssim: {scales} scales requested but at most {feasible} feasible for {}x{}",
            out.height(),
            out.width()
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();

    let mut a = out.tensor().clone();
    let mut b = gt.tensor().clone();
    let batch = out.batch();
    let mut msssim = Tensor::ones(&[batch]);
    let floor = F::from_f64(1e-6);
    for (s, &wexp) in weights.iter().enumerate() {
        let (l, cs) = ssim_parts(&a, &b);
        let factor = if s + 1 == scales { l.mul(&cs) } else { cs };
        msssim = msssim.mul(&factor.clamp_min(floor).powf(F::from_f64(wexp)));
        if s + 1 < scales {
            a = a.avg_pool2d(2);
            b = b.avg_pool2d(2);
        }
    }
    Ok(Tensor::scalar(F::one()).sub(&msssim.mean_all()))
}

// ---------------------------------------------------------------------------
// adversarial terms
// ---------------------------------------------------------------------------

/// Generator objective: minimize the negated mean critic score of fakes.
pub fn adv_g_loss<F: Scalar>(fake_scores: &Tensor<F>) -> Tensor<F> {
    fake_scores.mean_all().neg()
}

/// Critic objective: mean(fake) - mean(real) + lambda_gp * gp.
pub fn adv_d_loss<F: Scalar>(
    real_scores: &Tensor<F>,
    fake_scores: &Tensor<F>,
    gp: &Tensor<F>,
    lambda_gp: f64,
) -> Tensor<F> {
    fake_scores
        .mean_all()
        .sub(&real_scores.mean_all())
        .add(&gp.mul_scalar(F::from_f64(lambda_gp)))
}

/// Anything that maps an image batch to one score per sample. Lets the
/// gradient penalty be exercised with analytic critics in tests as well as
/// the real one.
pub trait ScoreFn<F: Scalar> {
    fn score(&self, image: &Tensor<F>) -> Tensor<F>;
}

/// Gradient penalty on random interpolates: mean((|grad D(interp)| - 1)^2),
/// unweighted. The returned scalar carries the critic-weight graph, so
/// differentiating it trains the critic toward unit gradient norm.
pub fn gradient_penalty<F: Scalar, C: ScoreFn<F>>(
    critic: &C,
    real: &ImageTensor<F>,
    fake: &ImageTensor<F>,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    check_image_pair(real, fake)?;
    let b = real.batch();
    let mut interp = ndarray::ArrayD::<F>::zeros(real.tensor().data().raw_dim());
    {
        let rd = real.tensor().data();
        let fd = fake.tensor().data();
        for bi in 0..b {
            let eps = F::from_f64(rng.gen::<f64>());
            let one_m = F::one() - eps;
            let mut slab = interp.index_axis_mut(ndarray::Axis(0), bi);
            let rs = rd.index_axis(ndarray::Axis(0), bi);
            let fs = fd.index_axis(ndarray::Axis(0), bi);
            ndarray::Zip::from(&mut slab)
                .and(&rs)
                .and(&fs)
                .for_each(|o, &r, &f| *o = eps * r + one_m * f);
        }
    }
    let interp = Tensor::leaf(interp);
    let scores = critic.score(&interp);
    if scores.shape() != [b] {
        return Err(InpaintError::Shape(format!(
            "critic must return one score per sample, got {:?}",
            scores.shape()
        )));
    }
    let total = scores.sum_all();
    let grad = if total.requires_grad() {
        backward(&total)
            .wrt(&interp)
            .unwrap_or_else(|| interp.zeros_like())
    } else {
        interp.zeros_like()
    };
    let norm = grad
        .square()
        .sum_axes(&[1, 2, 3], false)
        .add_scalar(F::from_f64(1e-16))
        .sqrt();
    Ok(norm.add_scalar(-F::one()).square().mean_all())
}

/// Weighted total per the printed objective: the perceptual term carries
/// implicit weight 1; adversarial critic terms are not part of it.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    for (name, v) in report.names_and_values() {
        if name != "total" && !v.is_finite() {
            return Err(InpaintError::Invalid(format!(
                "loss term `{name}` is not finite: {v}"
            )));
        }
    }
    Ok(weights.lambda_adv * report.adv_g
        + weights.lambda_ssim * report.ms_ssim
        + weights.lambda_sty * report.style
        + report.perceptual
        + weights.lambda_hole * report.hole
        + weights.lambda_valid * report.valid)
}

/// Graph-side counterpart of [`total_loss`] used as the generator training
/// objective; the two must agree term for term.
pub fn weighted_total<F: Scalar>(
    adv_g: &Tensor<F>,
    ms_ssim: &Tensor<F>,
    style: &Tensor<F>,
    perceptual: &Tensor<F>,
    hole: &Tensor<F>,
    valid: &Tensor<F>,
    weights: &LossWeights,
) -> Tensor<F> {
    adv_g
        .mul_scalar(F::from_f64(weights.lambda_adv))
        .add(&ms_ssim.mul_scalar(F::from_f64(weights.lambda_ssim)))
        .add(&style.mul_scalar(F::from_f64(weights.lambda_sty)))
        .add(perceptual)
        .add(&hole.mul_scalar(F::from_f64(weights.lambda_hole)))
        .add(&valid.mul_scalar(F::from_f64(weights.lambda_valid)))
}

fn check_image_pair<F: Scalar>(a: &ImageTensor<F>, b: &ImageTensor<F>) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(InpaintError::Shape(format!(
            "image shapes {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

fn check_image_mask<F: Scalar>(img: &ImageTensor<F>, mask: &Mask<F>) -> Result<()> {
    if img.batch() != mask.batch() || img.height() != mask.height() || img.width() != mask.width()
    {
        return Err(InpaintError::Shape(format!(
            "image {:?} vs mask {:?}",
            img.tensor().shape(),
            mask.tensor().shape()
        )));
    }
    Ok(())
}
