//! Stage-1 coarse inpainter: a small U-Net that fills holes with blurry but
//! globally plausible content. Its blended output is the substrate the
//! later stages refine; valid pixels pass through untouched.

use autodiff::nn::{Conv2d, ParamStore};
use autodiff::optim::Adam;
use autodiff::{backward, Scalar, Tensor, WindowSpec};
use rand::Rng as _;

use crate::core::checkpoint::{CheckpointBundle, CheckpointMeta};
use crate::core::config::TrainConfig;
use crate::core::error::{InpaintError, Result};
use crate::core::rng::Rng;
use crate::core::types::{ImageTensor, Mask};
use crate::losses::hole_valid_loss;
use crate::maskgen::{apply_mask, generate_training_masks, reverse_mask, MaskParams};

/// Encoder-decoder with skip connections over a 4-channel input (masked
/// image stacked with the mask). Three stride-2 stages bring the spatial
/// extent to 1/8, two dilated convolutions widen the receptive field at the
/// bottleneck, and nearest-upsampled decoder stages concatenate the matching
/// encoder activation before each convolution.
pub struct CoarseNet<F: Scalar> {
    store: ParamStore<F>,
    enc0: Conv2d<F>,
    enc1: Conv2d<F>,
    enc2: Conv2d<F>,
    enc3: Conv2d<F>,
    mid1: Conv2d<F>,
    mid2: Conv2d<F>,
    dec3: Conv2d<F>,
    dec2: Conv2d<F>,
    dec1: Conv2d<F>,
    to_rgb: Conv2d<F>,
    width: usize,
}

const LRELU: f64 = 0.2;

impl<F: Scalar> CoarseNet<F> {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        assert!(width >= 2, "coarse net width must be at least 2");
        let mut s = ParamStore::new();
        let w = width;
        let k3 = WindowSpec::new(3, 1, 1);
        let down = WindowSpec::new(3, 2, 1);
        let dilated = WindowSpec::new(3, 1, 2).with_dilation(2);
        let enc0 = Conv2d::new(&mut s, "enc0", 4, w, k3, true, rng);
        let enc1 = Conv2d::new(&mut s, "enc1", w, 2 * w, down, true, rng);
        let enc2 = Conv2d::new(&mut s, "enc2", 2 * w, 4 * w, down, true, rng);
        let enc3 = Conv2d::new(&mut s, "enc3", 4 * w, 4 * w, down, true, rng);
        let mid1 = Conv2d::new(&mut s, "mid1", 4 * w, 4 * w, dilated, true, rng);
        let mid2 = Conv2d::new(&mut s, "mid2", 4 * w, 4 * w, dilated, true, rng);
        let dec3 = Conv2d::new(&mut s, "dec3", 8 * w, 2 * w, k3, true, rng);
        let dec2 = Conv2d::new(&mut s, "dec2", 4 * w, w, k3, true, rng);
        let dec1 = Conv2d::new(&mut s, "dec1", 2 * w, w, k3, true, rng);
        let to_rgb = Conv2d::new(&mut s, "to_rgb", w, 3, k3, true, rng);
        CoarseNet {
            store: s,
            enc0,
            enc1,
            enc2,
            enc3,
            mid1,
            mid2,
            dec3,
            dec2,
            dec1,
            to_rgb,
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Raw network output in (-1,1) for a (B,4,H,W) input; H and W must be
    /// divisible by 8.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(InpaintError::Shape(format!(
                "coarse net needs spatial dims divisible by 8, got {h}x{w}"
            )));
        }
        let slope = F::from_f64(LRELU);
        let e0 = self.enc0.forward(x).leaky_relu(slope);
        let e1 = self.enc1.forward(&e0).leaky_relu(slope);
        let e2 = self.enc2.forward(&e1).leaky_relu(slope);
        let e3 = self.enc3.forward(&e2).leaky_relu(slope);
        let m = self.mid1.forward(&e3).leaky_relu(slope);
        let m = self.mid2.forward(&m).leaky_relu(slope);

        let u3 = Tensor::concat(&[m.nearest_upsample2d(2), e2], 1);
        let d3 = self.dec3.forward(&u3).leaky_relu(slope);
        let u2 = Tensor::concat(&[d3.nearest_upsample2d(2), e1], 1);
        let d2 = self.dec2.forward(&u2).leaky_relu(slope);
        let u1 = Tensor::concat(&[d2.nearest_upsample2d(2), e0], 1);
        let d1 = self.dec1.forward(&u1).leaky_relu(slope);
        Ok(self.to_rgb.forward(&d1).tanh())
    }
}

/// Runs the coarse net on a corrupted image and hard-blends: network content
/// inside the hole, the original pixels everywhere else, exactly.
pub fn coarse_inpaint<F: Scalar>(
    net: &CoarseNet<F>,
    image: &ImageTensor<F>,
    mask: &Mask<F>,
) -> Result<ImageTensor<F>> {
    let masked = apply_mask(image, mask)?;
    let input = Tensor::concat(&[masked.tensor().clone(), mask.tensor().clone()], 1);
    let raw = net.forward(&input)?;
    let mr = reverse_mask(mask);
    ImageTensor::new(raw.mul(mr.tensor()).add(masked.tensor()))
}

/// Draws `batch` rows from a pool image tensor by index.
pub fn gather_batch<F: Scalar>(
    pool: &ImageTensor<F>,
    indices: &[usize],
) -> Result<ImageTensor<F>> {
    if indices.is_empty() {
        return Err(InpaintError::Invalid("empty batch".into()));
    }
    let n = pool.batch();
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= n {
            return Err(InpaintError::Invalid(format!(
                "batch index {i} out of range for pool of {n}"
            )));
        }
        rows.push(pool.tensor().narrow(0, i, 1));
    }
    ImageTensor::new(Tensor::concat(&rows, 0))
}

/// Uniformly sampled batch indices.
pub fn sample_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Trains a fresh coarse net on a pool of clean images with newly generated
/// masks each step. The objective is a pure reconstruction bias toward
/// blurry fills: full-image mean L1 plus a hole-weighted L1 term, and no
/// adversarial pressure. Reports per-step terms through `log` and returns
/// the net with its `coarse`-stage checkpoint.
pub fn train_coarse<F: Scalar>(
    dataset: &ImageTensor<F>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    seed: u64,
    log: &mut dyn FnMut(usize, &str, f64),
) -> Result<(CoarseNet<F>, CheckpointBundle)> {
    if dataset.batch() == 0 {
        return Err(InpaintError::Dataset("empty dataset".into()));
    }
    if dataset.height() != cfg.resolution || dataset.width() != cfg.resolution {
        return Err(InpaintError::Shape(format!(
            "dataset is {}x{} but config resolution is {}",
            dataset.height(),
            dataset.width(),
            cfg.resolution
        )));
    }
    let net = CoarseNet::new(cfg.base_width, rng);
    let params = MaskParams::for_resolution(cfg.resolution);
    let mut opt = Adam::new(net.store().trainable(), cfg.lr_coarse, (0.9, 0.999));
    for step in 0..cfg.steps_coarse {
        let idx = sample_indices(dataset.batch(), cfg.batch_size, rng);
        let gt = gather_batch(dataset, &idx)?;
        let mask = generate_training_masks(cfg.resolution, &params, cfg.batch_size, rng)?;
        let out = coarse_inpaint(&net, &gt, &mask)?;

        let full_l1 = out.tensor().sub(gt.tensor()).abs().mean_all();
        let (hole, _) = hole_valid_loss(&out, &gt, &mask)?;
        let loss = full_l1.add(&hole.mul_scalar(F::from_f64(cfg.weights.lambda_hole)));
        let grads = backward(&loss);
        opt.step(&grads);

        log(step, "coarse_full_l1", Scalar::to_f64(full_l1.item()));
        log(step, "coarse_hole_l1", Scalar::to_f64(hole.item()));
    }
    let meta = CheckpointMeta {
        stage: "coarse".into(),
        seed,
        variant: String::new(),
        config: cfg.snapshot(),
    };
    let bundle = CheckpointBundle::from_entries(net.store().entries(), meta);
    Ok((net, bundle))
}
