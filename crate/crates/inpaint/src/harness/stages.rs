//! Stage drivers: train each piece in dependency order (coarse -> latent ->
//! stage 3), persist checkpoints and metrics logs, and reassemble the
//! trained pipeline for inference and evaluation.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};

use autodiff::optim::Adam;
use autodiff::{backward, Scalar, Tensor};

use crate::core::checkpoint::{CheckpointBundle, CheckpointMeta};
use crate::core::config::TrainConfig;
use crate::core::error::{InpaintError, Result};
use crate::core::rng::{seeded_rng, Rng};
use crate::core::types::{ImageTensor, SemanticDirections};
use crate::coarsenet::{coarse_inpaint, gather_batch, sample_indices, train_coarse, CoarseNet};
use crate::latentspace::{
    build_style_condition, sample_style_variants, sefa_factorize, train_autoencoder,
    StyleEncoder, SynthesisDecoder,
};
use crate::losses::{
    adv_d_loss, adv_g_loss, gradient_penalty, hole_valid_loss, ms_ssim_loss, perceptual_loss,
    standard_scales, style_loss, total_loss, weighted_total, FeatureExtractor, LossReport,
};
use crate::maskgen::{apply_mask, generate_training_masks, MaskParams};
use crate::sparn_gan::{criticize, generate, Critic, Generator, Variant};
use crate::harness::dataset::{ingest_dataset, Dataset};
use crate::harness::pipeline::Pipeline;
use crate::evalkit::evaluate_buckets;

pub fn checkpoint_dir(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("{stage}.ckpt"))
}

fn require_stage(out: &Path, stage: &str) -> Result<CheckpointBundle> {
    let dir = checkpoint_dir(out, stage);
    if !dir.is_dir() {
        return Err(InpaintError::Checkpoint {
            path: dir.display().to_string(),
            msg: format!("stage `{stage}` has no checkpoint; train it first"),
        });
    }
    CheckpointBundle::load(&dir)
}

fn load_into<F: Scalar>(
    store: &mut autodiff::nn::ParamStore<F>,
    bundle: &CheckpointBundle,
    stage: &str,
) -> Result<()> {
    store
        .load_entries(&bundle.entries_as::<F>())
        .map_err(|msg| InpaintError::Checkpoint {
            path: stage.to_string(),
            msg,
        })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| InpaintError::io(path.display().to_string(), e))
}

fn write_metrics(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    write_text(path, &text)
}

fn load_dataset(cfg: &TrainConfig) -> Result<Dataset<f32>> {
    ingest_dataset::<f32>(Path::new(&cfg.data_dir), cfg.resolution, cfg.train_split)
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| InpaintError::io(out.display().to_string(), e))
}

/// Stage-1 driver: trains the coarse inpainter and writes `coarse.ckpt`.
pub fn run_train_coarse(cfg: &TrainConfig, seed: u64, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let data = load_dataset(cfg)?;
    let mut rng = seeded_rng(seed);
    let mut lines = Vec::new();
    let mut log = |step: usize, name: &str, v: f64| lines.push(format!("{step},{name},{v}"));
    let (_, bundle) = train_coarse(&data.train, cfg, &mut rng, seed, &mut log)?;
    bundle.save(&checkpoint_dir(out, "coarse"))?;
    write_metrics(&out.join("metrics_coarse.txt"), &lines)
}

/// Stage-2 driver: trains the style autoencoder (requires the coarse
/// checkpoint to exist, enforcing stage order), factorizes the decoder's
/// style-affine weights, and writes `latent.ckpt` with the directions
/// embedded.
pub fn run_train_latent(cfg: &TrainConfig, seed: u64, out: &Path) -> Result<()> {
    prepare_out(out)?;
    require_stage(out, "coarse")?;
    let data = load_dataset(cfg)?;
    let mut rng = seeded_rng(seed);
    let enc = StyleEncoder::<f32>::new(cfg.resolution, cfg.base_width, cfg.style_dim, &mut rng);
    let dec = SynthesisDecoder::<f32>::new(cfg.resolution, cfg.base_width, cfg.style_dim, &mut rng);
    let mut lines = Vec::new();
    let mut log = |step: usize, name: &str, v: f64| lines.push(format!("{step},{name},{v}"));
    let mut bundle = train_autoencoder(&enc, &dec, &data.train, cfg, &mut rng, seed, &mut log)?;

    let dirs = sefa_factorize(&dec, cfg.sefa_layer_range(), cfg.num_directions)?;
    bundle.weights.extend(direction_entries(&dirs));
    bundle.save(&checkpoint_dir(out, "latent"))?;
    write_metrics(&out.join("metrics_latent.txt"), &lines)
}

fn direction_entries<F: Scalar>(dirs: &SemanticDirections<F>) -> Vec<(String, ArrayD<f32>)> {
    let d = dirs
        .directions
        .mapv(|v| Scalar::to_f64(v) as f32)
        .into_dyn();
    let eig = ArrayD::from_shape_vec(
        IxDyn(&[dirs.eigenvalues.len()]),
        dirs.eigenvalues
            .iter()
            .map(|v| Scalar::to_f64(*v) as f32)
            .collect(),
    )
    .unwrap();
    let range = ArrayD::from_shape_vec(
        IxDyn(&[2]),
        vec![dirs.source_layers.0 as f32, dirs.source_layers.1 as f32],
    )
    .unwrap();
    vec![
        ("sefa.directions".into(), d),
        ("sefa.eigenvalues".into(), eig),
        ("sefa.layer_range".into(), range),
    ]
}

fn directions_from_bundle<F: Scalar>(bundle: &CheckpointBundle) -> Result<SemanticDirections<F>> {
    let find = |name: &str| {
        bundle
            .weights
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| InpaintError::Checkpoint {
                path: "latent".into(),
                msg: format!("checkpoint lacks `{name}`; rerun train-latent"),
            })
    };
    let d = find("sefa.directions")?;
    let eig = find("sefa.eigenvalues")?;
    let range = find("sefa.layer_range")?;
    let shape = (d.shape()[0], d.shape()[1]);
    let directions =
        Array2::from_shape_vec(shape, d.iter().map(|v| F::from_f64(*v as f64)).collect())
            .map_err(|e| InpaintError::Shape(e.to_string()))?;
    let dirs = SemanticDirections {
        directions,
        eigenvalues: eig.iter().map(|v| F::from_f64(*v as f64)).collect(),
        source_layers: (range[[0]] as usize, range[[1]] as usize),
    };
    dirs.validate()?;
    Ok(dirs)
}

/// The adversarial stage: alternating critic and generator steps against the
/// frozen coarse and latent stages. Returns (generator, critic) bundles.
pub fn train_stage3<F: Scalar>(
    pipeline: &mut Pipeline<F>,
    dataset: &ImageTensor<F>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    seed: u64,
    log: &mut dyn FnMut(usize, &str, f64),
) -> Result<(CheckpointBundle, CheckpointBundle)> {
    if dataset.batch() == 0 {
        return Err(InpaintError::Dataset("empty dataset".into()));
    }
    if pipeline.critic.is_none() {
        return Err(InpaintError::Invalid(
            "stage-3 training needs a critic in the pipeline".into(),
        ));
    }
    // Upstream stages are pretrained inputs here, never updated.
    pipeline.coarse.store_mut().set_frozen(true);
    pipeline.encoder.store_mut().set_frozen(true);
    pipeline.decoder.store_mut().set_frozen(true);
    let critic = pipeline.critic.as_ref().unwrap();

    let res = cfg.resolution;
    let params = MaskParams::for_resolution(res);
    let scales = standard_scales(res);
    let w = &cfg.weights;
    let n = dataset.batch();
    let batch = cfg.batch_size.min(n).max(1);

    let mut adam_gen = Adam::new(pipeline.generator.store().trainable(), cfg.lr_gen, (0.5, 0.9));
    let mut adam_critic = Adam::new(critic.store().trainable(), cfg.lr_critic, (0.5, 0.9));

    for step in 0..cfg.steps_gan {
        let idx = sample_indices(n, batch, rng);
        let gt = gather_batch(dataset, &idx)?;
        let mask = generate_training_masks::<F>(res, &params, batch, rng)?;
        let masked = apply_mask(&gt, &mask)?;
        let coarse_out = coarse_inpaint(&pipeline.coarse, &gt, &mask)?;
        let styles = sample_style_variants(
            &pipeline.encoder,
            &pipeline.decoder,
            &pipeline.directions,
            &coarse_out,
            w.alpha,
            cfg.delta_magnitude,
            rng,
        )?;
        let mut outs = Vec::with_capacity(styles.len());
        for s in &styles {
            let cond = build_style_condition(&masked, &mask, s)?;
            outs.push(generate(&pipeline.generator, &masked, &cond, &mask)?);
        }

        // Critic step on the primary output, detached from the generator.
        critic.power_iterate(1);
        let fake_d = ImageTensor::new(Tensor::constant(outs[0].tensor().data().clone()))?;
        let gp = gradient_penalty(critic, &gt, &fake_d, rng)?;
        let real_scores = criticize(critic, &gt)?;
        let fake_scores_d = criticize(critic, &fake_d)?;
        let d_loss = adv_d_loss(&real_scores, &fake_scores_d, &gp, w.lambda_gp);
        let d_grads = backward(&d_loss);
        adam_critic.step(&d_grads);

        // Generator step: adversarial term on the primary output, variant
        // terms through the perceptual and style losses.
        let fake_scores = criticize(critic, &outs[0])?;
        let adv_g = adv_g_loss(&fake_scores);
        let (hole, valid) = hole_valid_loss(&outs[0], &gt, &mask)?;
        let msl = ms_ssim_loss(&outs[0], &gt, scales)?;
        let per = perceptual_loss(
            &outs[1..],
            &styles[1..],
            &outs[0],
            &gt,
            &mask,
            &pipeline.extractor,
        )?;
        let sty = style_loss(
            &outs[1..],
            &styles[1..],
            &outs[0],
            &gt,
            &mask,
            &pipeline.extractor,
        )?;
        let total = weighted_total(&adv_g, &msl, &sty, &per, &hole, &valid, w);
        let g_grads = backward(&total);
        adam_gen.step(&g_grads);

        let report = LossReport {
            hole: Scalar::to_f64(hole.item()),
            valid: Scalar::to_f64(valid.item()),
            perceptual: Scalar::to_f64(per.item()),
            style: Scalar::to_f64(sty.item()),
            ms_ssim: Scalar::to_f64(msl.item()),
            adv_g: Scalar::to_f64(adv_g.item()),
            adv_d: Scalar::to_f64(d_loss.item()),
            gp: Scalar::to_f64(gp.item()),
            total: Scalar::to_f64(total.item()),
        };
        // Surfaces divergence as an error naming the offending term.
        total_loss(&report, w)?;
        for (name, v) in report.names_and_values() {
            log(step, name, v);
        }
    }

    let variant = pipeline.variant().name().to_string();
    let gen_bundle = CheckpointBundle::from_entries(
        pipeline.generator.store().entries(),
        CheckpointMeta {
            stage: "generator".into(),
            seed,
            variant: variant.clone(),
            config: cfg.snapshot(),
        },
    );
    let critic_bundle = CheckpointBundle::from_entries(
        critic.store().entries(),
        CheckpointMeta {
            stage: "critic".into(),
            seed,
            variant,
            config: cfg.snapshot(),
        },
    );
    Ok((gen_bundle, critic_bundle))
}

/// Stage-3 driver: loads and freezes the first two stages, trains the
/// adversarial pair, and writes `generator.ckpt` and `critic.ckpt`.
pub fn run_train_stage3(
    cfg: &TrainConfig,
    seed: u64,
    out: &Path,
    variant: Variant,
) -> Result<()> {
    prepare_out(out)?;
    let coarse_b = require_stage(out, "coarse")?;
    let latent_b = require_stage(out, "latent")?;
    let data = load_dataset(cfg)?;
    let mut rng = seeded_rng(seed);

    let mut coarse = CoarseNet::<f32>::new(cfg.base_width, &mut rng);
    load_into(coarse.store_mut(), &coarse_b, "coarse")?;
    let mut encoder =
        StyleEncoder::<f32>::new(cfg.resolution, cfg.base_width, cfg.style_dim, &mut rng);
    load_into(encoder.store_mut(), &latent_b, "latent")?;
    let mut decoder =
        SynthesisDecoder::<f32>::new(cfg.resolution, cfg.base_width, cfg.style_dim, &mut rng);
    load_into(decoder.store_mut(), &latent_b, "latent")?;
    let directions = directions_from_bundle::<f32>(&latent_b)?;
    let generator = Generator::<f32>::new(cfg.resolution, cfg.base_width, variant, &mut rng);
    let critic = Critic::<f32>::new(cfg.resolution, cfg.base_width, &mut rng);

    let mut pipeline = Pipeline {
        coarse,
        encoder,
        decoder,
        directions,
        generator,
        critic: Some(critic),
        extractor: FeatureExtractor::standard(),
        config: cfg.clone(),
    };

    let mut lines = Vec::new();
    let mut log = |step: usize, name: &str, v: f64| lines.push(format!("{step},{name},{v}"));
    let (gen_bundle, critic_bundle) =
        train_stage3(&mut pipeline, &data.train, cfg, &mut rng, seed, &mut log)?;
    gen_bundle.save(&checkpoint_dir(out, "generator"))?;
    critic_bundle.save(&checkpoint_dir(out, "critic"))?;
    write_metrics(&out.join("metrics_stage3.txt"), &lines)
}

/// Reassembles a trained pipeline from the checkpoints under `out`. When
/// `expect_variant` is given, the generator checkpoint must match it.
pub fn load_pipeline(
    cfg: &TrainConfig,
    out: &Path,
    expect_variant: Option<Variant>,
) -> Result<Pipeline<f32>> {
    let coarse_b = require_stage(out, "coarse")?;
    let latent_b = require_stage(out, "latent")?;
    let gen_b = require_stage(out, "generator")?;
    let variant = Variant::parse(&gen_b.meta.variant)?;
    if let Some(want) = expect_variant {
        if want != variant {
            return Err(InpaintError::Invalid(format!(
                "generator checkpoint was trained with variant `{}`, requested `{}`",
                variant.name(),
                want.name()
            )));
        }
    }

    let mut rng = seeded_rng(0);
    let mut coarse = CoarseNet::<f32>::new(cfg.base_width, &mut rng);
    load_into(coarse.store_mut(), &coarse_b, "coarse")?;
    coarse.store_mut().set_frozen(true);
    let mut encoder =
        StyleEncoder::<f32>::new(cfg.resolution, cfg.base_width, cfg.style_dim, &mut rng);
    load_into(encoder.store_mut(), &latent_b, "latent")?;
    encoder.store_mut().set_frozen(true);
    let mut decoder =
        SynthesisDecoder::<f32>::new(cfg.resolution, cfg.base_width, cfg.style_dim, &mut rng);
    load_into(decoder.store_mut(), &latent_b, "latent")?;
    decoder.store_mut().set_frozen(true);
    let directions = directions_from_bundle::<f32>(&latent_b)?;
    let mut generator = Generator::<f32>::new(cfg.resolution, cfg.base_width, variant, &mut rng);
    load_into(generator.store_mut(), &gen_b, "generator")?;
    generator.store_mut().set_frozen(true);

    let critic_dir = checkpoint_dir(out, "critic");
    let critic = if critic_dir.is_dir() {
        let critic_b = CheckpointBundle::load(&critic_dir)?;
        let mut c = Critic::<f32>::new(cfg.resolution, cfg.base_width, &mut rng);
        load_into(c.store_mut(), &critic_b, "critic")?;
        c.store_mut().set_frozen(true);
        Some(c)
    } else {
        None
    };

    Ok(Pipeline {
        coarse,
        encoder,
        decoder,
        directions,
        generator,
        critic,
        extractor: FeatureExtractor::standard(),
        config: cfg.clone(),
    })
}

/// Evaluation driver: bucketed metrics plus diversity on the test split,
/// written as text and CSV tables.
pub fn run_evaluate(cfg: &TrainConfig, seed: u64, out: &Path, variant: Variant) -> Result<()> {
    let pipeline = load_pipeline(cfg, out, Some(variant))?;
    let data = load_dataset(cfg)?;
    if data.test_len() == 0 {
        return Err(InpaintError::Dataset(
            "test split is empty; evaluation needs held-out images".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let table = evaluate_buckets(
        &pipeline,
        &data.test,
        &cfg.eval_buckets,
        cfg.eval_per_bucket,
        &mut rng,
    )?;
    write_text(&out.join("metrics_table.txt"), &table.render_text())?;
    write_text(&out.join("metrics_table.csv"), &table.render_csv())
}
