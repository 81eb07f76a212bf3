//! The fast paired translation network (student) and its training loop.
//!
//! Training alternates discriminator and generator updates in the
//! least-squares GAN formulation. The generator objective is
//! `adv * adversarial + fm * feature_matching + p * perceptual + l1 * L1`.

pub mod checkpoint;
pub mod loss;
pub mod model;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Pair, PairManifest};
use crate::error::{RegenError, Result};
use crate::features::{extract_tensors, FeatureExtractor};
use crate::fsio::ensure_parent;
use crate::imageio::{read_image, resize_bilinear};
use crate::metrics::{compare_features, KidOptions};
use crate::nn::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub use loss::{LossWeights, PerceptualLoss};
pub use model::{ArchConfig, Generator, MultiscaleDiscriminator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `(width, height)` every pair is resized to.
    pub resolution: (usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer_betas: (f64, f64),
    pub loss_weights: LossWeights,
    pub num_discriminator_scales: usize,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resolution: (960, 512),
            epochs: 20,
            batch_size: 1,
            learning_rate: 2e-4,
            optimizer_betas: (0.5, 0.999),
            loss_weights: LossWeights::default(),
            num_discriminator_scales: 3,
            seed: 0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration: 128x128, two discriminator scales, width 16.
    pub fn tiny() -> Self {
        TrainConfig {
            resolution: (128, 128),
            epochs: 10,
            num_discriminator_scales: 2,
            arch: ArchConfig::tiny(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.resolution;
        let f = self.arch.downsampling_factor();
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(RegenError::config(
                "resolution",
                format!("{w}x{h} is not divisible by the generator downsampling factor {f}"),
            ));
        }
        if self.epochs < 1 {
            return Err(RegenError::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(RegenError::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(RegenError::config("learning_rate", "must be positive"));
        }
        let (b1, b2) = self.optimizer_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(RegenError::config("optimizer_betas", "both betas must lie in [0, 1)"));
        }
        if self.num_discriminator_scales < 1 {
            return Err(RegenError::config("num_discriminator_scales", "must be at least 1"));
        }
        self.loss_weights.validate()?;
        self.arch.validate()?;
        let frame = Shape::new(1, 3, h, w);
        Generator::<f32>::output_shape(&self.arch, frame)
            .map_err(|e| RegenError::config("arch", e.to_string()))?;
        MultiscaleDiscriminator::<f32>::check_input(&self.arch, self.num_discriminator_scales, Shape::new(1, 6, h, w))
            .map_err(|e| RegenError::config("num_discriminator_scales", e.to_string()))?;
        Ok(())
    }

    /// Learning rate for a 0-based epoch: constant for the first half, then
    /// linearly decayed towards zero.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let start = self.epochs / 2;
        if epoch < start {
            return self.learning_rate;
        }
        let span = (self.epochs - start) as f64;
        self.learning_rate * ((self.epochs - epoch) as f64 / span).min(1.0)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.optimizer_betas.0,
            beta2: self.optimizer_betas.1,
            ..AdamConfig::default()
        }
    }
}

/// Generator plus the discriminators it was trained against.
#[derive(Debug, Clone)]
pub struct StudentModel<T: Scalar> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: MultiscaleDiscriminator<T>,
}

impl<T: Scalar> StudentModel<T> {
    pub fn build(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (generator, discriminator) =
            model::init_networks(&config.arch, config.num_discriminator_scales, config.seed)?;
        Ok(StudentModel {
            config: config.clone(),
            generator,
            discriminator,
        })
    }

    /// `(generator, discriminator)` parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        (
            Generator::<T>::param_count(&self.config.arch),
            MultiscaleDiscriminator::<T>::param_count(&self.config.arch, self.config.num_discriminator_scales),
        )
    }

    /// Enhance frames of any size: sides are edge-padded up to a multiple of
    /// the downsampling factor (and at least the smallest accepted side) and
    /// the output is cropped back.
    pub fn infer(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let s = frame.shape();
        if s.c != 3 {
            return Err(RegenError::Shape(format!("expected an RGB frame, got {s}")));
        }
        let f = self.config.arch.downsampling_factor();
        let min = self.config.arch.min_frame_side();
        let side = |v: usize| (v.div_ceil(f) * f).max(min);
        let (ph, pw) = (side(s.h), side(s.w));
        if (ph, pw) == (s.h, s.w) {
            return self.generator.infer(frame);
        }
        let padded = edge_pad(frame, ph, pw);
        let out = self.generator.infer(&padded)?;
        Ok(crop_top_left(&out, s.h, s.w))
    }
}

/// Validate the config and build a freshly initialized student.
pub fn build_student<T: Scalar>(config: &TrainConfig) -> Result<StudentModel<T>> {
    let m = StudentModel::build(config)?;
    let (g, d) = m.param_counts();
    log::info!("student: {g} generator and {d} discriminator parameters");
    Ok(m)
}

fn edge_pad<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(n, c, y, x) = t.at(n, c, y.min(s.h - 1), x.min(s.w - 1));
                }
            }
        }
    }
    out
}

fn crop_top_left<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(n, c, y, x) = t.at(n, c, y, x);
                }
            }
        }
    }
    out
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub g_adversarial: f64,
    pub g_feature_matching: f64,
    pub g_perceptual: f64,
    pub g_l1: f64,
    pub g_total: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

impl StepLosses {
    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("g_adversarial", self.g_adversarial),
            ("g_feature_matching", self.g_feature_matching),
            ("g_perceptual", self.g_perceptual),
            ("g_l1", self.g_l1),
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration {
        epoch: usize,
        iteration: usize,
        learning_rate: f64,
        #[serde(flatten)]
        losses: StepLosses,
    },
    Epoch {
        epoch: usize,
        seconds: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        val_l1: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        val_fid: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        val_kid_x100: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }

    pub fn iterations(&self) -> impl Iterator<Item = &StepLosses> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration { losses, .. } => Some(losses),
            _ => None,
        })
    }
}

/// Held-out pairs scored after every epoch.
pub struct Validation<'a, T: Scalar> {
    pub pairs: &'a PairManifest,
    /// When set, FID/KID between student outputs and teacher outputs are logged too.
    pub extractor: Option<&'a dyn FeatureExtractor<T>>,
}

#[derive(Default)]
pub struct TrainOptions<'a, T: Scalar> {
    pub validation: Option<Validation<'a, T>>,
    /// Checkpoints (`epoch_NNN.ckpt`, `final.ckpt`) and `train_log.jsonl` go here.
    pub out_dir: Option<PathBuf>,
}

/// Working state for the alternating updates.
pub struct Trainer<T: Scalar> {
    pub model: StudentModel<T>,
    perceptual: PerceptualLoss<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: StudentModel<T>) -> Self {
        let adam = model.config.adam();
        Trainer {
            model,
            perceptual: PerceptualLoss::default(),
            opt_g: Adam::new(adam),
            opt_d: Adam::new(adam),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt_g.set_learning_rate(lr);
        self.opt_d.set_learning_rate(lr);
    }

    /// Generator objective without touching any state; used as the oracle
    /// for gradient checks.
    pub fn generator_objective(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let m = &self.model;
        let w = m.config.loss_weights;
        let fake = m.generator.infer(source)?;
        let real = m.discriminator.infer(&Tensor::concat_channels(source, target)?)?;
        let fakef = m.discriminator.infer(&Tensor::concat_channels(source, &fake)?)?;
        let (adv, fm) = generator_gan_terms(&real, &fakef)?;
        let p = if w.perceptual > 0.0 {
            self.perceptual.loss(&fake, target)?
        } else {
            0.0
        };
        let l1 = loss::l1_loss(&fake, target)?;
        Ok(w.adversarial * adv + w.feature_matching * fm + w.perceptual * p + w.l1 * l1)
    }

    /// Forward and backward for both networks, leaving gradients in the
    /// parameters without applying them.
    pub fn compute_gradients(&mut self, source: &Tensor<T>, target: &Tensor<T>) -> Result<StepLosses> {
        let w = self.model.config.loss_weights;
        let m = &mut self.model;
        m.generator.zero_grad();
        m.discriminator.zero_grad();

        let fake = m.generator.forward(source)?;
        let n_scales = m.discriminator.num_scales();

        // Discriminator on the real pair.
        let real = m.discriminator.forward(&Tensor::concat_channels(source, target)?)?;
        let real_scores: Vec<&Tensor<T>> = real.iter().map(|f| f.last().expect("stages")).collect();
        let d_real = loss::adversarial_loss(&real_scores, true)?;
        let g = score_grads(&real, loss::adversarial_grad(&real_scores, true, 0.5));
        m.discriminator.backward(&g, true)?;

        // Discriminator on the generated pair: once to train it with the
        // generator output treated as a constant, once more through the
        // same activations for the generator objective.
        let fakef = m.discriminator.forward(&Tensor::concat_channels(source, &fake)?)?;
        let fake_scores: Vec<&Tensor<T>> = fakef.iter().map(|f| f.last().expect("stages")).collect();
        let d_fake = loss::adversarial_loss(&fake_scores, false)?;
        let g = score_grads(&fakef, loss::adversarial_grad(&fake_scores, false, 0.5));
        m.discriminator.backward(&g, true)?;

        let (g_adv, g_fm) = generator_gan_terms(&real, &fakef)?;
        let mut g = score_grads(&fakef, loss::adversarial_grad(&fake_scores, true, w.adversarial));
        let fm_grads = loss::feature_matching_grad(&intermediate(&real), &intermediate(&fakef), w.feature_matching)?;
        for (k, per_layer) in fm_grads.into_iter().enumerate() {
            for (j, t) in per_layer.into_iter().enumerate() {
                g[k][j] = Some(t);
            }
        }
        debug_assert_eq!(g.len(), n_scales);
        let dpair = m.discriminator.backward(&g, false)?;
        let (_, mut dfake) = dpair.split_channels(3)?;

        let g_perceptual = if w.perceptual > 0.0 {
            let (v, gp) = self.perceptual.loss_and_grad(&fake, target, w.perceptual)?;
            dfake.add_assign(&gp);
            v
        } else {
            0.0
        };
        let g_l1 = loss::l1_loss(&fake, target)?;
        if w.l1 > 0.0 {
            dfake.add_assign(&loss::l1_grad(&fake, target, w.l1)?);
        }
        let losses = StepLosses {
            g_adversarial: g_adv,
            g_feature_matching: g_fm,
            g_perceptual,
            g_l1,
            g_total: w.adversarial * g_adv + w.feature_matching * g_fm + w.perceptual * g_perceptual + w.l1 * g_l1,
            d_real,
            d_fake,
        };
        if losses.first_non_finite().is_none() {
            m.generator.backward(&dfake)?;
        }
        m.generator.clear_cache();
        m.discriminator.clear_cache();
        Ok(losses)
    }

    /// One alternating update. Returns an error, leaving the parameters
    /// untouched, if any loss is non-finite.
    pub fn step(&mut self, source: &Tensor<T>, target: &Tensor<T>, iteration: usize) -> Result<StepLosses> {
        let losses = self.compute_gradients(source, target)?;
        if let Some(component) = losses.first_non_finite() {
            return Err(RegenError::NonFiniteLoss {
                iteration,
                component: component.to_string(),
            });
        }
        self.opt_g.step(self.model.generator.params_mut());
        self.opt_d.step(self.model.discriminator.params_mut());
        Ok(losses)
    }
}

/// Per-scale, per-stage gradient slots with only the score map filled in.
fn score_grads<T: Scalar>(feats: &[Vec<Tensor<T>>], scores: Vec<Tensor<T>>) -> Vec<Vec<Option<Tensor<T>>>> {
    feats
        .iter()
        .zip(scores)
        .map(|(f, s)| {
            let mut slots: Vec<Option<Tensor<T>>> = vec![None; f.len()];
            slots[f.len() - 1] = Some(s);
            slots
        })
        .collect()
}

/// Every stage output except the score map, per scale.
fn intermediate<T: Scalar>(feats: &[Vec<Tensor<T>>]) -> Vec<&[Tensor<T>]> {
    feats.iter().map(|f| &f[..f.len() - 1]).collect()
}

fn generator_gan_terms<T: Scalar>(real: &[Vec<Tensor<T>>], fake: &[Vec<Tensor<T>>]) -> Result<(f64, f64)> {
    let scores: Vec<&Tensor<T>> = fake.iter().map(|f| f.last().expect("stages")).collect();
    let adv = loss::adversarial_loss(&scores, true)?;
    let fm = loss::feature_matching_loss(&intermediate(real), &intermediate(fake))?;
    Ok((adv, fm))
}

fn load_frame<T: Scalar>(path: &Path, (w, h): (usize, usize)) -> Result<Tensor<T>> {
    let img = read_image::<T>(path)?;
    Ok(resize_bilinear(&img, w, h))
}

fn load_batch<T: Scalar>(pairs: &[&Pair], resolution: (usize, usize)) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut src = Vec::with_capacity(pairs.len());
    let mut tgt = Vec::with_capacity(pairs.len());
    for p in pairs {
        src.push(load_frame(&p.source, resolution)?);
        tgt.push(load_frame(&p.enhanced, resolution)?);
    }
    Ok((Tensor::stack(&src)?, Tensor::stack(&tgt)?))
}

/// Validation scores of the current generator on held-out pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValScores {
    pub l1: f64,
    pub fid: Option<f64>,
    pub kid_x100: Option<f64>,
}

pub fn validate<T: Scalar>(model: &StudentModel<T>, val: &Validation<'_, T>) -> Result<ValScores> {
    let res = model.config.resolution;
    let mut outputs = Vec::with_capacity(val.pairs.len());
    let mut targets = Vec::with_capacity(val.pairs.len());
    let mut l1 = 0.0;
    for p in &val.pairs.pairs {
        let src = load_frame::<T>(&p.source, res)?;
        let tgt = load_frame::<T>(&p.enhanced, res)?;
        let out = model.infer(&src)?;
        l1 += loss::l1_loss(&out, &tgt)?;
        outputs.push(out);
        targets.push(tgt);
    }
    l1 /= val.pairs.len().max(1) as f64;
    let (fid, kid_x100) = match val.extractor {
        Some(ex) if val.pairs.len() >= 2 => {
            let r = compare_features(
                &extract_tensors(&outputs, ex)?,
                &extract_tensors(&targets, ex)?,
                KidOptions {
                    seed: model.config.seed,
                    ..KidOptions::default()
                },
            )?;
            (Some(r.fid), Some(r.kid_x100_mean))
        }
        _ => (None, None),
    };
    Ok(ValScores { l1, fid, kid_x100 })
}

/// Train on `pairs` for `model.config.epochs` epochs.
///
/// A non-finite loss aborts training; the parameters from before the failing
/// step are written to `last_good.ckpt` when an output directory is set.
pub fn train_student<T: Scalar>(
    model: StudentModel<T>,
    pairs: &PairManifest,
    opts: &TrainOptions<'_, T>,
) -> Result<(StudentModel<T>, TrainLog)> {
    if pairs.is_empty() {
        return Err(RegenError::invalid("training needs at least one pair"));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| RegenError::io(dir, e))?;
    }
    let log_path = opts.out_dir.as_ref().map(|d| d.join("train_log.jsonl"));
    if let Some(p) = &log_path {
        ensure_parent(p)?;
        std::fs::write(p, "").map_err(|e| RegenError::io(p, e))?;
    }
    let mut trainer = Trainer::new(model);
    let mut log = TrainLog::default();
    let mut iteration = 0;
    let mut order: Vec<&Pair> = pairs.pairs.iter().collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        trainer.set_learning_rate(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.sort_by(|a, b| a.id.cmp(&b.id));
        order.shuffle(&mut rng);
        let first = log.records.len();
        for batch in order.chunks(cfg.batch_size) {
            let (src, tgt) = load_batch::<T>(batch, cfg.resolution)?;
            let losses = match trainer.step(&src, &tgt, iteration) {
                Ok(l) => l,
                Err(e @ RegenError::NonFiniteLoss { .. }) => {
                    if let Some(dir) = &opts.out_dir {
                        checkpoint::save(&trainer.model, epoch, &dir.join("last_good.ckpt"))?;
                    }
                    append_log(&log_path, &log.records[first..])?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            log.records.push(LogRecord::Iteration {
                epoch,
                iteration,
                learning_rate: lr,
                losses,
            });
            iteration += 1;
        }
        let scores = match &opts.validation {
            Some(v) => Some(validate(&trainer.model, v)?),
            None => None,
        };
        log.records.push(LogRecord::Epoch {
            epoch,
            seconds: started.elapsed().as_secs_f64(),
            val_l1: scores.map(|s| s.l1),
            val_fid: scores.and_then(|s| s.fid),
            val_kid_x100: scores.and_then(|s| s.kid_x100),
        });
        append_log(&log_path, &log.records[first..])?;
        if let Some(dir) = &opts.out_dir {
            checkpoint::save(&trainer.model, epoch + 1, &dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
        log::info!(
            "epoch {}/{} done in {:.1}s{}",
            epoch + 1,
            cfg.epochs,
            started.elapsed().as_secs_f64(),
            scores.map_or(String::new(), |s| format!(", val L1 {:.4}", s.l1))
        );
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&trainer.model, cfg.epochs, &dir.join("final.ckpt"))?;
    }
    Ok((trainer.model, log))
}

fn append_log(path: &Option<PathBuf>, records: &[LogRecord]) -> Result<()> {
    use std::io::Write;
    let Some(path) = path else { return Ok(()) };
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| RegenError::io(path, e))?;
    let text = TrainLog {
        records: records.to_vec(),
    }
    .to_jsonl();
    f.write_all(text.as_bytes()).map_err(|e| RegenError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn mini_config() -> TrainConfig {
        TrainConfig {
            resolution: (8, 8),
            epochs: 1,
            num_discriminator_scales: 1,
            arch: ArchConfig {
                ngf: 2,
                n_downsample: 0,
                n_blocks: 0,
                local_enhancer: false,
                n_local_blocks: 0,
                ndf: 2,
                n_layers_d: 1,
                init_std: 0.3,
            },
            loss_weights: LossWeights {
                l1: 1.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = TrainConfig::tiny();
        assert!(c.validate().is_ok());
        c.resolution = (130, 128);
        assert!(matches!(c.validate(), Err(RegenError::Config { field, .. }) if field == "resolution"));
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::tiny()
        };
        assert!(matches!(c.validate(), Err(RegenError::Config { field, .. }) if field == "epochs"));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn learning_rate_decays_linearly_in_second_half() {
        let c = TrainConfig {
            epochs: 4,
            learning_rate: 1.0,
            ..TrainConfig::tiny()
        };
        let lrs: Vec<f64> = (0..4).map(|e| c.learning_rate_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn loss_components_combine_with_weights() {
        let model = StudentModel::<f64>::build(&mini_config()).unwrap();
        let mut t = Trainer::new(model);
        let (x, y) = (random(Shape::new(1, 3, 8, 8), 1), random(Shape::new(1, 3, 8, 8), 2));
        let objective = t.generator_objective(&x, &y).unwrap();
        let l = t.compute_gradients(&x, &y).unwrap();
        assert!((l.g_total - objective).abs() < 1e-12);
        assert!(l.g_perceptual > 0.0 && l.g_feature_matching > 0.0 && l.g_l1 > 0.0);
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let model = StudentModel::<f64>::build(&mini_config()).unwrap();
        let mut t = Trainer::new(model);
        let (x, y) = (random(Shape::new(1, 3, 8, 8), 3), random(Shape::new(1, 3, 8, 8), 4));
        t.compute_gradients(&x, &y).unwrap();
        let grads: Vec<(String, Vec<f64>)> = t
            .model
            .generator
            .named_params()
            .iter()
            .map(|(n, p)| (n.clone(), p.grad.data().to_vec()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let pi = rand::Rng::gen_range(&mut rng, 0..grads.len());
            let ei = rand::Rng::gen_range(&mut rng, 0..grads[pi].1.len());
            let h = 1e-5;
            let mut eval = |delta: f64| {
                let mut params = t.model.generator.named_params_mut();
                params[pi].1.value.data_mut()[ei] += delta;
                drop(params);
                t.generator_objective(&x, &y).unwrap()
            };
            let up = eval(h);
            let down = eval(-2.0 * h);
            eval(h);
            let fd = (up - down) / (2.0 * h);
            let an = grads[pi].1[ei];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-8,
                "{}[{ei}]: analytic {an} vs numeric {fd}",
                grads[pi].0
            );
        }
    }

    #[test]
    fn every_generator_weight_receives_gradient() {
        let config = TrainConfig {
            resolution: (16, 16),
            arch: ArchConfig {
                ngf: 4,
                n_downsample: 2,
                n_blocks: 2,
                local_enhancer: true,
                n_local_blocks: 1,
                ndf: 4,
                n_layers_d: 2,
                init_std: 0.1,
            },
            ..mini_config()
        };
        let mut t = Trainer::new(StudentModel::<f64>::build(&config).unwrap());
        let (x, y) = (random(Shape::new(1, 3, 16, 16), 6), random(Shape::new(1, 3, 16, 16), 7));
        t.compute_gradients(&x, &y).unwrap();
        for (name, p) in t.model.generator.named_params() {
            assert!(p.grad.data().iter().all(|g| g.is_finite()), "{name}");
            if name.ends_with("weight") {
                assert!(p.grad.max_abs() > 0.0, "{name} received no gradient");
            }
        }
    }

    #[test]
    fn repeated_steps_fit_a_single_pair() {
        let mut c = mini_config();
        c.learning_rate = 5e-3;
        c.loss_weights = LossWeights {
            adversarial: 0.0,
            feature_matching: 0.0,
            perceptual: 0.0,
            l1: 1.0,
        };
        let mut t = Trainer::new(StudentModel::<f64>::build(&c).unwrap());
        let x = random(Shape::new(1, 3, 8, 8), 7);
        let y = x.map(|v| v * 0.5);
        let first = t.step(&x, &y, 0).unwrap().g_l1;
        let mut last = first;
        for i in 1..200 {
            last = t.step(&x, &y, i).unwrap().g_l1;
        }
        assert!(last < 0.5 * first, "L1 went from {first} to {last}");
    }

    #[test]
    fn infer_pads_and_crops_and_is_bounded() {
        let c = TrainConfig {
            resolution: (16, 16),
            num_discriminator_scales: 1,
            arch: ArchConfig {
                ngf: 4,
                n_downsample: 2,
                n_blocks: 1,
                ndf: 4,
                init_std: 0.5,
                ..ArchConfig::tiny()
            },
            ..TrainConfig::tiny()
        };
        let m = StudentModel::<f64>::build(&c).unwrap();
        for (h, w) in [(16, 16), (13, 10), (5, 7)] {
            let x = random(Shape::new(1, 3, h, w), 6);
            let y = m.infer(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.max_abs() <= 1.0);
            assert_eq!(y, m.infer(&x).unwrap());
        }
    }
}
