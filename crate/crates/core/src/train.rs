//! Training loop: masking, composition, encoding, losses and an AdamW step on φ.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{Backbone, FeatureBatch, Image, ImageBatch};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::PairDataset;
use crate::inversion::{build_prompt_query, compose_query, InversionConfig, InversionNetwork};
use crate::masking::{masked_batch, MaskedPairBundle, Masker, PosTagger, RelevanceProvider};
use crate::objectives::{resolve_temperature, symmetric_info_nce_grad, total_loss, LossBundle};
use crate::optim::{AdamW, AdamWConfig, LrSchedule, Params};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
    /// `None` uses the backbone's logit scale.
    pub temperature: Option<f64>,
    /// `None` means `4·D^W`.
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub layer_norm: bool,
    pub checkpoint_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub config_hash: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 10,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            lr_schedule: LrSchedule::Constant,
            alpha: 0.5,
            tau: 0.3,
            seed: 0,
            temperature: None,
            hidden: None,
            dropout: 0.0,
            layer_norm: false,
            checkpoint_dir: PathBuf::from("checkpoints"),
            resume: None,
            log_path: None,
            config_hash: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("train.alpha must be non-negative, got {}", self.alpha)));
        }
        crate::masking::check_tau(self.tau)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn inversion<T: Scalar>(&self, backbone: &dyn Backbone<T>) -> InversionConfig {
        let dims = backbone.dims();
        InversionConfig {
            dropout: self.dropout,
            layer_norm: self.layer_norm,
            ..InversionConfig::new(dims.image_dim, dims.token_dim, self.hidden, self.seed)
        }
    }
}

/// Stacks features row-wise with the unit-norm flag set.
fn stack_features<T: Scalar>(rows: &[ndarray::Array1<T>]) -> Result<FeatureBatch<T>> {
    FeatureBatch::from_rows(rows, true)
}

/// Loss and φ gradients for one masked batch.
///
/// `originals` holds the unmasked images in bundle order.
pub fn loss_and_grad<T: Scalar>(
    backbone: &dyn Backbone<T>,
    net: &InversionNetwork<T>,
    bundles: &[MaskedPairBundle<T>],
    originals: &ImageBatch<T>,
    alpha: f64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBundle, Params<T>)> {
    if bundles.is_empty() || bundles.len() != originals.len() {
        return Err(Error::dims("masked bundles per original image", originals.len(), bundles.len()));
    }
    // query-target branch
    let f_masked = backbone.encode_image(&masked_batch(bundles)?)?;
    let (w_masked, cache_masked) = net.forward_train(f_masked.vectors.view(), rng)?;
    let composed = bundles
        .par_iter()
        .zip(w_masked.outer_iter().map(|r| r.to_owned()).collect::<Vec<_>>().into_par_iter())
        .map(|(b, w)| {
            let w = w.view();
            let q = compose_query(backbone, &b.masked_tokens, w, b.removed.token_position)?;
            let traced = backbone.encode_embedded_traced(&q.embedded, q.end_position())?;
            Ok((q.pseudo_position, traced))
        })
        .collect::<Result<Vec<_>>>()?;
    // original branch
    let f_img = backbone.encode_image(originals)?;
    let (w_img, cache_img) = net.forward_train(f_img.vectors.view(), rng)?;
    let prompts = w_img
        .outer_iter()
        .map(|r| r.to_owned())
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|w| {
            let w = w.view();
            let q = build_prompt_query(backbone, w)?;
            let traced = backbone.encode_embedded_traced(&q.embedded, q.end_position())?;
            Ok((q.pseudo_position, traced))
        })
        .collect::<Result<Vec<_>>>()?;

    let f_c = stack_features(&composed.iter().map(|(_, t)| t.feature.clone()).collect::<Vec<_>>())?;
    let f_txt = stack_features(&prompts.iter().map(|(_, t)| t.feature.clone()).collect::<Vec<_>>())?;
    let qt = symmetric_info_nce_grad(&f_img, &f_c, temperature)?;
    let org = symmetric_info_nce_grad(&f_img, &f_txt, temperature)?;
    let loss = total_loss(qt.loss, org.loss, alpha);

    let d_fc = qt.grad_b * T::lit(alpha);
    let pseudo_grads = |traced: Vec<(usize, crate::backbone::TracedFeature<'_, T>)>, d: ArrayView2<T>| -> Array2<T> {
        let rows: Vec<_> = traced
            .into_par_iter()
            .zip(d.outer_iter().map(|r| r.to_owned()).collect::<Vec<_>>().into_par_iter())
            .map(|((pos, t), g)| t.backward(g.view()).row(pos).to_owned())
            .collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal widths")
    };
    let d_w_masked = pseudo_grads(composed, d_fc.view());
    let d_w_img = pseudo_grads(prompts, org.grad_b.view());
    let mut grads = net.backward(&cache_masked, d_w_masked.view());
    grads.add_assign(&net.backward(&cache_img, d_w_img.view()));
    Ok((loss, grads))
}

#[derive(Debug, Clone, Serialize)]
struct LogLine {
    step: u64,
    qt_i2t: f64,
    qt_t2i: f64,
    org_i2t: f64,
    org_t2i: f64,
    total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub steps: usize,
    pub samples_used: usize,
    pub mean_total: f64,
    /// Skip counts by reason code.
    pub skipped: BTreeMap<String, usize>,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<LossBundle>,
    pub epochs: Vec<EpochSummary>,
    pub wall_time_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
    pub checksum_before: String,
    pub checksum_after: String,
    pub final_step: u64,
}

pub fn checkpoint_name(epoch: u32) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

fn ensure_writable(dir: &Path) -> Result<()> {
    let fail = |e: std::io::Error| {
        Error::Config(format!("train.checkpoint_dir {} is not writable: {e}", dir.display()))
    };
    std::fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"ok").map_err(fail)?;
    std::fs::remove_file(&probe).map_err(fail)
}

fn batch_seed(seed: u64, epoch: u32, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (u64::from(epoch) << 40) ^ step
}

/// State carried across steps.
pub struct Trainer<'a, T: Scalar> {
    pub backbone: &'a dyn Backbone<T>,
    pub masker: Masker<'a, T>,
    pub config: TrainConfig,
    pub net: InversionNetwork<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
    pub epoch: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: Option<LossBundle>,
    pub used: usize,
    pub skipped: Vec<&'static str>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        backbone: &'a dyn Backbone<T>,
        tagger: &'a dyn PosTagger,
        relevance: &'a dyn RelevanceProvider<T>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let masker = Masker::new(backbone, tagger, relevance, config.tau)?;
        let temperature = resolve_temperature(config.temperature, backbone.logit_scale().to_f64_lossy())?;
        let (net, optimizer, step, epoch) = match &config.resume {
            Some(path) => {
                let ck = Checkpoint::<T>::load(path)?;
                ck.check_backbone(backbone.name(), backbone.dims())?;
                let opt = ck.optimizer.ok_or_else(|| {
                    Error::Config(format!("checkpoint {} has no optimizer state to resume", path.display()))
                })?;
                (ck.net, opt, ck.meta.step, ck.meta.epoch)
            }
            None => {
                let net = InversionNetwork::new(config.inversion(backbone))?;
                let opt = AdamW::new(config.adamw(), &net.params);
                (net, opt, 0, 0)
            }
        };
        Ok(Self { backbone, masker, config, net, optimizer, step, epoch, temperature })
    }

    /// One optimizer step on a batch; returns `loss: None` when nothing was maskable.
    pub fn train_step(&mut self, images: &ImageBatch<T>, captions: &[String], total_steps: u64) -> Result<StepOutcome> {
        let seed = batch_seed(self.config.seed, self.epoch, self.step);
        let masked = self.masker.mask_batch(images, captions, seed)?;
        let skipped: Vec<&'static str> = masked.skipped.iter().map(|(_, r)| r.code()).collect();
        if masked.bundles.is_empty() {
            log::warn!("step {}: no maskable sample in batch, skipping", self.step);
            return Ok(StepOutcome { loss: None, used: 0, skipped });
        }
        let keep: Vec<usize> = masked.bundles.iter().map(|b| b.index).collect();
        let originals = ImageBatch::new(images.pixels().select(Axis(0), &keep))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD20F);
        let (loss, grads) = loss_and_grad(
            self.backbone,
            &self.net,
            &masked.bundles,
            &originals,
            self.config.alpha,
            self.temperature,
            &mut rng,
        )?;
        let lr = self.config.lr_schedule.rate(self.config.learning_rate, self.step, total_steps);
        self.optimizer.update(&mut self.net.params, &grads, lr)?;
        self.step += 1;
        Ok(StepOutcome { loss: Some(loss), used: keep.len(), skipped })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            meta: CheckpointMeta {
                backbone: self.backbone.name().to_string(),
                inversion: self.net.config.clone(),
                config_hash: self.config.config_hash.clone(),
                epoch: self.epoch,
                step: self.step,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                optimizer: None,
            },
            net: self.net.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

/// Runs the configured epochs over `dataset`, checkpointing after each one.
pub fn train<T: Scalar>(
    dataset: &PairDataset,
    backbone: &dyn Backbone<T>,
    tagger: &dyn PosTagger,
    relevance: &dyn RelevanceProvider<T>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let started = Instant::now();
    ensure_writable(&config.checkpoint_dir)?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput(format!("dataset {} has no usable records", dataset.name)));
    }
    let mut trainer = Trainer::new(backbone, tagger, relevance, config.clone())?;
    let checksum_before = backbone.weights_checksum();
    let mut log = match &config.log_path {
        Some(p) => {
            let f = std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
            Some((p.clone(), BufWriter::new(f)))
        }
        None => None,
    };
    let prep = backbone.preprocessing();
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * u64::from(config.epochs);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut final_checkpoint = None;
    while trainer.epoch < config.epochs {
        let epoch = trainer.epoch;
        let order = dataset.order(config.seed, epoch);
        let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
        let (mut sum, mut steps, mut used) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let loaded: Vec<Result<Image<T>>> = chunk.par_iter().map(|&i| dataset.records[i].source.load(&prep)).collect();
            let mut images = Vec::new();
            let mut captions = Vec::new();
            for (&i, img) in chunk.iter().zip(loaded) {
                match img {
                    Ok(img) => {
                        images.push(img);
                        captions.push(dataset.records[i].caption.clone());
                    }
                    Err(e) => {
                        log::warn!("record line {}: {e}", dataset.records[i].line);
                        *skipped.entry("undecodable".into()).or_default() += 1;
                    }
                }
            }
            if images.is_empty() {
                continue;
            }
            let batch = ImageBatch::from_images(&images)?;
            let outcome = trainer.train_step(&batch, &captions, total_steps)?;
            for code in outcome.skipped {
                *skipped.entry(code.into()).or_default() += 1;
            }
            if let Some(loss) = outcome.loss {
                loss.check(1e-6)?;
                if let Some((path, w)) = log.as_mut() {
                    let line = LogLine {
                        step: trainer.step,
                        qt_i2t: loss.qt_i2t,
                        qt_t2i: loss.qt_t2i,
                        org_i2t: loss.org_i2t,
                        org_t2i: loss.org_t2i,
                        total: loss.total,
                    };
                    let text = serde_json::to_string(&line).expect("plain struct");
                    writeln!(w, "{text}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                sum += loss.total;
                steps += 1;
                used += outcome.used;
                history.push(loss);
            }
        }
        trainer.epoch += 1;
        let path = config.checkpoint_dir.join(checkpoint_name(trainer.epoch));
        trainer.checkpoint().save(&path)?;
        if let Some((p, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        let mean_total = if steps > 0 { sum / steps as f64 } else { f64::NAN };
        log::info!("epoch {} done: {steps} steps, mean total loss {mean_total:.5}", trainer.epoch);
        epochs.push(EpochSummary { epoch: trainer.epoch, steps, samples_used: used, mean_total, skipped, checkpoint: path.clone() });
        final_checkpoint = Some(path);
    }
    let checksum_after = backbone.weights_checksum();
    if checksum_after != checksum_before {
        return Err(Error::ContractViolation("backbone weights changed during training".into()));
    }
    Ok(TrainReport {
        history,
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_checkpoint,
        checksum_before,
        checksum_after,
        final_step: trainer.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{StubBackbone, StubConfig};
    use crate::masking::{LexiconTagger, StubRelevance};

    fn setup() -> (StubBackbone<f64>, LexiconTagger, StubRelevance) {
        (StubBackbone::new(StubConfig::default()), LexiconTagger, StubRelevance::new(1, 4).unwrap())
    }

    fn batch(n: usize, seed: u64, backbone: &StubBackbone<f64>) -> (ImageBatch<f64>, Vec<String>) {
        let d = PairDataset::synthetic(n, seed);
        let prep = backbone.preprocessing();
        let imgs: Vec<_> = d.records.iter().map(|r| r.source.load(&prep).unwrap()).collect();
        (ImageBatch::from_images(&imgs).unwrap(), d.records.iter().map(|r| r.caption.clone()).collect())
    }

    fn config(dir: &Path) -> TrainConfig {
        TrainConfig { batch_size: 8, epochs: 2, learning_rate: 1e-3, seed: 3, checkpoint_dir: dir.to_path_buf(), ..Default::default() }
    }

    #[test]
    fn step_bundle_arithmetic() {
        let (b, t, r) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(&b, &t, &r, config(dir.path())).unwrap();
        let (images, captions) = batch(8, 1, &b);
        let before = trainer.net.params.clone();
        let out = trainer.train_step(&images, &captions, 10).unwrap();
        let loss = out.loss.unwrap();
        assert!((loss.total - (0.5 * loss.qt + loss.org)).abs() < 1e-12);
        assert_eq!(out.used, 8);
        assert_ne!(trainer.net.params, before);
        assert_eq!(trainer.step, 1);
    }

    #[test]
    fn alpha_zero_tracks_org() {
        let (b, t, r) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        c.alpha = 0.0;
        let mut trainer = Trainer::new(&b, &t, &r, c).unwrap();
        let (images, captions) = batch(8, 2, &b);
        let loss = trainer.train_step(&images, &captions, 10).unwrap().loss.unwrap();
        assert!(loss.qt > 0.0);
        assert_eq!(loss.total, loss.org);
    }

    #[test]
    fn unmaskable_batch_skips_step() {
        let (b, t, r) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(&b, &t, &r, config(dir.path())).unwrap();
        let (images, _) = batch(2, 2, &b);
        let out = trainer.train_step(&images, &["run fast".into(), "very quickly".into()], 10).unwrap();
        assert_eq!(out.loss, None);
        assert_eq!(out.skipped, vec!["no_noun", "no_noun"]);
        assert_eq!(trainer.step, 0);
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        let (b, t, r) = setup();
        let (images, captions) = batch(4, 5, &b);
        let masker = Masker::new(&b, &t, &r, 0.3).unwrap();
        let bundles = masker.mask_batch(&images, &captions, 9).unwrap().bundles;
        assert_eq!(bundles.len(), 4);
        let net = InversionNetwork::<f64>::new(InversionConfig::new(16, 16, None, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, grads) = loss_and_grad(&b, &net, &bundles, &images, 0.5, 0.07, &mut rng).unwrap();
        let loss = |n: &InversionNetwork<f64>| {
            loss_and_grad(&b, n, &bundles, &images, 0.5, 0.07, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0.total
        };
        let h = 1e-5;
        for (ti, g) in grads.tensors.iter().enumerate() {
            for idx in (0..g.len()).step_by(37) {
                let mut p = net.clone();
                p.params.tensors[ti].as_slice_mut().unwrap()[idx] += h;
                let mut m = net.clone();
                m.params.tensors[ti].as_slice_mut().unwrap()[idx] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let ana = g.as_slice().unwrap()[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                assert!(rel < 1e-4 || (num - ana).abs() < 1e-9, "{}[{idx}] {num} vs {ana}", grads.names[ti]);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (b, t, r) = setup();
        let data = PairDataset::synthetic(24, 4);
        let (d1, d2, d3) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut c1 = config(d1.path());
        c1.log_path = Some(d1.path().join("train.jsonl"));
        let r1 = train(&data, &b, &t, &r, &c1).unwrap();
        let r2 = train(&data, &b, &t, &r, &config(d2.path())).unwrap();
        assert_eq!(r1.history, r2.history);
        assert_eq!(r1.history.len(), 6);
        let f1 = std::fs::read(r1.final_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(f1, std::fs::read(r2.final_checkpoint.as_ref().unwrap()).unwrap());
        assert_eq!(r1.checksum_before, r1.checksum_after);
        let log = std::fs::read_to_string(d1.path().join("train.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 1);

        // resume from epoch 1 and finish epoch 2
        let mut c3 = config(d3.path());
        c3.resume = Some(d1.path().join(checkpoint_name(1)));
        let trainer = Trainer::new(&b, &t, &r, c3.clone()).unwrap();
        assert_eq!((trainer.step, trainer.epoch), (3, 1));
        assert_eq!(trainer.optimizer.step, 3);
        let r3 = train(&data, &b, &t, &r, &c3).unwrap();
        assert_eq!(r3.history[..], r1.history[3..]);
        assert_eq!(std::fs::read(r3.final_checkpoint.unwrap()).unwrap(), f1);
    }

    #[test]
    fn unwritable_checkpoint_dir_fails_first() {
        let (b, t, r) = setup();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let c = config(&blocker.join("sub"));
        let err = train(&PairDataset::synthetic(4, 0), &b, &t, &r, &c).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.learning_rate, c.alpha, c.tau), (128, 10, 1e-4, 0.5, 0.3));
    }
}
