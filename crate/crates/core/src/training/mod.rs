//! Objective, optimizer, schedule, training loop, checkpoints and gradient
//! checking.

mod checkpoint;
mod gradcheck;
mod losses;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use gradcheck::{finite_difference_gradcheck, FD_STEP};
pub use losses::{audio_loss, audio_loss_var, total_loss, video_loss, VideoLoss};
pub use optim::{clip_grad_norm, AdamW, StepLr};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use stfm_tensor::{randn, Gradients, Tape, Tensor};

use crate::data_model::{Image, Sample};
use crate::encoders::{kl_divergence, reparameterize};
use crate::error::{Error, Result};
use crate::model::{PreparedSample, StfmModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_audio: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Walk the schedule and log learning rates without touching the model.
    pub dry_run: bool,
    pub autoencoder: AutoencoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            lr_step: 1000,
            lr_gamma: 0.5,
            epochs: 10,
            batch_size: 8,
            lambda_audio: 0.1,
            seed: 0,
            grad_clip: Some(1.0),
            max_steps: None,
            dry_run: false,
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::arg("batch_size and lr_step must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_gamma > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::arg("lr and lr_gamma must be positive, weight_decay non-negative"));
        }
        if self.lambda_audio < 0.0 || !self.lambda_audio.is_finite() {
            return Err(Error::arg("lambda_audio must be a non-negative number"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepLr {
        StepLr {
            base: self.lr,
            step_size: self.lr_step,
            gamma: self.lr_gamma,
        }
    }

    /// Optimizer steps a run over `samples` items will take.
    pub fn total_steps(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size);
        let n = per_epoch.saturating_mul(self.epochs);
        self.max_steps.map_or(n, |m| m.min(n))
    }
}

/// One CSV row. Loss fields are `None` in dry runs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_video: Option<f64>,
    pub l_audio: Option<f64>,
    pub l_total: Option<f64>,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

pub const CSV_HEADER: &str = "step,l_video,l_audio,l_total,lr,grad_norm";

impl StepRecord {
    fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{:.10e},{}",
            self.step,
            f(self.l_video),
            f(self.l_audio),
            f(self.l_total),
            self.lr,
            f(self.grad_norm)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("expected 6 columns: {line}")));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        Ok(Self {
            step: cols[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", cols[0])))?,
            l_video: opt(cols[1])?,
            l_audio: opt(cols[2])?,
            l_total: opt(cols[3])?,
            lr: num(cols[4])?,
            grad_norm: opt(cols[5])?,
        })
    }
}

/// Reads a training log written by [`Trainer`].
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip_while(|l| l.trim() == CSV_HEADER)
        .filter(|l| !l.trim().is_empty() && l.trim() != CSV_HEADER)
        .map(StepRecord::parse)
        .collect()
}

/// Append-only step log.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn open(path: &Path) -> Result<Self> {
        crate::data_pipeline::io::ensure_parent(path)?;
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.csv_line())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("training log", e))
    }
}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.l_total).collect()
    }
}

/// Exponential moving average of a curve.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let s = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(s);
        out.push(s);
    }
    out
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub step: usize,
    log: Option<CsvLog>,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(config.weight_decay),
            config,
            step: 0,
            log: None,
            checkpoint_dir: None,
        })
    }

    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        self.log = Some(CsvLog::open(path)?);
        Ok(self)
    }

    /// Writes `epoch_{k}.ckpt` after each epoch.
    pub fn with_checkpoints(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    fn sample_rng(&self, step: usize, slot: usize) -> stfm_tensor::Rng {
        stfm_tensor::rng(
            self.config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((step as u64) << 16)
                .wrapping_add(slot as u64),
        )
    }

    /// One optimizer step over `batch`; gradients are averaged per sample.
    pub fn train_step(&mut self, model: &mut StfmModel, batch: &[&PreparedSample]) -> Result<StepRecord> {
        let lr = self.config.schedule().lr_at(self.step);
        if self.config.dry_run {
            let rec = StepRecord {
                step: self.step,
                l_video: None,
                l_audio: None,
                l_total: None,
                lr,
                grad_norm: None,
            };
            self.step += 1;
            return Ok(rec);
        }
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let lambda = self.config.lambda_audio;
        let stop_w = model.config.stop_weight;
        let mut grads = Gradients::new(model.store.len());
        let (mut lv, mut la) = (0.0, 0.0);
        for (slot, sample) in batch.iter().enumerate() {
            let mut rng = self.sample_rng(self.step, slot);
            let tape = Tape::new();
            let l = model.losses(&tape, sample, &mut rng)?;
            let objective = l.l_video.add(l.l_audio.scale(lambda)).add(l.l_stop.scale(stop_w));
            lv += l.l_video.value().data()[0];
            la += l.l_audio.value().data()[0];
            grads.merge(&tape.backward(objective, &model.store));
        }
        let n = batch.len() as f64;
        let (lv, la) = (lv / n, la / n);
        grads.scale(1.0 / n);
        let norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grads.global_norm(),
        };
        if !(lv.is_finite() && la.is_finite() && norm.is_finite()) {
            return Err(Error::NumericAbort {
                step: self.step,
                l_video: lv,
                l_audio: la,
                grad_norm: norm,
            });
        }
        self.optimizer.step(&mut model.store, &grads, lr);
        let rec = StepRecord {
            step: self.step,
            l_video: Some(lv),
            l_audio: Some(la),
            l_total: Some(total_loss(lv, la, lambda)?),
            lr,
            grad_norm: Some(norm),
        };
        self.step += 1;
        Ok(rec)
    }

    /// Epoch loop with a seeded shuffle per epoch.
    pub fn run(&mut self, model: &mut StfmModel, data: &[PreparedSample]) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::arg("no training samples"));
        }
        let total = self.config.total_steps(data.len());
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        'epochs: for epoch in 0..self.config.epochs {
            order.shuffle(&mut stfm_tensor::rng(self.config.seed.wrapping_add(epoch as u64)));
            for chunk in order.chunks(self.config.batch_size) {
                if report.records.len() >= total {
                    break 'epochs;
                }
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
                let rec = self.train_step(model, &batch)?;
                if let Some(log) = &mut self.log {
                    log.write(&rec)?;
                }
                if rec.step % 50 == 0 {
                    log::info!(
                        "step {} lr {:.3e} l_total {}",
                        rec.step,
                        rec.lr,
                        rec.l_total.map_or("-".into(), |v| format!("{v:.5}"))
                    );
                }
                report.records.push(rec);
            }
            if let (Some(dir), false) = (&self.checkpoint_dir, self.config.dry_run) {
                let path = dir.join(format!("epoch_{epoch}.ckpt"));
                save_checkpoint(&path, model, &CheckpointMeta { step: self.step, epoch: epoch + 1 })?;
                report.checkpoints.push(path);
            }
        }
        Ok(report)
    }
}

/// Settings for fitting the appearance autoencoder before the main run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the KL term per latent scalar relative to per-pixel error.
    pub kl_weight: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            lr: 2e-3,
            kl_weight: 1e-4,
        }
    }
}

/// Fits the appearance encoder and frame decoder as a VAE on `images`;
/// returns the reconstruction loss of every step.
pub fn pretrain_autoencoder(model: &mut StfmModel, images: &[&Image], cfg: &AutoencoderConfig, seed: u64) -> Result<Vec<f64>> {
    use rand::Rng as _;
    if images.is_empty() {
        return Err(Error::arg("no images for autoencoder pretraining"));
    }
    let hw = model.scale().image_hw;
    for img in images {
        img.expect_square(hw)?;
    }
    model.freeze_autoencoder(false);
    let mut opt = AdamW::new(0.0);
    let mut rng = stfm_tensor::rng(seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = cfg.batch_size.min(images.len()).max(1);
        let mut data = Vec::with_capacity(b * hw * hw * 3);
        for _ in 0..b {
            data.extend_from_slice(images[rng.random_range(0..images.len())].data().data());
        }
        let x = Tensor::new(&[b, hw, hw, 3], data)?;
        let tape = Tape::new();
        let xv = tape.constant(x);
        let (mean, logvar) = model.encoders.visual_app.posterior(&tape, &model.store, xv);
        let eps = randn(&mean.shape(), &mut rng);
        let z = reparameterize(&tape, mean, logvar, eps);
        let recon = model.video.decoder.forward(&tape, &model.store, z);
        let rec = recon.sub(xv).square().mean();
        let kl = kl_divergence(mean, logvar).scale(1.0 / mean.value().numel() as f64);
        let loss = rec.add(kl.scale(cfg.kl_weight));
        let r = rec.value().data()[0];
        if !r.is_finite() {
            return Err(Error::NumericAbort {
                step,
                l_video: r,
                l_audio: 0.0,
                grad_norm: f64::NAN,
            });
        }
        let mut grads = tape.backward(loss, &model.store);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut model.store, &grads, cfg.lr);
        curve.push(r);
    }
    model.freeze_autoencoder(true);
    log::info!("autoencoder reconstruction mse {:.5}", curve.last().copied().unwrap_or(f64::NAN));
    Ok(curve)
}

/// `1 / rms` of the video offsets, so diffusion targets have unit scale.
pub fn calibrate_latent_scale(data: &[PreparedSample]) -> f64 {
    let (mut sq, mut n) = (0.0, 0usize);
    for s in data {
        sq += s.video_delta.sq_norm();
        n += s.video_delta.numel();
    }
    let rms = (sq / n.max(1) as f64).sqrt();
    if rms > 1e-8 { 1.0 / rms } else { 1.0 }
}

/// Fits the autoencoder on every ground-truth frame of `samples`, then
/// prepares the samples and calibrates the latent scale from them.
pub fn fit_autoencoder_and_prepare(
    model: &mut StfmModel,
    samples: &[Sample],
    cfg: &AutoencoderConfig,
    seed: u64,
) -> Result<Vec<PreparedSample>> {
    let frames: Vec<&Image> = samples
        .iter()
        .flat_map(|s| s.gt_frames.iter().take(model.scale().frame_count))
        .collect();
    if cfg.steps > 0 {
        pretrain_autoencoder(model, &frames, cfg, seed)?;
    }
    model.freeze_autoencoder(true);
    let prepared = prepare_all(model, samples)?;
    if cfg.steps > 0 {
        model.set_latent_scale(calibrate_latent_scale(&prepared));
    }
    Ok(prepared)
}

pub fn prepare_all(model: &StfmModel, samples: &[Sample]) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| model.prepare(s)).collect()
}
