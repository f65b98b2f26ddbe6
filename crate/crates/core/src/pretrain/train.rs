use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mae::{sample_plans, DecoderConfig, MaskedAutoencoder};
use super::mask::{LossScope, MaskPlan, DEFAULT_SM_RATIO};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointKind};
use crate::data::Dataset;
use crate::encoders::PyramidEncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{restore, snapshot, AdamSettings, AdamW, ParamBuilder};
use crate::seeding::{stream, StreamDomain};

pub const LOSS_LOG_FILE: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    /// Pretraining resolution; images are resampled to it.
    pub image_size: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub warmup_steps: usize,
    pub sm_ratio: f64,
    #[serde(default)]
    pub loss_scope: LossScope,
    pub optimizer: AdamSettings,
    /// Checkpoint every this many steps (0: only at the end).
    #[serde(default)]
    pub save_every: usize,
    /// Number of (original, masked, reconstruction) triplets written at the end.
    #[serde(default)]
    pub dump_reconstructions: usize,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub seed: u64,
}

impl PretrainSettings {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            batch_size: 16,
            accumulation: 1,
            epochs: 100,
            max_steps: Some(200),
            warmup_steps: 10,
            sm_ratio: DEFAULT_SM_RATIO,
            loss_scope: LossScope::Missing,
            optimizer: AdamSettings::pretrain(),
            save_every: 100,
            dump_reconstructions: 4,
            decoder: DecoderConfig::tiny(),
            seed: 0,
        }
    }

    /// Batch 256 with 4-fold accumulation, 100 epochs. Pretraining runs at 256
    /// pixels: a 224 image leaves a 112 pixel compact map, which a stride-32
    /// pyramid cannot tile.
    pub fn full() -> Self {
        Self {
            image_size: 256,
            batch_size: 256,
            accumulation: 4,
            epochs: 100,
            max_steps: None,
            warmup_steps: 0,
            decoder: DecoderConfig::base(),
            save_every: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self, encoder: &PyramidEncoderConfig) -> Result<()> {
        let key = |k: &str| format!("pretrain.{k}");
        if self.batch_size == 0 {
            return Err(Error::config(key("batch_size"), "must be >= 1"));
        }
        if self.accumulation == 0 {
            return Err(Error::config(key("accumulation"), "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config(key("epochs"), "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.sm_ratio) {
            return Err(Error::config(key("sm_ratio"), format!("{} must lie in [0, 1)", self.sm_ratio)));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::config(key("optimizer.lr"), "must be finite and positive"));
        }
        let cell = 2 * encoder.patch_size;
        if self.image_size == 0 || self.image_size % cell != 0 || encoder.validate_input(self.image_size / 2, self.image_size / 2).is_err() {
            return Err(Error::config(
                key("image_size"),
                format!(
                    "{} cannot be masked into a compact map the pyramid accepts (use a multiple of {})",
                    self.image_size,
                    2 * crate::encoders::TOTAL_STRIDE
                ),
            ));
        }
        self.decoder.validate(encoder)
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.effective_batch()
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Linear warmup then cosine decay to zero over `total` steps; `step` is 1-based.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr;
        if step <= self.warmup_steps {
            return base * step as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * base * (1.0 + (PI * t.min(1.0)).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Every row of the loss log, including rows from before a resume.
    pub log: Vec<LossRow>,
    pub checkpoint: PathBuf,
}

impl PretrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// The sample indices and mask plans of one optimizer step; a pure function
/// of `(seed, step)`.
pub fn step_inputs(settings: &PretrainSettings, n: usize, grid: usize, step: usize) -> Result<Vec<(Vec<usize>, Vec<MaskPlan>)>> {
    let per_epoch = settings.steps_per_epoch(n);
    if per_epoch == 0 {
        return Err(Error::Dataset(format!(
            "{n} images cannot fill one effective batch of {}",
            settings.effective_batch()
        )));
    }
    let epoch = (step - 1) / per_epoch;
    let within = (step - 1) % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(settings.seed, StreamDomain::BatchOrder, epoch as u64));
    let mut mask_rng = stream(settings.seed, StreamDomain::Mask, step as u64);
    let start = within * settings.effective_batch();
    (0..settings.accumulation)
        .map(|a| {
            let s = start + a * settings.batch_size;
            let idx = order[s..s + settings.batch_size].to_vec();
            let plans = sample_plans(idx.len(), grid, grid, settings.sm_ratio, &mut mask_rng)?;
            Ok((idx, plans))
        })
        .collect()
}

fn read_log(path: &Path) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

fn write_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Run<'a> {
    settings: &'a PretrainSettings,
    encoder: &'a PyramidEncoderConfig,
    varmap: VarMap,
    dataset_name: String,
}

impl Run<'_> {
    fn save(&self, dir: &Path, step: usize, opt: Option<&AdamW>) -> Result<PathBuf> {
        let mut header = CheckpointHeader::new(CheckpointKind::Pretrain, self.encoder.clone(), step, self.settings.seed);
        header.decoder = Some(self.settings.decoder.clone());
        header.provenance = BTreeMap::from([
            ("phase".to_string(), "pretrain".to_string()),
            ("dataset".to_string(), self.dataset_name.clone()),
            ("settings".to_string(), serde_json::to_string(self.settings)?),
            ("created".to_string(), chrono::Utc::now().to_rfc3339()),
        ]);
        let opt_state = opt.map(|o| o.state());
        save_checkpoint(dir, header, &snapshot(&self.varmap)?, opt_state.as_ref())
    }
}

/// Masked-autoencoder pretraining of the pyramid encoder.
///
/// Writes `loss.csv` (one row per optimizer step), `checkpoint-<step>/`
/// every `save_every` steps, `checkpoint/` at the end, and optional reconstruction triplets
/// under `recon/`. With `resume`, parameters, optimizer moments and the step
/// counter are restored and training continues from the next step; because
/// batch order and masks depend only on `(seed, step)`, the resumed run
/// follows the uninterrupted one.
pub fn pretrain_loop(
    dataset: &Dataset,
    encoder: &PyramidEncoderConfig,
    settings: &PretrainSettings,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainReport> {
    encoder.validate()?;
    settings.validate(encoder)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("pretraining dataset is empty".into()));
    }
    let data = dataset.resized(settings.image_size);
    let device = Device::Cpu;
    let varmap = VarMap::new();
    let pb = ParamBuilder::new(&varmap, settings.seed, DType::F32, &device);
    let model = MaskedAutoencoder::new(&pb, encoder, &settings.decoder)?;
    let mut opt = AdamW::new(&varmap, settings.optimizer)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut start = 0;
    let mut log = Vec::new();
    if let Some(dir) = resume {
        let ck = load_checkpoint(dir)?;
        if ck.header.kind != CheckpointKind::Pretrain
            || &ck.header.pyramid != encoder
            || ck.header.decoder.as_ref() != Some(&settings.decoder)
        {
            return Err(Error::Checkpoint(format!(
                "{} does not match the configured pretraining model",
                dir.display()
            )));
        }
        restore(&varmap, &ck.params, None)?;
        let state = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", dir.display())))?;
        opt.load_state(&state, ck.header.step)?;
        start = ck.header.step;
        log = read_log(&log_path)?;
        log.retain(|r| r.step <= start);
    }
    let run = Run {
        settings,
        encoder,
        varmap: varmap.clone(),
        dataset_name: format!("{} ({})", data.name, data.split),
    };
    let total = settings.total_steps(data.len());
    if total == 0 {
        return Err(Error::Dataset(format!(
            "{} images cannot fill one effective batch of {}",
            data.len(),
            settings.effective_batch()
        )));
    }
    let grid = settings.image_size / encoder.patch_size;
    let ckpt_dir = out_dir.join("checkpoint");
    for step in start + 1..=total {
        let lr = settings.lr_at(step, total);
        opt.set_lr(lr);
        let mut losses = Vec::with_capacity(settings.accumulation);
        for (idx, plans) in step_inputs(settings, data.len(), grid, step)? {
            let images = data.batch(&idx, DType::F32, &device)?;
            losses.push(model.forward_loss(&images, &plans, settings.loss_scope)?.1);
        }
        let loss = (Tensor::stack(&losses, 0)?.sum_all()? / settings.accumulation as f64)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            write_log(&log_path, &log)?;
            let last = run.save(&out_dir.join("last-finite"), step - 1, Some(&opt))?;
            return Err(Error::Diverged {
                step,
                checkpoint: Some(last),
            });
        }
        opt.backward_step(&loss)?;
        log.push(LossRow { step, loss: value, lr });
        if settings.save_every > 0 && step % settings.save_every == 0 && step < total {
            write_log(&log_path, &log)?;
            run.save(&out_dir.join(format!("checkpoint-{step:06}")), step, Some(&opt))?;
        }
        if step % 20 == 0 {
            log::info!("pretrain step {step}/{total}: loss {value:.5}");
        }
    }
    write_log(&log_path, &log)?;
    let checkpoint = run.save(&ckpt_dir, total, Some(&opt))?;
    if settings.dump_reconstructions > 0 {
        dump_reconstructions(&model, &data, settings, &out_dir.join("recon"))?;
    }
    Ok(PretrainReport { log, checkpoint })
}

/// Write `(original | masked | reconstruction)` strips for the first few
/// samples. Masked view greys out dropped patches and darkens secondarily
/// masked ones; the reconstruction shows predictions on hidden patches and
/// the original pixels elsewhere.
pub fn dump_reconstructions(model: &MaskedAutoencoder, data: &Dataset, settings: &PretrainSettings, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = settings.dump_reconstructions.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let p = model.patch_size();
    let size = data.image_size;
    let grid = size / p;
    let plans = sample_plans(n, grid, grid, settings.sm_ratio, &mut stream(settings.seed, StreamDomain::Mask, 0))?;
    let images = data.batch(&idx, DType::F32, &Device::Cpu)?;
    let recon = model.reconstruct(&images, &plans)?.flatten_from(1)?.to_vec2::<f32>()?;
    for (b, plan) in plans.iter().enumerate() {
        let orig = data.get(b).chw();
        let pred = &recon[b];
        let mut strip = image::RgbImage::new(3 * size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let patch = (y / p) * grid + x / p;
                let hidden = !plan.is_kept(patch) || plan.is_sm_masked(patch);
                for c in 0..3 {
                    let i = (c * size + y) * size + x;
                    let o = orig[i];
                    let masked = if !plan.is_kept(patch) {
                        0.5
                    } else if plan.is_sm_masked(patch) {
                        0.25 * o
                    } else {
                        o
                    };
                    let r = if hidden { pred[i] } else { o };
                    for (panel, v) in [o, masked, r].into_iter().enumerate() {
                        let px = strip.get_pixel_mut((panel * size + x) as u32, y as u32);
                        px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
        let path = dir.join(format!("sample_{b:03}.png"));
        strip
            .save(&path)
            .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}
