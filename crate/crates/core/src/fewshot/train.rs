use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::DcpnModel;
use super::scoring::nll_tensor;
use crate::data::{Dataset, EpisodeSpec};
use crate::error::{Error, Result};
use crate::nn::{AdamSettings, AdamW};

pub const TRAIN_LOG_FILE: &str = "meta_train_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub optimizer: AdamSettings,
    /// Base samples embedded for each PCA refit.
    pub bank_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MetaTrainSettings {
    pub fn desk() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            epochs: 10,
            episodes_per_epoch: 50,
            optimizer: AdamSettings::meta_train(),
            bank_size: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        EpisodeSpec::new(self.n_way, self.k_shot, self.q_queries, self.seed)
            .map_err(|e| Error::config("fewshot", e.to_string()))?;
        if self.epochs == 0 {
            return Err(Error::config("fewshot.epochs", "must be >= 1"));
        }
        if self.episodes_per_epoch == 0 {
            return Err(Error::config("fewshot.episodes_per_epoch", "must be >= 1"));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::config("fewshot.optimizer.lr", "must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainReport {
    pub log: Vec<EpisodeLog>,
    pub checkpoint: Option<PathBuf>,
}

impl MetaTrainReport {
    pub fn epoch_means(&self) -> Vec<(f64, f64)> {
        let epochs = self.log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<_> = self.log.iter().filter(|r| r.epoch == e).collect();
                let n = rows.len().max(1) as f64;
                (
                    rows.iter().map(|r| r.loss).sum::<f64>() / n,
                    rows.iter().map(|r| r.acc).sum::<f64>() / n,
                )
            })
            .collect()
    }
}

/// Episodic training of both channels and heads on `base`.
///
/// At every epoch start the PCA projector is refitted on the base feature
/// bank and then held fixed; after the last epoch it is refitted once more
/// so the saved projector matches the final weights. With `out_dir`, the
/// per-episode log and a checkpoint (`out_dir/checkpoint`) are written; a
/// non-finite loss saves the last finite weights to `out_dir/last-finite`
/// and aborts.
pub fn meta_train(
    model: &mut DcpnModel,
    base: &Dataset,
    settings: &MetaTrainSettings,
    out_dir: Option<&Path>,
) -> Result<MetaTrainReport> {
    settings.validate()?;
    if base.is_empty() {
        return Err(Error::Dataset("meta-training dataset is empty".into()));
    }
    let spec = EpisodeSpec::new(settings.n_way, settings.k_shot, settings.q_queries, settings.seed)?;
    let mut opt = AdamW::new(model.varmap(), settings.optimizer)?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(csv::Writer::from_path(dir.join(TRAIN_LOG_FILE))?)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(settings.epochs * settings.episodes_per_epoch);
    let provenance = |step: usize| {
        BTreeMap::from([
            ("phase".to_string(), "meta-train".to_string()),
            ("base".to_string(), format!("{} ({})", base.name, base.split)),
            ("episodes".to_string(), step.to_string()),
            ("created".to_string(), chrono::Utc::now().to_rfc3339()),
        ])
    };
    for epoch in 0..settings.epochs {
        if model.head.needs_projector() {
            model.refresh_projector(base, settings.bank_size, epoch as u64)?;
        }
        for e in 0..settings.episodes_per_epoch {
            let index = epoch * settings.episodes_per_epoch + e;
            let ep = spec.episode(base, index as u64)?;
            let support = base.batch(&ep.support_indices(), model.dtype(), model.device())?;
            let query = base.batch(&ep.query_indices(), model.dtype(), model.device())?;
            let labels = ep.query_labels();
            let scores = model.episode_scores(&support, &ep.support_labels(), &query, true)?;
            let loss = nll_tensor(&scores.log_probs, &labels)?;
            let loss_value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !loss_value.is_finite() {
                let checkpoint = match out_dir {
                    Some(dir) => Some(model.save(&dir.join("last-finite"), index, provenance(index), Some(&opt))?),
                    None => None,
                };
                return Err(Error::Diverged { step: index, checkpoint });
            }
            let preds = scores.log_probs.argmax(1)?.to_vec1::<u32>()?;
            let acc = preds.iter().zip(&labels).filter(|(p, l)| **p as usize == **l).count() as f64 / labels.len() as f64;
            opt.backward_step(&loss)?;
            let row = EpisodeLog {
                episode: index,
                epoch,
                loss: loss_value,
                acc,
            };
            if let Some(w) = writer.as_mut() {
                w.serialize(&row)?;
            }
            log.push(row);
        }
        let n = settings.episodes_per_epoch as f64;
        let tail = &log[log.len() - settings.episodes_per_epoch..];
        log::info!(
            "epoch {epoch}: loss {:.4}, acc {:.3}",
            tail.iter().map(|r| r.loss).sum::<f64>() / n,
            tail.iter().map(|r| r.acc).sum::<f64>() / n
        );
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(TRAIN_LOG_FILE, e))?;
    }
    if model.head.needs_projector() {
        model.refresh_projector(base, settings.bank_size, settings.epochs as u64)?;
    }
    let checkpoint = match out_dir {
        Some(dir) => Some(model.save(&dir.join("checkpoint"), log.len(), provenance(log.len()), Some(&opt))?),
        None => None,
    };
    Ok(MetaTrainReport { log, checkpoint })
}
