use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, confusion, metrics};
use crate::data::{Dataset, EpisodeSpec};
use crate::error::{Error, Result};
use crate::fewshot::{classify, compute_prototypes, episode_loss, score_queries, DcpnModel, MultiScaleFeature};
use crate::seeding::StreamDomain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn protocol(n_way: usize, k_shot: usize, seed: u64) -> Self {
        Self {
            n_tasks: 1000,
            n_way,
            k_shot,
            q_queries: 15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::config("eval.n_tasks", "must be >= 1"));
        }
        EpisodeSpec::new(self.n_way, self.k_shot, self.q_queries, self.seed)
            .map_err(|e| Error::config("eval", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Correct classifications over all queries of all episodes.
    pub accuracy: f64,
    /// Per-episode macro precision, recall, F1 and AUC, averaged over episodes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub n_episodes: usize,
    pub n_queries: usize,
    pub mean_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval of `mean_accuracy`.
    pub ci95: f64,
    pub mean_loss: f64,
}

/// `(mean, 1.96 · σ / √n)` with the population standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Mean accuracy over `n_tasks` episodes drawn from `novel`.
///
/// Inference is per-sample (normalisation layers use running statistics), so
/// every image is embedded once up front and episodes index into the
/// cached features; the PCA projector stays frozen. Episode `i` is drawn from
/// the `(seed, i)` evaluation stream. With `episode_log`, one CSV row
/// `(episode_id, accuracy, loss)` is written per episode.
pub fn evaluate_protocol(
    model: &DcpnModel,
    novel: &Dataset,
    settings: &EvalSettings,
    episode_log: Option<&Path>,
) -> Result<MetricsReport> {
    settings.validate()?;
    model.head.validate()?;
    if model.head.needs_projector() && model.projector.is_none() {
        return Err(Error::InvalidArgument("the mix scale requires a fitted PCA projector".into()));
    }
    let spec = EpisodeSpec::new(settings.n_way, settings.k_shot, settings.q_queries, settings.seed)?;
    let (z_g, z_l) = model.embed_dataset(novel)?;
    let feats = model.multi_scale(&z_g, &z_l)?;
    let mut writer = match episode_log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some(csv::Writer::from_path(path)?)
        }
        None => None,
    };
    let mut accs = Vec::with_capacity(settings.n_tasks);
    let (mut correct, mut queries) = (0usize, 0usize);
    let (mut p_sum, mut r_sum, mut f_sum, mut auc_sum, mut loss_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..settings.n_tasks {
        let ep = spec.episode_in(novel, StreamDomain::EvalEpisode, i as u64)?;
        let support: Vec<MultiScaleFeature> = ep.support_indices().iter().map(|&j| feats[j].clone()).collect();
        let query: Vec<MultiScaleFeature> = ep.query_indices().iter().map(|&j| feats[j].clone()).collect();
        let labels = ep.query_labels();
        let mp = compute_prototypes(&support, &ep.support_labels())?;
        let results = score_queries(&query, &mp, &model.head)?;
        let preds: Vec<usize> = results.iter().map(classify).collect();
        let counts = confusion(&preds, &labels, settings.n_way)?;
        let m = metrics(&counts);
        let probs: Vec<Vec<f64>> = results.iter().map(|r| r.probs.clone()).collect();
        let loss = episode_loss(&results, &labels)?;
        let ep_correct = counts.per_class.iter().map(|c| c.tp).sum::<usize>();
        correct += ep_correct;
        queries += labels.len();
        accs.push(m.accuracy);
        p_sum += m.precision;
        r_sum += m.recall;
        f_sum += m.f1;
        auc_sum += auc(&probs, &labels)?;
        loss_sum += loss;
        if let Some(w) = writer.as_mut() {
            w.serialize(EpisodeResult {
                episode_id: i,
                accuracy: m.accuracy,
                loss,
            })?;
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io("episode log", e))?;
    }
    let n = settings.n_tasks as f64;
    let (mean_accuracy, ci95) = mean_ci95(&accs);
    Ok(MetricsReport {
        accuracy: correct as f64 / queries as f64,
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
        auc: auc_sum / n,
        n_episodes: settings.n_tasks,
        n_queries: queries,
        mean_accuracy,
        ci95,
        mean_loss: loss_sum / n,
    })
}
