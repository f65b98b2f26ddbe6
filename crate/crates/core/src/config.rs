//! Experiment configuration: one TOML file describing data, both encoders,
//! pretraining, meta-training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DomainKind, Split};
use crate::encoders::DualEncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, ReportFormat};
use crate::fewshot::{HeadConfig, MetaTrainSettings, Metric, Scale};
use crate::nn::AdamSettings;
use crate::pretrain::PretrainSettings;
use crate::seeding::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub per_class: usize,
    /// Fraction of every class that goes to the base split (same-domain
    /// tasks only).
    pub base_fraction: f64,
}

/// A class-per-subdirectory image tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    pub root: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub task: DomainKind,
    /// Procedural corpus; used when `base` and `novel` are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<DatasetSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel: Option<DatasetSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub bank_size: usize,
    pub optimizer: AdamSettings,
    pub scales: Vec<Scale>,
    pub metric: Metric,
    pub temperature: f64,
    #[serde(default)]
    pub squared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub q_queries: usize,
    /// One evaluation (and one report row) per shot count.
    pub k_shots: Vec<usize>,
    #[serde(default)]
    pub report_format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoders: DualEncoderConfig,
    pub pretrain: PretrainSettings,
    pub fewshot: FewshotConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// CPU-sized run on the synthetic corpus.
    pub fn desk() -> Self {
        let mt = MetaTrainSettings::desk();
        let head = HeadConfig::default();
        Self {
            seed: 0,
            data: DataConfig {
                image_size: 32,
                task: DomainKind::Same,
                synthetic: Some(SyntheticConfig {
                    n_classes: 7,
                    per_class: 100,
                    base_fraction: 0.7,
                }),
                base: None,
                novel: None,
            },
            encoders: DualEncoderConfig::tiny(),
            pretrain: PretrainSettings::desk(),
            fewshot: FewshotConfig {
                n_way: mt.n_way,
                k_shot: mt.k_shot,
                q_queries: mt.q_queries,
                epochs: mt.epochs,
                episodes_per_epoch: mt.episodes_per_epoch,
                bank_size: mt.bank_size,
                optimizer: mt.optimizer,
                scales: head.scales,
                metric: head.metric,
                temperature: head.temperature,
                squared: head.squared,
            },
            eval: EvalConfig {
                n_tasks: 1000,
                q_queries: 15,
                k_shots: vec![1, 5],
                report_format: ReportFormat::Csv,
            },
        }
    }

    /// Full-size encoders and schedules on real datasets at 224 pixels.
    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.data = DataConfig {
            image_size: 224,
            task: DomainKind::Same,
            synthetic: None,
            base: Some(DatasetSource {
                name: "crctp".into(),
                root: PathBuf::from("datasets/crctp/train"),
                split: Split::Train,
            }),
            novel: Some(DatasetSource {
                name: "crctp".into(),
                root: PathBuf::from("datasets/crctp/test"),
                split: Split::Test,
            }),
        };
        cfg.encoders = DualEncoderConfig::full();
        cfg.pretrain = PretrainSettings::full();
        cfg.fewshot.n_way = 7;
        cfg.fewshot.k_shot = 5;
        cfg.fewshot.epochs = 100;
        cfg.fewshot.episodes_per_epoch = 100;
        cfg.fewshot.bank_size = 2048;
        cfg.eval.k_shots = vec![1, 5, 10];
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        // toml names the offending key in its message.
        toml::from_str(text).map_err(|e| Error::config(first_key(&e).unwrap_or_else(|| "config".into()), e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Short content hash of the canonical serialisation.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(sha256_hex(json.as_bytes())[..12].to_string())
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            scales: self.fewshot.scales.clone(),
            metric: self.fewshot.metric,
            temperature: self.fewshot.temperature,
            squared: self.fewshot.squared,
            pretrained: false,
        }
    }

    pub fn meta_train_settings(&self) -> MetaTrainSettings {
        let f = &self.fewshot;
        MetaTrainSettings {
            n_way: f.n_way,
            k_shot: f.k_shot,
            q_queries: f.q_queries,
            epochs: f.epochs,
            episodes_per_epoch: f.episodes_per_epoch,
            optimizer: f.optimizer,
            bank_size: f.bank_size,
            seed: self.seed,
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn eval_settings(&self, k_shot: usize) -> EvalSettings {
        EvalSettings {
            n_tasks: self.eval.n_tasks,
            n_way: self.fewshot.n_way,
            k_shot,
            q_queries: self.eval.q_queries,
            seed: self.seed,
        }
    }

    /// Check every section. Runs before anything is computed.
    pub fn validate(&self) -> Result<()> {
        self.validate_data()?;
        self.encoders.validate()?;
        let size = self.data.image_size;
        self.encoders
            .validate_input(size, size)
            .map_err(|e| Error::config("data.image_size", e.to_string()))?;
        self.pretrain.validate(&self.encoders.pyramid)?;
        self.meta_train_settings().validate()?;
        let head = self.head();
        head.validate()?;
        if head.needs_projector() && self.fewshot.bank_size < self.encoders.dim / 2 {
            return Err(Error::config(
                "fewshot.bank_size",
                format!(
                    "{} samples cannot fit {} principal components",
                    self.fewshot.bank_size,
                    self.encoders.dim / 2
                ),
            ));
        }
        if self.eval.k_shots.is_empty() {
            return Err(Error::config("eval.k_shots", "list at least one shot count"));
        }
        for &k in &self.eval.k_shots {
            self.eval_settings(k).validate()?;
        }
        self.validate_class_counts()
    }

    fn validate_data(&self) -> Result<()> {
        let d = &self.data;
        if d.image_size == 0 {
            return Err(Error::config("data.image_size", "must be positive"));
        }
        match (&d.synthetic, &d.base, &d.novel) {
            (Some(s), None, None) => {
                if s.n_classes < 2 || s.per_class < 2 {
                    return Err(Error::config("data.synthetic", "needs n_classes >= 2 and per_class >= 2"));
                }
                if !(s.base_fraction > 0.0 && s.base_fraction < 1.0) {
                    return Err(Error::config("data.synthetic.base_fraction", "must lie strictly between 0 and 1"));
                }
                Ok(())
            }
            (None, Some(base), Some(novel)) => {
                if d.task == DomainKind::Same && base.name != novel.name {
                    return Err(Error::config(
                        "data.novel.name",
                        format!("a same-domain task uses one dataset, got `{}` and `{}`", base.name, novel.name),
                    ));
                }
                if d.task != DomainKind::Same && base.name == novel.name {
                    return Err(Error::config("data.novel.name", format!("a {}-domain task needs a different dataset", d.task)));
                }
                Ok(())
            }
            (Some(_), _, _) => Err(Error::config("data", "give either `synthetic` or `base` and `novel`, not both")),
            _ => Err(Error::config("data", "give either a `synthetic` section or both `base` and `novel`")),
        }
    }

    /// Per-class sample requirements that can be checked without touching
    /// the disk (synthetic corpora only).
    fn validate_class_counts(&self) -> Result<()> {
        let Some(s) = &self.data.synthetic else {
            return Ok(());
        };
        if self.fewshot.n_way > s.n_classes {
            return Err(Error::config(
                "fewshot.n_way",
                format!("{} exceeds the {} synthetic classes", self.fewshot.n_way, s.n_classes),
            ));
        }
        let (base, novel) = if self.data.task == DomainKind::Same {
            let b = ((s.per_class as f64 * s.base_fraction).floor() as usize).clamp(1, s.per_class - 1);
            (b, s.per_class - b)
        } else {
            (s.per_class, s.per_class)
        };
        let need = self.fewshot.k_shot + self.fewshot.q_queries;
        if base < need {
            return Err(Error::config(
                "data.synthetic.per_class",
                format!("{base} base samples per class, meta-training episodes need {need}"),
            ));
        }
        let k_max = self.eval.k_shots.iter().copied().max().unwrap_or(0);
        if novel < k_max + self.eval.q_queries {
            return Err(Error::config(
                "data.synthetic.per_class",
                format!("{novel} novel samples per class, evaluation episodes need {}", k_max + self.eval.q_queries),
            ));
        }
        Ok(())
    }
}

/// Best-effort dotted key path of a TOML deserialisation error.
fn first_key(e: &toml::de::Error) -> Option<String> {
    let msg = e.message();
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}
