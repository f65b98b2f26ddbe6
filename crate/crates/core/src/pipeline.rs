//! End-to-end orchestration: synth → pretrain → extract → meta-train →
//! evaluate → report, inside one run directory per configuration.
//!
//! Layout of `<out>/run-<config hash>/`:
//!
//! ```text
//! run.json  config.toml  .lock
//! .done/<stage>
//! data/{base,novel}/<class>/*.png   data/manifest.json
//! pretrain/{loss.csv, checkpoint/, recon/}
//! embeddings/{base,novel}_global.{bin,json}  embeddings/distance.json
//! meta-train/{meta_train_log.csv, checkpoint/}
//! eval/{episodes_k<K>.csv, metrics_k<K>.json, results.csv}
//! report.{csv,json}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::cache::{extract_embeddings, Channel};
use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{
    dataset_distance, generate_synthetic_corpus, load_dataset, make_domain_task, Dataset, DatasetSpec, DomainKind,
    Split, SyntheticManifest,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocol, read_report, report, MetricsReport, ReportFormat, ReportRow};
use crate::fewshot::{meta_train, DcpnModel};
use crate::pretrain::pretrain_loop;

/// Seed offset of the second synthetic corpus used as the novel dataset of
/// cross-domain tasks.
pub const NOVEL_SEED_OFFSET: u64 = 1_000_003;

const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Pretrain,
    Extract,
    MetaTrain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Pretrain,
        Stage::Extract,
        Stage::MetaTrain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Extract => "extract",
            Stage::MetaTrain => "meta-train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Parse `synth,meta-train,...` (or `all`) into canonical stage order.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut stages: Vec<Stage> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    stages.sort();
    stages.dedup();
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no stages given".into()));
    }
    Ok(stages)
}

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn for_config(out_dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            root: out_dir.join(format!("run-{}", cfg.hash()?)),
        })
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.pretrain().join("checkpoint")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn meta_train(&self) -> PathBuf {
        self.root.join("meta-train")
    }

    pub fn meta_checkpoint(&self) -> PathBuf {
        self.meta_train().join("checkpoint")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report(&self, format: ReportFormat) -> PathBuf {
        self.root.join(match format {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
        })
    }

    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join(".done").join(stage.as_str())
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.marker(stage).exists()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunInfo {
    config_hash: String,
    created: String,
    seed: u64,
}

/// Exclusive hold on a run directory; released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} is locked by another pipeline (delete {} if it is stale)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Re-run requested stages even when marked complete.
    pub force: bool,
    /// Pyramid weights for meta-training; defaults to the run's own
    /// pretraining checkpoint when that stage has completed.
    pub pretrained_ckpt: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run_dir: RunDir,
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Run the requested stages in canonical order.
///
/// The configuration is validated before anything touches the disk.
/// Completed stages are skipped unless `force` is set; running a stage
/// invalidates every later stage. A failing stage aborts with
/// [`Error::Stage`].
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    stages: &[Stage],
    out_dir: &Path,
    options: &PipelineOptions,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let run = RunDir::for_config(out_dir, cfg)?;
    fs::create_dir_all(run.root.join(".done")).map_err(|e| Error::io(&run.root, e))?;
    let _lock = RunLock::acquire(&run.root)?;
    let info_path = run.root.join("run.json");
    if !info_path.exists() {
        let info = RunInfo {
            config_hash: cfg.hash()?,
            created: chrono::Utc::now().to_rfc3339(),
            seed: cfg.seed,
        };
        fs::write(&info_path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&info_path, e))?;
        let cfg_path = run.root.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    }

    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut outcome = PipelineOutcome {
        run_dir: run.clone(),
        ran: Vec::new(),
        skipped: Vec::new(),
    };
    for stage in stages {
        if run.is_done(stage) && !options.force {
            log::info!("stage {stage}: already complete, skipping");
            outcome.skipped.push(stage);
            continue;
        }
        log::info!("stage {stage}: running");
        run_stage(stage, cfg, &run, options).map_err(|e| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        })?;
        for later in Stage::ALL.into_iter().filter(|s| *s > stage) {
            let m = run.marker(later);
            if m.exists() {
                fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
            }
        }
        let m = run.marker(stage);
        fs::write(&m, chrono::Utc::now().to_rfc3339()).map_err(|e| Error::io(&m, e))?;
        outcome.ran.push(stage);
    }
    Ok(outcome)
}

fn require(run: &RunDir, stage: Stage, needed: Stage) -> Result<()> {
    if run.is_done(needed) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "stage {stage} needs the output of stage {needed}, which has not completed in {}",
            run.root.display()
        )))
    }
}

fn run_stage(stage: Stage, cfg: &ExperimentConfig, run: &RunDir, options: &PipelineOptions) -> Result<()> {
    match stage {
        Stage::Synth => {
            let dir = run.data();
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            synthesize(cfg, &dir).map(|_| ())
        }
        Stage::Pretrain => {
            require(run, stage, Stage::Synth)?;
            let (base, _) = resolve_datasets(cfg, Some(&run.data()))?;
            pretrain_loop(&base, &cfg.encoders.pyramid, &cfg.pretrain_settings(), &run.pretrain(), None).map(|_| ())
        }
        Stage::Extract => {
            require(run, stage, Stage::Synth)?;
            require(run, stage, Stage::Pretrain)?;
            let (base, novel) = resolve_datasets(cfg, Some(&run.data()))?;
            extract_banks(&run.pretrain_checkpoint(), &base, &novel, &run.embeddings()).map(|_| ())
        }
        Stage::MetaTrain => {
            require(run, stage, Stage::Synth)?;
            let (base, _) = resolve_datasets(cfg, Some(&run.data()))?;
            let pretrained = match &options.pretrained_ckpt {
                Some(p) => Some(p.clone()),
                None if run.is_done(Stage::Pretrain) => Some(run.pretrain_checkpoint()),
                None => None,
            };
            let mut model = build_model(cfg, pretrained.as_deref())?;
            meta_train(&mut model, &base, &cfg.meta_train_settings(), Some(&run.meta_train())).map(|_| ())
        }
        Stage::Evaluate => {
            require(run, stage, Stage::Synth)?;
            require(run, stage, Stage::MetaTrain)?;
            let (_, novel) = resolve_datasets(cfg, Some(&run.data()))?;
            let model = DcpnModel::from_checkpoint(&run.meta_checkpoint(), &Device::Cpu)?;
            let rows = evaluate_model(cfg, &model, &novel, &cfg.eval.k_shots, &run.eval())?;
            report(&rows, &run.eval().join(RESULTS_FILE), ReportFormat::Csv)
        }
        Stage::Report => {
            require(run, stage, Stage::Evaluate)?;
            let rows = read_report(&run.eval().join(RESULTS_FILE), ReportFormat::Csv)?;
            let format = cfg.eval.report_format;
            report(&rows, &run.report(format), format)
        }
    }
}

fn novel_corpus_name(seed: u64) -> String {
    format!("synthetic-{seed}-novel")
}

/// In-memory base and novel datasets for a synthetic configuration.
fn synthetic_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Vec<SyntheticManifest>)> {
    let s = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("data.synthetic", "not a synthetic configuration"))?;
    let size = cfg.data.image_size;
    let (corpus, manifest) = generate_synthetic_corpus(s.n_classes, s.per_class, size, cfg.seed)?;
    if cfg.data.task == DomainKind::Same {
        let (base, novel) = corpus.split_by_fraction(s.base_fraction)?;
        return Ok((base, novel, vec![manifest]));
    }
    let novel_seed = cfg.seed.wrapping_add(NOVEL_SEED_OFFSET);
    let (novel, novel_manifest) = generate_synthetic_corpus(s.n_classes, s.per_class, size, novel_seed)?;
    let novel = Dataset::new(
        novel_corpus_name(cfg.seed),
        Split::Test,
        novel.class_names.clone(),
        size,
        novel.samples().to_vec(),
    )?;
    Ok((corpus, novel, vec![manifest, novel_manifest]))
}

/// Write the task's datasets under `dir` as `base/` and `novel/` image trees.
/// Synthetic corpora also get `manifest.json`; for directory sources only
/// the layout is checked.
pub fn synthesize(cfg: &ExperimentConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    if cfg.data.synthetic.is_none() {
        let (base, novel) = resolve_datasets(cfg, None)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("sources.json");
        fs::write(&path, serde_json::to_string_pretty(&(&cfg.data.base, &cfg.data.novel))?)
            .map_err(|e| Error::io(&path, e))?;
        return Ok((base, novel));
    }
    let (base, novel, manifests) = synthetic_datasets(cfg)?;
    base.write_images(&dir.join("base"))?;
    novel.write_images(&dir.join("novel"))?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifests)?).map_err(|e| Error::io(&path, e))?;
    Ok((base, novel))
}

/// Base and novel datasets of the configured task.
///
/// For synthetic data, `data_dir` points at the output of [`synthesize`];
/// without it the corpus is generated in memory. Directory sources are
/// loaded from their configured roots.
pub fn resolve_datasets(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let size = cfg.data.image_size;
    if cfg.data.synthetic.is_some() {
        return match data_dir {
            None => synthetic_datasets(cfg).map(|(b, n, _)| (b, n)),
            Some(dir) => {
                let base_name = format!("synthetic-{}", cfg.seed);
                let novel_name = if cfg.data.task == DomainKind::Same {
                    base_name.clone()
                } else {
                    novel_corpus_name(cfg.seed)
                };
                let base = DatasetSpec::discover(base_name, dir.join("base"), Split::Train)?;
                let novel = DatasetSpec::discover(novel_name, dir.join("novel"), Split::Test)?;
                Ok((load_dataset(&base, size)?, load_dataset(&novel, size)?))
            }
        };
    }
    let (Some(b), Some(n)) = (&cfg.data.base, &cfg.data.novel) else {
        return Err(Error::config("data", "give either a `synthetic` section or both `base` and `novel`"));
    };
    let base = DatasetSpec::discover(&b.name, &b.root, b.split)?;
    let novel = DatasetSpec::discover(&n.name, &n.root, n.split)?;
    let task = make_domain_task(cfg.data.task, base, novel)?;
    Ok((load_dataset(&task.base, size)?, load_dataset(&task.novel, size)?))
}

/// Fresh model from the configuration, optionally seeded with pretrained
/// pyramid weights.
pub fn build_model(cfg: &ExperimentConfig, pretrained: Option<&Path>) -> Result<DcpnModel> {
    let mut model = DcpnModel::new(&cfg.encoders, cfg.head(), cfg.seed, DType::F32, &Device::Cpu)?;
    if let Some(dir) = pretrained {
        let n = model.load_pretrained_pyramid(&load_checkpoint(dir)?)?;
        log::info!("loaded {n} pretrained pyramid tensors from {}", dir.display());
    }
    Ok(model)
}

/// Run the evaluation protocol once per shot count, writing per-episode logs
/// and metric summaries to `out_dir`. Returns one report row per shot count.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &DcpnModel,
    novel: &Dataset,
    k_shots: &[usize],
    out_dir: &Path,
) -> Result<Vec<ReportRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(k_shots.len());
    for &k in k_shots {
        let settings = cfg.eval_settings(k);
        let m: MetricsReport = evaluate_protocol(model, novel, &settings, Some(&out_dir.join(format!("episodes_k{k}.csv"))))?;
        log::info!("{k}-shot: mean accuracy {:.4} ± {:.4}", m.mean_accuracy, m.ci95);
        let path = out_dir.join(format!("metrics_k{k}.json"));
        fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
        rows.push(ReportRow::new(cfg.data.task.as_str(), settings.n_way, k, &model.head, &m));
    }
    Ok(rows)
}

/// Global-channel feature banks of both datasets plus their distance.
pub fn extract_banks(ckpt: &Path, base: &Dataset, novel: &Dataset, out_dir: &Path) -> Result<f64> {
    let b = extract_embeddings(ckpt, base, Channel::Global)?;
    let n = extract_embeddings(ckpt, novel, Channel::Global)?;
    b.save(&out_dir.join("base_global"))?;
    n.save(&out_dir.join("novel_global"))?;
    let d = dataset_distance(&b.to_f64_rows(), &n.to_f64_rows())?;
    let path = out_dir.join("distance.json");
    let record = BTreeMap::from([("global", d)]);
    fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(d)
}
