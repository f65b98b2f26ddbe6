use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcpn::cache::{extract_embeddings, Channel};
use dcpn::config::ExperimentConfig;
use dcpn::data::{load_dataset, DatasetSpec, DomainKind, Split};
use dcpn::eval::{read_report, report, ReportFormat, ReportRow};
use dcpn::fewshot::{meta_train, parse_scales, DcpnModel, Metric};
use dcpn::pipeline::{build_model, evaluate_model, parse_stages, resolve_datasets, run_pipeline, synthesize, PipelineOptions};
use dcpn::pretrain::{pretrain_loop, LossScope};
use dcpn::{Error, Result};

#[derive(Parser)]
#[command(name = "dcpn", version, about = "Dual-channel prototype networks for few-shot image classification")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment configuration (TOML). Defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for outputs.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Overwrite existing outputs and re-run completed stages.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task's base and novel datasets as image trees under --out-dir.
    Synth,
    /// Masked-autoencoder pretraining of the pyramid encoder.
    Pretrain {
        /// Class-per-directory image tree (default: the configured base dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the loss log, checkpoint and reconstructions.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        loss_scope: Option<LossScope>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Embed a dataset with one channel of a checkpoint.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class-per-directory image tree (default: the configured dataset given by --split).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "novel")]
        split: String,
        #[arg(long, default_value = "global")]
        channel: Channel,
        /// Output stem; `.bin` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic meta-training on the base dataset.
    MetaTrain {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        k_shot: Option<usize>,
        /// Comma-separated subset of global,local,mix.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        pretrained_ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory (default: <out-dir>/meta-train).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a meta-trained checkpoint on the novel dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Shot counts to evaluate (repeatable; default from the config).
        #[arg(long)]
        k_shot: Vec<usize>,
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Merge result tables into one report.
    Report {
        /// Result files written by `evaluate`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// csv or json (default: from the output extension).
        #[arg(long)]
        format: Option<ReportFormat>,
    },
    /// Run stages end to end inside a config-hashed run directory.
    Pipeline {
        /// Comma-separated stages or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
        #[arg(long)]
        pretrained_ckpt: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    task: Option<DomainKind>,
    #[arg(long)]
    n_way: Option<usize>,
    /// Output of `synth` to read the datasets from.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl TaskArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(t) = self.task {
            cfg.data.task = t;
        }
        if let Some(n) = self.n_way {
            cfg.fewshot.n_way = n;
        }
    }
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn load_tree(root: &Path, split: Split, size: usize) -> Result<dcpn::data::Dataset> {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    load_dataset(&DatasetSpec::discover(name, root, split)?, size)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    match cli.command {
        Command::Synth => {
            cfg.validate()?;
            guard_output(&g.out_dir.join("base"), g.force)?;
            let (base, novel) = synthesize(&cfg, &g.out_dir)?;
            println!("base: {} images, novel: {} images under {}", base.len(), novel.len(), g.out_dir.display());
        }
        Command::Pretrain {
            data,
            out,
            resume,
            loss_scope,
            max_steps,
        } => {
            if let Some(s) = loss_scope {
                cfg.pretrain.loss_scope = s;
            }
            if max_steps.is_some() {
                cfg.pretrain.max_steps = max_steps;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| g.out_dir.join("pretrain"));
            if resume.is_none() {
                guard_output(&out.join("checkpoint"), g.force)?;
            }
            let dataset = match data {
                Some(dir) => load_tree(&dir, Split::Train, cfg.data.image_size)?,
                None => resolve_datasets(&cfg, None)?.0,
            };
            let r = pretrain_loop(&dataset, &cfg.encoders.pyramid, &cfg.pretrain_settings(), &out, resume.as_deref())?;
            let losses = r.losses();
            println!(
                "{} steps, final loss {:.5}, checkpoint {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                r.checkpoint.display()
            );
        }
        Command::Extract {
            ckpt,
            data,
            split,
            channel,
            out,
        } => {
            cfg.validate()?;
            guard_output(&out.with_extension("bin"), g.force)?;
            let dataset = match data {
                Some(dir) => load_tree(&dir, Split::Test, cfg.data.image_size)?,
                None => {
                    let (b, n) = resolve_datasets(&cfg, None)?;
                    match split.as_str() {
                        "base" => b,
                        "novel" => n,
                        o => return Err(Error::InvalidArgument(format!("unknown split `{o}` (base, novel)"))),
                    }
                }
            };
            let cache = extract_embeddings(&ckpt, &dataset, channel)?;
            cache.save(&out)?;
            println!("{}x{} features written to {}", cache.rows(), cache.dim(), out.with_extension("bin").display());
        }
        Command::MetaTrain {
            task,
            k_shot,
            scales,
            metric,
            pretrained_ckpt,
            epochs,
            out,
        } => {
            task.apply(&mut cfg);
            if let Some(k) = k_shot {
                cfg.fewshot.k_shot = k;
            }
            if let Some(s) = scales {
                cfg.fewshot.scales = parse_scales(&s).map_err(|e| Error::config("fewshot.scales", e.to_string()))?;
            }
            if let Some(m) = metric {
                cfg.fewshot.metric = m;
            }
            if let Some(e) = epochs {
                cfg.fewshot.epochs = e;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| g.out_dir.join("meta-train"));
            guard_output(&out.join("checkpoint"), g.force)?;
            let (base, _) = resolve_datasets(&cfg, task.data.as_deref())?;
            let mut model = build_model(&cfg, pretrained_ckpt.as_deref())?;
            let r = meta_train(&mut model, &base, &cfg.meta_train_settings(), Some(&out))?;
            if let Some((loss, acc)) = r.epoch_means().last() {
                println!("last epoch: loss {loss:.4}, accuracy {acc:.3}");
            }
            if let Some(c) = r.checkpoint {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Evaluate {
            ckpt,
            task,
            k_shot,
            n_tasks,
            q,
            out,
        } => {
            task.apply(&mut cfg);
            if !k_shot.is_empty() {
                cfg.eval.k_shots = k_shot;
            }
            if let Some(n) = n_tasks {
                cfg.eval.n_tasks = n;
            }
            if let Some(q) = q {
                cfg.eval.q_queries = q;
            }
            cfg.validate()?;
            guard_output(&out, g.force)?;
            let model = DcpnModel::from_checkpoint(&ckpt, &candle_core::Device::Cpu)?;
            let (_, novel) = resolve_datasets(&cfg, task.data.as_deref())?;
            let log_dir = out.parent().map(Path::to_path_buf).unwrap_or_default().join("episodes");
            let rows = evaluate_model(&cfg, &model, &novel, &cfg.eval.k_shots, &log_dir)?;
            report(&rows, &out, ReportFormat::for_path(&out))?;
            for r in &rows {
                println!("{}-way {}-shot: {:.4} ± {:.4}", r.n_way, r.k_shot, r.mean_acc, r.ci95);
            }
        }
        Command::Report { inputs, out, format } => {
            guard_output(&out, g.force)?;
            let mut rows: Vec<ReportRow> = Vec::new();
            for path in &inputs {
                rows.extend(read_report(path, ReportFormat::for_path(path))?);
            }
            report(&rows, &out, format.unwrap_or_else(|| ReportFormat::for_path(&out)))?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::Pipeline { stages, pretrained_ckpt } => {
            let stages = parse_stages(&stages)?;
            let options = PipelineOptions {
                force: g.force,
                pretrained_ckpt,
            };
            let outcome = run_pipeline(&cfg, &stages, &g.out_dir, &options)?;
            let names = |s: &[dcpn::pipeline::Stage]| s.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(", ");
            println!("run directory: {}", outcome.run_dir.root.display());
            if !outcome.ran.is_empty() {
                println!("ran: {}", names(&outcome.ran));
            }
            if !outcome.skipped.is_empty() {
                println!("already complete: {}", names(&outcome.skipped));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
