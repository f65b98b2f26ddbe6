//! Metrics and the meta-test protocol: an untrained model on the separable
//! corpus, the same model on label-shuffled data, and a results table.
//!
//! cargo run --example evaluation -- [n_tasks] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device};
use dcpn::data::generate_synthetic_corpus;
use dcpn::encoders::DualEncoderConfig;
use dcpn::eval::{auc, confusion, evaluate_protocol, metrics, report, EvalSettings, ReportFormat, ReportRow};
use dcpn::fewshot::{DcpnModel, HeadConfig};

fn main() -> dcpn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_tasks = args.first().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let out = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dcpn-evaluation"));

    let counts = confusion(&[0, 0, 1, 2, 2, 2], &[0, 1, 1, 2, 2, 0], 3)?;
    let m = metrics(&counts);
    println!(
        "toy predictions: accuracy {:.3}, macro precision {:.3}, recall {:.3}, F1 {:.3}",
        m.accuracy, m.precision, m.recall, m.f1
    );
    let probs = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.6, 0.4], vec![0.2, 0.8]];
    println!("toy AUC: {:.3}", auc(&probs, &[0, 1, 1, 1])?);

    let (corpus, _) = generate_synthetic_corpus(5, 100, 32, 0)?;
    let (base, novel) = corpus.split_by_fraction(0.7)?;
    let mut model = DcpnModel::new(&DualEncoderConfig::tiny(), HeadConfig::default(), 0, DType::F32, &Device::Cpu)?;
    model.refresh_projector(&base, 256, 0)?;
    let settings = EvalSettings {
        n_tasks,
        ..EvalSettings::protocol(5, 1, 11)
    };

    let t = Instant::now();
    let r = evaluate_protocol(&model, &novel, &settings, Some(&out.join("episodes.csv")))?;
    println!(
        "untrained, {} episodes ({} queries) in {:.1}s: mean accuracy {:.4} ± {:.4}, F1 {:.3}, AUC {:.3}",
        r.n_episodes,
        r.n_queries,
        t.elapsed().as_secs_f64(),
        r.mean_accuracy,
        r.ci95,
        r.f1,
        r.auc
    );
    let again = evaluate_protocol(&model, &novel, &settings, None)?;
    println!("same seed reproduces the report: {}", again == r);

    let shuffled = novel.with_shuffled_labels(5)?;
    let s = evaluate_protocol(&model, &shuffled, &settings, None)?;
    println!("label-shuffled novel set: mean accuracy {:.4} ± {:.4} (chance 0.2)", s.mean_accuracy, s.ci95);

    let rows = vec![
        ReportRow::new("same", 5, 1, &model.head, &r),
        ReportRow::new("shuffled", 5, 1, &model.head, &s),
    ];
    let path = out.join("results.csv");
    report(&rows, &path, ReportFormat::Csv)?;
    println!("{}", std::fs::read_to_string(&path).map_err(|e| dcpn::Error::io(&path, e))?);
    Ok(())
}
