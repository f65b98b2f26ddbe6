//! Scale and metric ablations: the same short meta-training schedule with
//! each head configuration, evaluated on held-out samples.
//!
//! cargo run --example ablations -- [epochs] [episodes_per_epoch] [n_tasks]

use candle_core::{DType, Device};
use dcpn::data::generate_synthetic_corpus;
use dcpn::encoders::DualEncoderConfig;
use dcpn::eval::{evaluate_protocol, report, EvalSettings, ReportFormat, ReportRow};
use dcpn::fewshot::{ablation_config, meta_train, DcpnModel, MetaTrainSettings, Metric, Scale};

fn main() -> dcpn::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut settings = MetaTrainSettings::desk();
    settings.epochs = args.first().copied().unwrap_or(2);
    settings.episodes_per_epoch = args.get(1).copied().unwrap_or(20);
    let n_tasks = args.get(2).copied().unwrap_or(200);

    // A harder corpus than the other examples: more classes, smaller images.
    let (corpus, _) = generate_synthetic_corpus(10, 60, 32, 4)?;
    let (base, novel) = corpus.split_by_fraction(0.5)?;
    let eval = EvalSettings {
        n_tasks,
        ..EvalSettings::protocol(5, 1, 9)
    };

    let rows_spec: Vec<(&str, Vec<Scale>, Metric)> = vec![
        ("global", vec![Scale::Global], Metric::Euclidean),
        ("local", vec![Scale::Local], Metric::Euclidean),
        ("mix", vec![Scale::Mix], Metric::Euclidean),
        ("multi-scale", Scale::ALL.to_vec(), Metric::Euclidean),
        ("multi-scale cosine", Scale::ALL.to_vec(), Metric::Cosine),
    ];
    let mut rows = Vec::new();
    for (label, scales, metric) in rows_spec {
        let head = ablation_config(&scales, metric, false)?;
        let mut model = DcpnModel::new(&DualEncoderConfig::tiny(), head, 0, DType::F32, &Device::Cpu)?;
        meta_train(&mut model, &base, &settings, None)?;
        let r = evaluate_protocol(&model, &novel, &eval, None)?;
        println!("{label:>20}: {:.4} ± {:.4}", r.mean_accuracy, r.ci95);
        rows.push(ReportRow::new("same", 5, 1, &model.head, &r));
    }
    let path = std::env::temp_dir().join("dcpn-ablations.csv");
    report(&rows, &path, ReportFormat::Csv)?;
    println!("table written to {}", path.display());
    Ok(())
}
