//! Episodic meta-training of the dual-channel model on the synthetic corpus,
//! followed by meta-testing on held-out samples.
//!
//! cargo run --example meta_training -- [epochs] [episodes_per_epoch]

use std::time::Instant;

use candle_core::{DType, Device};
use dcpn::data::{generate_synthetic_corpus, nearest_centroid_accuracy};
use dcpn::encoders::DualEncoderConfig;
use dcpn::eval::{evaluate_protocol, EvalSettings};
use dcpn::fewshot::{meta_train, DcpnModel, HeadConfig, MetaTrainSettings};

fn main() -> dcpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (corpus, _) = generate_synthetic_corpus(5, 100, 32, 0)?;
    let (base, novel) = corpus.split_by_fraction(0.7)?;
    println!("nearest-centroid accuracy on raw pixels: {:.3}", nearest_centroid_accuracy(&base, &novel));

    let mut model = DcpnModel::new(&DualEncoderConfig::tiny(), HeadConfig::default(), 0, DType::F32, &Device::Cpu)?;
    let eval = EvalSettings { n_tasks: 100, ..EvalSettings::protocol(5, 1, 7) };
    model.refresh_projector(&base, 256, 0)?;
    let before = evaluate_protocol(&model, &novel, &eval, None)?;
    println!("untrained: {:.3} ± {:.3}", before.mean_accuracy, before.ci95);

    let mut settings = MetaTrainSettings::desk();
    if let Some(&e) = args.first() {
        settings.epochs = e;
    }
    if let Some(&e) = args.get(1) {
        settings.episodes_per_epoch = e;
    }
    let t = Instant::now();
    let report = meta_train(&mut model, &base, &settings, None)?;
    for (epoch, (loss, acc)) in report.epoch_means().iter().enumerate() {
        println!("epoch {epoch:2}: loss {loss:.4}  acc {acc:.3}");
    }
    println!("meta-training took {:.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let after = evaluate_protocol(&model, &novel, &eval, None)?;
    println!(
        "meta-test over {} episodes: {:.3} ± {:.3} (F1 {:.3}, AUC {:.3}) in {:.1}s",
        after.n_episodes,
        after.mean_accuracy,
        after.ci95,
        after.f1,
        after.auc,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
