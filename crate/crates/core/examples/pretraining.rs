//! Masked-autoencoder pretraining of the tiny pyramid encoder: first a
//! single-image overfit, then the desk schedule on the synthetic corpus.
//!
//! cargo run --example pretraining -- [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device};
use candle_nn::VarMap;
use dcpn::data::generate_synthetic_corpus;
use dcpn::encoders::PyramidEncoderConfig;
use dcpn::nn::{AdamSettings, AdamW, ParamBuilder};
use dcpn::pretrain::{pretrain_loop, sample_plans, DecoderConfig, LossScope, MaskedAutoencoder, PretrainSettings};
use dcpn::seeding::rng_from_seed;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn main() -> dcpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dcpn-pretraining"));
    let enc = PyramidEncoderConfig::tiny();

    // One 64 px image, fresh masks every step.
    let (corpus, _) = generate_synthetic_corpus(5, 2, 64, 0)?;
    let image = corpus.batch(&[0], DType::F32, &Device::Cpu)?;
    let varmap = VarMap::new();
    let model = MaskedAutoencoder::new(&ParamBuilder::new(&varmap, 0, DType::F32, &Device::Cpu), &enc, &DecoderConfig::tiny())?;
    let mut opt = AdamW::new(&varmap, AdamSettings { weight_decay: 0.0, ..AdamSettings::pretrain() })?;
    let mut rng = rng_from_seed(0);
    let mut losses = Vec::new();
    let t = Instant::now();
    for _ in 0..300 {
        let plans = sample_plans(1, 4, 4, 0.25, &mut rng)?;
        let (_, loss) = model.forward_loss(&image, &plans, LossScope::Missing)?;
        losses.push(loss.to_scalar::<f32>()? as f64);
        opt.backward_step(&loss)?;
    }
    println!(
        "single-image overfit: loss {:.5} -> {:.5} ({:.1}% of initial) in {:.1}s",
        losses[0],
        mean(&losses[280..]),
        100.0 * mean(&losses[280..]) / losses[0],
        t.elapsed().as_secs_f64()
    );

    let (corpus, _) = generate_synthetic_corpus(5, 100, 32, 0)?;
    let settings = PretrainSettings::desk();
    let t = Instant::now();
    let report = pretrain_loop(&corpus, &enc, &settings, &out, None)?;
    let l = report.losses();
    println!(
        "desk schedule: {} steps in {:.1}s; mean loss steps 1-20 {:.5}, steps {}-{} {:.5} (ratio {:.3})",
        l.len(),
        t.elapsed().as_secs_f64(),
        mean(&l[..20]),
        l.len() - 19,
        l.len(),
        mean(&l[l.len() - 20..]),
        mean(&l[l.len() - 20..]) / mean(&l[..20])
    );
    println!("checkpoint: {}", report.checkpoint.display());
    println!("reconstruction strips: {}", out.join("recon").display());
    Ok(())
}
