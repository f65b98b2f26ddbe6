//! The full staged pipeline on the desk configuration, run twice to show
//! that completed stages are skipped.
//!
//! cargo run --release --example pipeline -- [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use dcpn::config::ExperimentConfig;
use dcpn::pipeline::{run_pipeline, PipelineOptions, Stage};

fn main() -> dcpn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dcpn-pipeline"));
    let cfg = ExperimentConfig::desk();

    let t = Instant::now();
    let first = run_pipeline(&cfg, &Stage::ALL, &out, &PipelineOptions::default())?;
    println!("ran {:?} in {:.1}s", first.ran, t.elapsed().as_secs_f64());
    let second = run_pipeline(&cfg, &Stage::ALL, &out, &PipelineOptions::default())?;
    println!("second run skipped {:?}", second.skipped);

    let report = first.run_dir.report(cfg.eval.report_format);
    println!("{}", std::fs::read_to_string(&report).map_err(|e| dcpn::Error::io(&report, e))?);
    Ok(())
}
