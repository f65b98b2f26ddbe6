//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) so every line is printed even when an earlier
//! criterion fails; the process exits non-zero if any criterion fails.
//!
//! The full-scale directional check (12) needs real datasets and is skipped
//! unless `DCPN_FULL_SCALE_CONFIG` names an experiment config whose data
//! section points at them.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use dcpn::config::ExperimentConfig;
use dcpn::data::nearest_centroid_accuracy;
use dcpn::encoders::DualEncoderConfig;
use dcpn::eval::{auc, confusion, evaluate_protocol, metrics, read_report, EvalSettings, ReportFormat};
use dcpn::fewshot::{
    averaging_matrix, compute_prototypes, fit_channel, fit_pca, meta_train, mix_tensors, nll_tensor, score_queries,
    score_tensors, DcpnModel, HeadConfig, Metric, MultiScaleFeature, PcaProjector, Scale,
};
use dcpn::nn::optim::is_buffer;
use dcpn::nn::sorted_vars;
use dcpn::pipeline::{build_model, parse_stages, resolve_datasets, run_pipeline, PipelineOptions, RunDir};
use dcpn::pretrain::{mae_loss, pixel_shuffle_upsample, pixel_unshuffle, pretrain_loop, uniform_sample_mask, ReconTarget};
use dcpn::seeding::rng_from_seed;
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

fn mask_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(1);
    for _ in 0..10_000 {
        let gh = 2 * rng.random_range(1..=14usize);
        let gw = 2 * rng.random_range(1..=14usize);
        let plan = uniform_sample_mask(gh, gw, &mut rng).map_err(|e| e.to_string())?;
        ensure!(plan.kept.len() * 4 == gh * gw, "{gh}x{gw}: kept {}", plan.kept.len());
        let mut seen = vec![0u8; gh * gw / 4];
        for &k in &plan.kept {
            let (r, c) = plan.cell_of(k);
            seen[r * gw / 2 + c] += 1;
        }
        ensure!(seen.iter().all(|&n| n == 1), "{gh}x{gw}: a cell is not kept exactly once");
    }
    let (gh, gw) = (8, 8);
    let mut freq = vec![[0usize; 4]; 16];
    for _ in 0..10_000 {
        let plan = uniform_sample_mask(gh, gw, &mut rng).map_err(|e| e.to_string())?;
        for (cell, &k) in plan.kept.iter().enumerate() {
            freq[cell][(k / gw % 2) * 2 + k % 2] += 1;
        }
    }
    let worst = freq.iter().flatten().map(|&n| (n as f64 / 10_000.0 - 0.25).abs()).fold(0.0, f64::max);
    ensure!(worst <= 0.02, "position frequency off by {worst}");
    within(Duration::from_secs(60), start)?;
    Ok(format!("10000 grids; worst |freq - 0.25| = {worst:.4}"))
}

fn reconstruction_loss() -> Outcome {
    let l = |t: Vec<f64>, p: Vec<f64>| mae_loss(&ReconTarget::new(t, p).unwrap()).unwrap();
    ensure!(l(vec![0.2, 0.7], vec![0.2, 0.7]) == 0.0, "identical reconstruction");
    ensure!(l(vec![0.0; 3], vec![1.0; 3]) == 1.0, "unit error");
    ensure!(l(vec![0.0, 0.0], vec![1.0, 3.0]) == 5.0, "errors (1, 3)");
    let mut rng = rng_from_seed(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(1..200);
        let lambda: f64 = rng.random_range(-10.0..10.0);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = l(t.clone(), t.iter().zip(&e).map(|(a, b)| a + b).collect());
        let scaled = l(t.clone(), t.iter().zip(&e).map(|(a, b)| a + lambda * b).collect());
        worst = worst.max((scaled - lambda * lambda * base).abs());
    }
    ensure!(worst <= 1e-9, "scale property off by {worst:e}");
    Ok(format!("hand cases exact; max |loss(λe) - λ²loss(e)| = {worst:.1e}"))
}

fn pixel_shuffle() -> Outcome {
    let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 2)).unwrap();
    let y = pixel_shuffle_upsample(&x, 2).map_err(|e| e.to_string())?;
    let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let want = [0., 4., 1., 5., 8., 12., 9., 13., 2., 6., 3., 7., 10., 14., 11., 15.];
    ensure!(got == want, "r=2 layout {got:?}");
    let mut rng = rng_from_seed(3);
    for _ in 0..100 {
        let (c, r, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let data: Vec<f32> = (0..c * r * r * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data.clone(), (1, c * r * r, h, w), &Device::Cpu).unwrap();
        let back = pixel_unshuffle(&pixel_shuffle_upsample(&x, r).unwrap(), r).unwrap();
        ensure!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap() == data, "round trip (c={c}, r={r})");
    }
    Ok("enumerated r=2 exact; 100 random round trips exact".into())
}

fn random_feature(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> MultiScaleFeature {
    MultiScaleFeature {
        z_g: random_vec(rng, d),
        z_l: random_vec(rng, d),
        z_mix: random_vec(rng, d),
    }
}

fn head_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(1..=10);
        let d = rng.random_range(1..=32);
        let cfg = HeadConfig {
            metric: if rng.random_bool(0.5) { Metric::Euclidean } else { Metric::Cosine },
            temperature: rng.random_range(0.5..2.0),
            ..HeadConfig::default()
        };
        let mut labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        labels.shuffle(&mut rng);
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, d)).collect();
        let queries: Vec<_> = (0..5).map(|_| random_feature(&mut rng, d)).collect();
        let protos = naive_prototypes(&support, &labels, n);
        let mp = compute_prototypes(&support, &labels).map_err(|e| e.to_string())?;
        for (q, r) in queries.iter().zip(score_queries(&queries, &mp, &cfg).map_err(|e| e.to_string())?) {
            let want = naive_score(q, &protos, &cfg);
            for c in 0..n {
                for (a, b) in r.distances[c].iter().zip(&want.distances[c]) {
                    worst = worst.max(rel_err(*a, *b));
                }
                worst = worst.max(rel_err(r.confidence[c], want.alpha[c]));
                worst = worst.max(rel_err(r.probs[c], want.probs[c]));
            }
            ensure!(r.predicted == want.predicted, "prediction differs");
        }
    }
    ensure!(worst <= 1e-6, "max relative error {worst:e}");
    let f = |v: f64| MultiScaleFeature {
        z_g: vec![v],
        z_l: vec![v],
        z_mix: vec![v],
    };
    let mp = compute_prototypes(&[f(0.0), f(1.0)], &[0, 1]).unwrap();
    let p = score_queries(&[f(0.0)], &mp, &HeadConfig::default()).unwrap()[0].probs[0];
    ensure!((p - 0.8695).abs() <= 1e-4, "hand case p(A) = {p}");
    within(Duration::from_secs(60), start)?;
    Ok(format!("200 episodes, max relative error {worst:.1e}; hand case p(A) = {p:.4}"))
}

fn episode_loss_from(zg: &Tensor, zl: &Tensor, ns: usize, ls: &[usize], lq: &[usize], proj: &PcaProjector) -> Tensor {
    let mix = mix_tensors(zg, zl, proj).unwrap();
    let avg = averaging_matrix(ls, DType::F64, &Device::Cpu).unwrap();
    let (mut qs, mut ps) = (Vec::new(), Vec::new());
    for f in [zg, zl, &mix] {
        ps.push(avg.matmul(&f.narrow(0, 0, ns).unwrap()).unwrap());
        qs.push(f.narrow(0, ns, lq.len()).unwrap());
    }
    nll_tensor(&score_tensors(&qs, &ps, &HeadConfig::default()).unwrap().log_probs, lq).unwrap()
}

fn feature_gradients() -> Result<f64, String> {
    let (d, n, k, q) = (8, 3, 2, 3);
    let mut rng = rng_from_seed(5);
    let dev = Device::Cpu;
    let ls: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let lq: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    let rows = n * (k + q);
    let bank_g: Vec<Vec<f64>> = (0..40).map(|_| random_vec(&mut rng, d)).collect();
    let bank_l: Vec<Vec<f64>> = (0..40).map(|_| random_vec(&mut rng, d)).collect();
    let proj = fit_pca(&bank_g, &bank_l, d / 2, "acceptance").map_err(|e| e.to_string())?;
    let g0: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l0: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zg = Var::from_tensor(&Tensor::from_vec(g0.clone(), (rows, d), &dev).unwrap()).unwrap();
    let zl = Var::from_tensor(&Tensor::from_vec(l0.clone(), (rows, d), &dev).unwrap()).unwrap();
    let grads = episode_loss_from(zg.as_tensor(), zl.as_tensor(), n * k, &ls, &lq, &proj).backward().unwrap();
    let analytic = [
        grads.get(zg.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        grads.get(zl.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
    ];
    let eval = |g: &[f64], l: &[f64]| {
        let g = Tensor::from_slice(g, (rows, d), &dev).unwrap();
        let l = Tensor::from_slice(l, (rows, d), &dev).unwrap();
        episode_loss_from(&g, &l, n * k, &ls, &lq, &proj).to_scalar::<f64>().unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..rows * d {
        for which in 0..2 {
            let (mut gp, mut lp, mut gm, mut lm) = (g0.clone(), l0.clone(), g0.clone(), l0.clone());
            if which == 0 {
                gp[i] += h;
                gm[i] -= h;
            } else {
                lp[i] += h;
                lm[i] -= h;
            }
            let numeric = (eval(&gp, &lp) - eval(&gm, &lm)) / (2.0 * h);
            let a = analytic[which][i];
            let e = if a.abs().max(numeric.abs()) < 1e-7 { (a - numeric).abs() } else { rel_err(a, numeric) };
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Worst relative error over three random directions in parameter space.
fn parameter_gradients() -> Result<f64, String> {
    let (ds, _) = dcpn::data::generate_synthetic_corpus(3, 30, 32, 7).map_err(|e| e.to_string())?;
    let mut model =
        DcpnModel::new(&DualEncoderConfig::tiny(), HeadConfig::default(), 5, DType::F64, &Device::Cpu).map_err(|e| e.to_string())?;
    model.refresh_projector(&ds, 90, 0).map_err(|e| e.to_string())?;
    let support = ds.batch(&[0, 1, 30, 31, 60, 61], DType::F64, &Device::Cpu).unwrap();
    let query = ds.batch(&[2, 3, 32, 33, 62, 63], DType::F64, &Device::Cpu).unwrap();
    let loss_of = || {
        let s = model.episode_scores(&support, &[0, 0, 1, 1, 2, 2], &query, false).unwrap();
        nll_tensor(&s.log_probs, &[0, 0, 1, 1, 2, 2]).unwrap()
    };
    let vars: Vec<_> = sorted_vars(model.varmap()).into_iter().filter(|(n, _)| !is_buffer(n)).collect();
    let grads = loss_of().backward().unwrap();
    let originals: Vec<Tensor> = vars.iter().map(|(_, v)| v.as_tensor().copy().unwrap()).collect();
    let mut rng = rng_from_seed(6);
    let h = 1e-7;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let mut analytic = 0.0;
        let mut dirs = Vec::new();
        for (_, v) in &vars {
            let dir: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Some(g) = grads.get(v.as_tensor()) {
                analytic += g.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
            }
            dirs.push(Tensor::from_vec(dir, v.shape(), &Device::Cpu).unwrap());
        }
        let at = |s: f64| {
            for (((_, v), o), d) in vars.iter().zip(&originals).zip(&dirs) {
                v.set(&(o + (d * s).unwrap()).unwrap()).unwrap();
            }
            loss_of().to_scalar::<f64>().unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        at(0.0);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}

fn gradient_check() -> Outcome {
    let f = feature_gradients()?;
    ensure!(f <= 1e-4, "feature gradient relative error {f:e}");
    let p = parameter_gradients()?;
    ensure!(p <= 1e-3, "encoder parameter gradient relative error {p:e}");
    Ok(format!("features {f:.1e} (D=8, N=3, K=2); tiny encoder parameters {p:.1e}"))
}

fn pca() -> Outcome {
    let line: Vec<Vec<f64>> = (0..25).map(|i| vec![0.1 * i as f64 + 0.5; 2]).collect();
    let p = fit_channel(&line, 1).map_err(|e| e.to_string())?;
    let s = 1.0 / 2f64.sqrt();
    let line_err = (p.components[0][0] - s).abs().max((p.components[0][1] - s).abs());
    ensure!(line_err <= 1e-6, "line component off by {line_err:e}");
    let mut rng = rng_from_seed(8);
    let (m, d, k) = (80, 16, 8);
    let bank: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64)).collect()).collect();
    let p = fit_channel(&bank, k).map_err(|e| e.to_string())?;
    let mut ortho: f64 = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(x, y)| x * y).sum();
            ortho = ortho.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure!(ortho <= 1e-6, "orthonormality off by {ortho:e}");
    let mut err = 0.0;
    for row in &bank {
        let back = p.reconstruct(&p.project(row).unwrap());
        err += row.iter().zip(&back).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    let discarded: f64 = jacobi_eigenvalues(covariance(&bank))[k..].iter().sum();
    let recon = (err / (m - 1) as f64 - discarded).abs() / discarded;
    ensure!(recon <= 1e-6, "reconstruction error vs discarded eigenvalues: {recon:e}");
    Ok(format!("line {line_err:.1e}; orthonormality {ortho:.1e}; reconstruction {recon:.1e} (relative)"))
}

fn metric_oracles() -> Outcome {
    let mut rng = rng_from_seed(9);
    for set in 0..50 {
        let n = rng.random_range(2..=7);
        let q = rng.random_range(2..=75);
        let labels: Vec<usize> = (0..q).map(|i| if i < 2 { i } else { rng.random_range(0..n) }).collect();
        let preds: Vec<usize> = (0..q).map(|_| rng.random_range(0..n)).collect();
        let m = metrics(&confusion(&preds, &labels, n).map_err(|e| e.to_string())?);
        let want = brute_metrics(&preds, &labels, n);
        ensure!((m.accuracy, m.precision, m.recall, m.f1) == want, "set {set}: metrics differ");
        let probs: Vec<Vec<f64>> = (0..q)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1..6) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        ensure!(auc(&probs, &labels).map_err(|e| e.to_string())? == brute_auc(&probs, &labels), "set {set}: AUC differs");
    }
    let m = metrics(&confusion(&[0, 1, 1, 2, 2, 0], &[0, 0, 1, 1, 2, 2], 3).unwrap());
    ensure!(m.precision == m.recall && m.f1 == m.precision, "F1 identity: {m:?}");
    Ok("50 random sets exact; F1 = p when precision = recall".into())
}

fn degeneracy() -> Outcome {
    let mut rng = rng_from_seed(10);
    let cfg = HeadConfig {
        scales: vec![Scale::Local],
        ..HeadConfig::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(1..=5);
        let d = rng.random_range(2..=32);
        let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, d)).collect();
        let q = random_feature(&mut rng, d);
        let mp = compute_prototypes(&support, &labels).map_err(|e| e.to_string())?;
        let r = score_queries(std::slice::from_ref(&q), &mp, &cfg).map_err(|e| e.to_string())?.remove(0);
        let z_l: Vec<Vec<f64>> = support.iter().map(|f| f.z_l.clone()).collect();
        let (probs, classic) = protonet_reference(&z_l, &labels, n, &q.z_l);
        for (a, b) in r.probs.iter().zip(&probs) {
            worst = worst.max((a - b).abs());
        }
        let best = (0..n).fold(0, |b, c| if classic[c] > classic[b] { c } else { b });
        ensure!(r.predicted == best, "prediction differs from the prototypical network");
    }
    ensure!(worst <= 1e-12, "probabilities differ by {worst:e}");
    Ok(format!("200 episodes, max |Δp| = {worst:.1e}"))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pretraining_regression() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::desk();
    let (base, _) = resolve_datasets(&cfg, None).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let settings = dcpn::pretrain::PretrainSettings {
        dump_reconstructions: 0,
        ..cfg.pretrain_settings()
    };
    let r = pretrain_loop(&base, &cfg.encoders.pyramid, &settings, tmp.path(), None).map_err(|e| e.to_string())?;
    let l = r.losses();
    ensure!(l.len() == 200, "{} steps", l.len());
    let (first, last) = (mean(&l[..20]), mean(&l[180..]));
    ensure!(last <= 0.5 * first, "steps 181-200 mean {last:.5} vs steps 1-20 mean {first:.5}");
    within(Duration::from_secs(600), start)?;
    Ok(format!(
        "mean loss {first:.5} -> {last:.5} (ratio {:.3}) in {:.0}s",
        last / first,
        start.elapsed().as_secs_f64()
    ))
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::desk();
    cfg.fewshot.epochs = 5;
    let (base, novel) = resolve_datasets(&cfg, None).map_err(|e| e.to_string())?;
    let nc = nearest_centroid_accuracy(&base, &novel);
    ensure!(nc > 0.85, "nearest-centroid oracle {nc:.3} does not exceed 0.85");
    let mut model = build_model(&cfg, None).map_err(|e| e.to_string())?;
    meta_train(&mut model, &base, &cfg.meta_train_settings(), None).map_err(|e| e.to_string())?;
    let settings = EvalSettings {
        n_tasks: 100,
        ..cfg.eval_settings(1)
    };
    let m = evaluate_protocol(&model, &novel, &settings, None).map_err(|e| e.to_string())?;
    ensure!(m.mean_accuracy >= 0.90, "5-way 1-shot accuracy {:.3}", m.mean_accuracy);
    within(Duration::from_secs(900), start)?;
    Ok(format!(
        "nearest centroid {nc:.3}; 5-way 1-shot after {} epochs {:.3} ± {:.3} over 100 episodes in {:.0}s",
        cfg.fewshot.epochs,
        m.mean_accuracy,
        m.ci95,
        start.elapsed().as_secs_f64()
    ))
}

fn protocol_determinism() -> Outcome {
    let cfg = ExperimentConfig::desk();
    let (base, novel) = resolve_datasets(&cfg, None).map_err(|e| e.to_string())?;
    let mut model = build_model(&cfg, None).map_err(|e| e.to_string())?;
    model.refresh_projector(&base, cfg.fewshot.bank_size, 0).map_err(|e| e.to_string())?;
    let settings = cfg.eval_settings(1);
    ensure!(settings.n_tasks == 1000, "{} tasks", settings.n_tasks);
    let start = Instant::now();
    let a = evaluate_protocol(&model, &novel, &settings, None).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let b = evaluate_protocol(&model, &novel, &settings, None).map_err(|e| e.to_string())?;
    ensure!(a == b, "two runs differ");
    ensure!(a.mean_accuracy.to_bits() == b.mean_accuracy.to_bits(), "accuracy bits differ");
    ensure!(t < Duration::from_secs(600), "1000 episodes took {:.0}s", t.as_secs_f64());
    Ok(format!("1000 episodes bit-identical, {:.1}s per run", t.as_secs_f64()))
}

fn full_scale() -> Option<Outcome> {
    let path = std::env::var_os("DCPN_FULL_SCALE_CONFIG")?;
    Some((|| {
        let cfg = ExperimentConfig::load(std::path::Path::new(&path)).map_err(|e| e.to_string())?;
        let out = std::env::var_os("DCPN_FULL_SCALE_OUT").map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("dcpn-full-scale"));
        let five_shot = |stages: &str, sub: &str| -> Result<f64, String> {
            let dir = std::path::Path::new(&out).join(sub);
            let stages = parse_stages(stages).map_err(|e| e.to_string())?;
            run_pipeline(&cfg, &stages, &dir, &PipelineOptions::default()).map_err(|e| e.to_string())?;
            let run = RunDir::for_config(&dir, &cfg).map_err(|e| e.to_string())?;
            let rows = read_report(&run.report(ReportFormat::Csv), ReportFormat::Csv).map_err(|e| e.to_string())?;
            rows.iter().find(|r| r.k_shot == 5).map(|r| r.mean_acc).ok_or_else(|| "no 5-shot row".to_string())
        };
        let with = five_shot("all", "pretrained")?;
        let without = five_shot("synth,meta-train,evaluate,report", "scratch")?;
        ensure!(with > without, "pretrained {with:.4} does not exceed scratch {without:.4}");
        Ok(format!("5-shot: pretrained {with:.4} > scratch {without:.4}"))
    })())
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).try_init();
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("mask invariants", mask_invariants),
        ("reconstruction loss", reconstruction_loss),
        ("pixel shuffle", pixel_shuffle),
        ("prototype head vs naive oracle", head_oracle),
        ("gradient check", gradient_check),
        ("PCA", pca),
        ("classification metrics", metric_oracles),
        ("local-only degeneracy", degeneracy),
        ("pretraining regression", pretraining_regression),
        ("end-to-end learnability", learnability),
        ("protocol determinism", protocol_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("AC{:02} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("AC{:02} FAIL {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    match full_scale() {
        None => println!("AC12 SKIP full-scale pretraining benefit: set DCPN_FULL_SCALE_CONFIG to a config with real datasets"),
        Some(Ok(detail)) => println!("AC12 PASS full-scale pretraining benefit: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("AC12 FAIL full-scale pretraining benefit: {why}");
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
