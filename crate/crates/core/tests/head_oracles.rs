mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use dcpn::fewshot::{
    averaging_matrix, compute_prototypes, fit_channel, fit_pca, mix_features, mix_tensors, nll_tensor, score_queries,
    score_tensors, HeadConfig, Metric, MultiScaleFeature, Scale,
};
use dcpn::seeding::rng_from_seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_head(rng: &mut rand_chacha::ChaCha8Rng) -> HeadConfig {
    let subsets: [&[Scale]; 7] = [
        &[Scale::Global],
        &[Scale::Local],
        &[Scale::Mix],
        &[Scale::Global, Scale::Local],
        &[Scale::Global, Scale::Mix],
        &[Scale::Local, Scale::Mix],
        &Scale::ALL,
    ];
    HeadConfig {
        scales: subsets[rng.random_range(0..7)].to_vec(),
        metric: if rng.random_bool(0.5) { Metric::Euclidean } else { Metric::Cosine },
        temperature: rng.random_range(0.5..2.0),
        squared: rng.random_bool(0.3),
        pretrained: false,
    }
}

fn random_feature(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> MultiScaleFeature {
    MultiScaleFeature {
        z_g: random_vec(rng, d),
        z_l: random_vec(rng, d),
        z_mix: random_vec(rng, d),
    }
}

#[test]
fn scoring_matches_naive_loops_on_random_episodes() {
    let mut rng = rng_from_seed(21);
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(1..=10);
        let d = rng.random_range(1..=32);
        let cfg = random_head(&mut rng);
        let mut labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        labels.shuffle(&mut rng);
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, d)).collect();
        let queries: Vec<_> = (0..rng.random_range(1..=8)).map(|_| random_feature(&mut rng, d)).collect();
        let protos = naive_prototypes(&support, &labels, n);
        let mp = compute_prototypes(&support, &labels).unwrap();
        for c in 0..n {
            for s in Scale::ALL {
                for (a, b) in mp.get(c, s).iter().zip(&protos[c][s.index()]) {
                    assert!(rel_err(*a, *b) < 1e-12);
                }
            }
        }
        let got = score_queries(&queries, &mp, &cfg).unwrap();
        for (q, r) in queries.iter().zip(&got) {
            let want = naive_score(q, &protos, &cfg);
            for c in 0..n {
                for (a, b) in r.distances[c].iter().zip(&want.distances[c]) {
                    assert!(rel_err(*a, *b) < 1e-6, "distance {a} vs {b}");
                }
                assert!(rel_err(r.confidence[c], want.alpha[c]) < 1e-6);
                assert!(rel_err(r.probs[c], want.probs[c]) < 1e-6);
            }
            assert_eq!(r.predicted, want.predicted);
        }
    }
}

#[test]
fn three_scale_hand_case() {
    let f = |v: f64| MultiScaleFeature {
        z_g: vec![v],
        z_l: vec![v],
        z_mix: vec![v],
    };
    let support = vec![f(0.0), f(1.0)];
    let mp = compute_prototypes(&support, &[0, 1]).unwrap();
    let r = score_queries(&[f(0.0)], &mp, &HeadConfig::default()).unwrap().remove(0);
    assert_eq!(r.distances[0], vec![0.0; 3]);
    assert_eq!(r.distances[1], vec![1.0; 3]);
    assert!((r.confidence[0] - 3.0).abs() < 1e-12);
    assert!((r.confidence[1] - 3.0 * (-1f64).exp()).abs() < 1e-12);
    assert!((r.probs[0] - 0.8695).abs() < 1e-4, "{}", r.probs[0]);
    assert!((r.probs[1] - 0.1305).abs() < 1e-4);
}

#[test]
fn local_only_head_is_a_prototypical_network() {
    let mut rng = rng_from_seed(22);
    let cfg = HeadConfig {
        scales: vec![Scale::Local],
        ..HeadConfig::default()
    };
    for _ in 0..100 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(1..=5);
        let d = rng.random_range(2..=16);
        let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, d)).collect();
        let query = random_feature(&mut rng, d);
        let mp = compute_prototypes(&support, &labels).unwrap();
        let r = score_queries(std::slice::from_ref(&query), &mp, &cfg).unwrap().remove(0);
        let z_l: Vec<Vec<f64>> = support.iter().map(|f| f.z_l.clone()).collect();
        let (probs, classic) = protonet_reference(&z_l, &labels, n, &query.z_l);
        for (a, b) in r.probs.iter().zip(&probs) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        let best = (0..n).fold(0, |b, c| if classic[c] > classic[b] { c } else { b });
        assert_eq!(r.predicted, best);
    }
}

proptest! {
    #[test]
    fn probabilities_form_a_simplex(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let cfg = random_head(&mut rng);
        let n = rng.random_range(2..=6);
        let labels: Vec<usize> = (0..n).collect();
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, 6)).collect();
        let mp = compute_prototypes(&support, &labels).unwrap();
        let r = score_queries(&[random_feature(&mut rng, 6)], &mp, &cfg).unwrap().remove(0);
        prop_assert!(r.probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_scores_ignore_a_common_shift(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = rng_from_seed(seed);
        let cfg = HeadConfig::default();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, 5)).collect();
        let q = random_feature(&mut rng, 5);
        let moved = |f: &MultiScaleFeature| MultiScaleFeature {
            z_g: f.z_g.iter().map(|x| x + shift).collect(),
            z_l: f.z_l.iter().map(|x| x + shift).collect(),
            z_mix: f.z_mix.iter().map(|x| x + shift).collect(),
        };
        let a = score_queries(&[q.clone()], &compute_prototypes(&support, &labels).unwrap(), &cfg).unwrap().remove(0);
        let s2: Vec<_> = support.iter().map(moved).collect();
        let b = score_queries(&[moved(&q)], &compute_prototypes(&s2, &labels).unwrap(), &cfg).unwrap().remove(0);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn relabelling_permutes_probabilities(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let cfg = random_head(&mut rng);
        let n = 4;
        let labels: Vec<usize> = (0..n).flat_map(|c| [c, c]).collect();
        let support: Vec<_> = labels.iter().map(|_| random_feature(&mut rng, 4)).collect();
        let q = random_feature(&mut rng, 4);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let relabelled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let a = score_queries(&[q.clone()], &compute_prototypes(&support, &labels).unwrap(), &cfg).unwrap().remove(0);
        let b = score_queries(&[q], &compute_prototypes(&support, &relabelled).unwrap(), &cfg).unwrap().remove(0);
        for c in 0..n {
            prop_assert!((a.probs[c] - b.probs[perm[c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn moving_a_query_toward_its_prototype_raises_its_probability() {
    let mut rng = rng_from_seed(23);
    let cfg = HeadConfig {
        scales: vec![Scale::Global],
        ..HeadConfig::default()
    };
    let support: Vec<_> = (0..3).map(|_| random_feature(&mut rng, 6)).collect();
    let mp = compute_prototypes(&support, &[0, 1, 2]).unwrap();
    let start = random_vec(&mut rng, 6);
    let mut last = 0.0;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let z: Vec<f64> = start.iter().zip(&support[0].z_g).map(|(a, b)| a + t * (b - a)).collect();
        let q = MultiScaleFeature::without_mix(z, vec![0.0; 6]);
        let p = score_queries(&[q], &mp, &cfg).unwrap()[0].probs[0];
        assert!(p >= last);
        last = p;
    }
}

#[test]
fn cosine_needs_nonzero_features() {
    let cfg = HeadConfig {
        metric: Metric::Cosine,
        scales: vec![Scale::Global],
        ..HeadConfig::default()
    };
    let support = vec![
        MultiScaleFeature::without_mix(vec![1.0, 0.0], vec![1.0, 0.0]),
        MultiScaleFeature::without_mix(vec![0.0, 1.0], vec![0.0, 1.0]),
    ];
    let mp = compute_prototypes(&support, &[0, 1]).unwrap();
    let zero = MultiScaleFeature::without_mix(vec![0.0, 0.0], vec![1.0, 1.0]);
    assert!(score_queries(&[zero], &mp, &cfg).is_err());
}

#[test]
fn pca_line_orthonormality_and_reconstruction() {
    let bank: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.3 - 1.0; 2]).collect();
    let p = fit_channel(&bank, 1).unwrap();
    let s = 1.0 / 2f64.sqrt();
    assert!((p.components[0][0] - s).abs() < 1e-6 && (p.components[0][1] - s).abs() < 1e-6);

    let mut rng = rng_from_seed(24);
    let (m, d, k) = (60, 12, 5);
    // Anisotropic bank so the spectrum is well separated.
    let bank: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (d - j) as f64).collect())
        .collect();
    let p = fit_channel(&bank, k).unwrap();
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = p.components[a].iter().zip(&p.components[b]).map(|(x, y)| x * y).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-6);
        }
    }
    let want_ev = jacobi_eigenvalues(covariance(&bank));
    for (a, b) in p.eigenvalues.iter().zip(&want_ev) {
        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
    let mut err = 0.0;
    for row in &bank {
        let back = p.reconstruct(&p.project(row).unwrap());
        err += row.iter().zip(&back).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    let discarded: f64 = p.eigenvalues[k..].iter().sum();
    assert!((err / (m - 1) as f64 - discarded).abs() < 1e-6 * discarded.max(1.0));
}

#[test]
fn mix_tensor_matches_host_projection() {
    let mut rng = rng_from_seed(25);
    let d = 8;
    let bank_g: Vec<Vec<f64>> = (0..30).map(|_| random_vec(&mut rng, d)).collect();
    let bank_l: Vec<Vec<f64>> = (0..30).map(|_| random_vec(&mut rng, d)).collect();
    let proj = fit_pca(&bank_g, &bank_l, d / 2, "test").unwrap();
    let zg = random_vec(&mut rng, d);
    let zl = random_vec(&mut rng, d);
    let host = mix_features(&zg, &zl, &proj).unwrap();
    assert_eq!(host.z_mix.len(), d);
    let dev = Device::Cpu;
    let t = mix_tensors(
        &Tensor::from_slice(&zg, (1, d), &dev).unwrap(),
        &Tensor::from_slice(&zl, (1, d), &dev).unwrap(),
        &proj,
    )
    .unwrap();
    for (a, b) in t.to_vec2::<f64>().unwrap()[0].iter().zip(&host.z_mix) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Full differentiable episode: prototypes by averaging, three scales, NLL.
fn episode_loss(zg: &Tensor, zl: &Tensor, ns: usize, labels_s: &[usize], labels_q: &[usize], proj: &dcpn::fewshot::PcaProjector) -> Tensor {
    let nq = labels_q.len();
    let cfg = HeadConfig::default();
    let mix = mix_tensors(zg, zl, proj).unwrap();
    let avg = averaging_matrix(labels_s, DType::F64, &Device::Cpu).unwrap();
    let mut qs = Vec::new();
    let mut ps = Vec::new();
    for f in [zg, zl, &mix] {
        ps.push(avg.matmul(&f.narrow(0, 0, ns).unwrap()).unwrap());
        qs.push(f.narrow(0, ns, nq).unwrap());
    }
    let s = score_tensors(&qs, &ps, &cfg).unwrap();
    nll_tensor(&s.log_probs, labels_q).unwrap()
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (d, n, k, q) = (8, 3, 2, 2);
    let mut rng = rng_from_seed(26);
    let dev = Device::Cpu;
    let labels_s: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let labels_q: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    let rows = n * (k + q);
    let bank: Vec<Vec<f64>> = (0..40).map(|_| random_vec(&mut rng, d)).collect();
    let bank2: Vec<Vec<f64>> = (0..40).map(|_| random_vec(&mut rng, d)).collect();
    let proj = fit_pca(&bank, &bank2, d / 2, "fd").unwrap();
    let g0: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l0: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zg = Var::from_tensor(&Tensor::from_vec(g0.clone(), (rows, d), &dev).unwrap()).unwrap();
    let zl = Var::from_tensor(&Tensor::from_vec(l0.clone(), (rows, d), &dev).unwrap()).unwrap();
    let ns = n * k;
    let loss = episode_loss(zg.as_tensor(), zl.as_tensor(), ns, &labels_s, &labels_q, &proj);
    let grads = loss.backward().unwrap();
    let dg = grads.get(zg.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let dl = grads.get(zl.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eval = |g: &[f64], l: &[f64]| {
        let g = Tensor::from_slice(g, (rows, d), &dev).unwrap();
        let l = Tensor::from_slice(l, (rows, d), &dev).unwrap();
        episode_loss(&g, &l, ns, &labels_s, &labels_q, &proj).to_scalar::<f64>().unwrap()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..rows * d {
        for (which, analytic) in [(0, dg[i]), (1, dl[i])] {
            let (mut gp, mut lp) = (g0.clone(), l0.clone());
            let (mut gm, mut lm) = (g0.clone(), l0.clone());
            if which == 0 {
                gp[i] += h;
                gm[i] -= h;
            } else {
                lp[i] += h;
                lm[i] -= h;
            }
            let numeric = (eval(&gp, &lp) - eval(&gm, &lm)) / (2.0 * h);
            // Entries whose gradient is at round-off level compare absolutely.
            let e = if analytic.abs().max(numeric.abs()) < 1e-7 { (analytic - numeric).abs() } else { rel_err(analytic, numeric) };
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
