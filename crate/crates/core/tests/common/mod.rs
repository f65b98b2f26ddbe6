//! Independent reference implementations shared by the integration tests and
//! the acceptance harness. Everything here is written with plain loops over
//! `f64` so it shares no code path with the library's tensor kernels.
#![allow(dead_code)]

use dcpn::fewshot::{HeadConfig, Metric, MultiScaleFeature, PrototypeMatrix, Scale};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Mean of the support rows of each class, one scale at a time.
pub fn naive_prototypes(support: &[MultiScaleFeature], labels: &[usize], n_way: usize) -> Vec<[Vec<f64>; 3]> {
    let mut out = Vec::new();
    for c in 0..n_way {
        let mut per_scale: [Vec<f64>; 3] = Default::default();
        for s in Scale::ALL {
            let rows: Vec<&[f64]> = support
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(f, _)| f.get(s))
                .collect();
            let d = rows[0].len();
            let mut mean = vec![0.0; d];
            for r in &rows {
                for j in 0..d {
                    mean[j] += r[j];
                }
            }
            for m in mean.iter_mut() {
                *m /= rows.len() as f64;
            }
            per_scale[s.index()] = mean;
        }
        out.push(per_scale);
    }
    out
}

pub fn naive_distance(a: &[f64], b: &[f64], cfg: &HeadConfig) -> f64 {
    let d = match cfg.metric {
        Metric::Euclidean => {
            let mut sq = 0.0;
            for i in 0..a.len() {
                sq += (a[i] - b[i]) * (a[i] - b[i]);
            }
            if cfg.squared {
                sq
            } else {
                sq.sqrt()
            }
        }
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for i in 0..a.len() {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        }
    };
    d / cfg.temperature
}

pub struct NaiveScore {
    /// `[class][enabled scale]`.
    pub distances: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

/// Soft vote over the enabled scales followed by a softmax, evaluated
/// directly from the definitions.
pub fn naive_score(q: &MultiScaleFeature, protos: &[[Vec<f64>; 3]], cfg: &HeadConfig) -> NaiveScore {
    let mut distances = Vec::new();
    let mut alpha = Vec::new();
    for p in protos {
        let ds: Vec<f64> = cfg.scales.iter().map(|&s| naive_distance(q.get(s), &p[s.index()], cfg)).collect();
        alpha.push(ds.iter().map(|d| (-d).exp()).sum::<f64>());
        distances.push(ds);
    }
    let denom: f64 = alpha.iter().map(|a| a.exp()).sum();
    let probs: Vec<f64> = alpha.iter().map(|a| a.exp() / denom).collect();
    let mut predicted = 0;
    for c in 1..probs.len() {
        if probs[c] > probs[predicted] {
            predicted = c;
        }
    }
    NaiveScore {
        distances,
        alpha,
        probs,
        predicted,
    }
}

/// Classic prototypical network on a single feature: class means, Euclidean
/// distance, and the single-scale vote `softmax(exp(-d))`. Also returns the
/// textbook `softmax(-d)` ranking for comparison.
pub fn protonet_reference(support: &[Vec<f64>], labels: &[usize], n_way: usize, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = query.len();
    let mut dists = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let mut mean = vec![0.0; d];
        let mut count = 0.0;
        for (row, &l) in support.iter().zip(labels) {
            if l == c {
                for j in 0..d {
                    mean[j] += row[j];
                }
                count += 1.0;
            }
        }
        let mut sq = 0.0;
        for j in 0..d {
            let m = mean[j] / count;
            sq += (query[j] - m) * (query[j] - m);
        }
        dists.push(sq.sqrt());
    }
    let vote: Vec<f64> = dists.iter().map(|x| (-x).exp()).collect();
    let z: f64 = vote.iter().map(|v| v.exp()).sum();
    let probs = vote.iter().map(|v| v.exp() / z).collect();
    let z2: f64 = dists.iter().map(|x| (-x).exp()).sum();
    let classic = dists.iter().map(|x| (-x).exp() / z2).collect();
    (probs, classic)
}

pub fn to_matrix(protos: &[[Vec<f64>; 3]]) -> PrototypeMatrix {
    PrototypeMatrix { protos: protos.to_vec() }
}

/// Accuracy, macro precision, recall and F1 from an explicit `N × N`
/// confusion matrix (rows = truth, columns = prediction).
pub fn brute_metrics(preds: &[usize], labels: &[usize], n: usize) -> (f64, f64, f64, f64) {
    let mut m = vec![vec![0usize; n]; n];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    let diag: usize = (0..n).map(|c| m[c][c]).sum();
    let acc = if preds.is_empty() { 0.0 } else { diag as f64 / preds.len() as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for c in 0..n {
        let tp = m[c][c];
        let col: usize = (0..n).map(|r| m[r][c]).sum();
        let row: usize = m[c].iter().sum();
        let p = if col == 0 { 0.0 } else { tp as f64 / col as f64 };
        let r = if row == 0 { 0.0 } else { tp as f64 / row as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ps += p;
        rs += r;
        fs += f;
    }
    let k = n as f64;
    (acc, ps / k, rs / k, fs / k)
}

/// Macro one-vs-rest AUC by counting every positive/negative pair.
pub fn brute_auc(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = probs[0].len();
    let (mut total, mut used) = (0.0, 0);
    for c in 0..n {
        let pos: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p[c]).collect();
        let neg: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l != c).map(|(p, _)| p[c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for a in &pos {
            for b in &neg {
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
        total += wins / (pos.len() * neg.len()) as f64;
        used += 1;
    }
    total / used as f64
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Sample covariance (normalised by `M − 1`).
pub fn covariance(bank: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = bank.len();
    let d = bank[0].len();
    let mut mean = vec![0.0; d];
    for r in bank {
        for j in 0..d {
            mean[j] += r[j] / m as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in bank {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (m - 1) as f64;
            }
        }
    }
    cov
}
