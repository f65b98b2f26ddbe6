//! Distances to prototypes, soft-vote confidences, class probabilities and
//! the episode loss. One batched tensor routine serves both training (in the
//! model's dtype, differentiable) and the scalar API (in `f64`).

use candle_core::{DType, Device, Tensor, D};

use super::head::{HeadConfig, Metric, Scale};
use super::prototypes::{MultiScaleFeature, PrototypeMatrix};
use crate::error::{Error, Result};

/// Probability floor inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Batched scores for `Q` queries against `N` classes over `S` scales.
#[derive(Debug, Clone)]
pub struct ScoreTensors {
    /// `(Q, N, S)`, already divided by the temperature.
    pub distances: Tensor,
    /// `(Q, N)`.
    pub alpha: Tensor,
    /// `(Q, N)`.
    pub probs: Tensor,
    /// `(Q, N)`, exact log-softmax of `alpha`.
    pub log_probs: Tensor,
}

fn scale_distance(q: &Tensor, p: &Tensor, cfg: &HeadConfig) -> Result<Tensor> {
    let (nq, dq) = q.dims2()?;
    let (np, dp) = p.dims2()?;
    if dq != dp {
        return Err(Error::Shape(format!("query width {dq}, prototype width {dp}")));
    }
    let d = match cfg.metric {
        Metric::Euclidean => {
            let diff = q.unsqueeze(1)?.broadcast_sub(&p.unsqueeze(0)?)?;
            let sq = diff.sqr()?.sum(D::Minus1)?;
            if cfg.squared {
                sq
            } else {
                // Flooring keeps the sqrt gradient finite; the mask restores
                // an exact zero at coincident points.
                let nonzero = sq.gt(1e-24)?.to_dtype(sq.dtype())?;
                sq.maximum(1e-24)?.sqrt()?.mul(&nonzero)?
            }
        }
        Metric::Cosine => {
            let qn = q.sqr()?.sum_keepdim(1)?.sqrt()?;
            let pn = p.sqr()?.sum_keepdim(1)?.sqrt()?;
            let min_norm = Tensor::cat(&[&qn.flatten_all()?, &pn.flatten_all()?], 0)?
                .min(0)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            if min_norm <= 0.0 {
                return Err(Error::InvalidArgument(
                    "cosine distance undefined for a zero-norm feature or prototype".into(),
                ));
            }
            let cos = q.matmul(&p.t()?)?.broadcast_div(&qn)?.broadcast_div(&pn.t()?)?;
            (1.0 - cos)?
        }
    };
    debug_assert_eq!(d.dims(), &[nq, np]);
    Ok((d / cfg.temperature)?)
}

/// Score `(Q, D_s)` query features against `(N, D_s)` prototypes, one pair
/// per enabled scale in `cfg.scales` order.
pub fn score_tensors(queries: &[Tensor], protos: &[Tensor], cfg: &HeadConfig) -> Result<ScoreTensors> {
    cfg.validate()?;
    if queries.len() != cfg.scales.len() || protos.len() != cfg.scales.len() {
        return Err(Error::Shape(format!(
            "{} query and {} prototype tensors for {} scales",
            queries.len(),
            protos.len(),
            cfg.scales.len()
        )));
    }
    let per_scale = queries
        .iter()
        .zip(protos)
        .map(|(q, p)| scale_distance(q, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let distances = Tensor::stack(&per_scale, 2)?;
    let alpha = distances.neg()?.exp()?.sum(2)?;
    let shifted = alpha.broadcast_sub(&alpha.max_keepdim(1)?)?;
    let e = shifted.exp()?;
    let z = e.sum_keepdim(1)?;
    let probs = e.broadcast_div(&z)?;
    let log_probs = shifted.broadcast_sub(&z.log()?)?;
    Ok(ScoreTensors {
        distances,
        alpha,
        probs,
        log_probs,
    })
}

/// Mean of `−log max(p_true, 1e-12)` over queries, from `(Q, N)` log-probabilities.
pub fn nll_tensor(log_probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (q, n) = log_probs.dims2()?;
    if labels.len() != q {
        return Err(Error::Shape(format!("{q} queries, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n}")));
    }
    let mut onehot = vec![0.0f64; q * n];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * n + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (q, n), log_probs.device())?.to_dtype(log_probs.dtype())?;
    let picked = (log_probs * onehot)?.sum(1)?;
    let floor = PROB_FLOOR.ln();
    let below = picked
        .lt(floor)?
        .to_dtype(DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?;
    if below > 0.0 {
        log::warn!("{below} queries assign p < {PROB_FLOOR:e} to the true class; clamped");
    }
    Ok(picked.maximum(floor)?.neg()?.mean_all()?)
}

/// Scores of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub scales: Vec<Scale>,
    /// `distances[c][s]` for class `c` and the `s`-th enabled scale.
    pub distances: Vec<Vec<f64>>,
    pub confidence: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

fn scale_rows(rows: Vec<&[f64]>, scale: Scale, device: &Device) -> Result<Tensor> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if width == 0 {
        return Err(if scale == Scale::Mix {
            Error::InvalidArgument("the mix scale requires a fitted PCA projector".into())
        } else {
            Error::Shape(format!("empty {scale} features"))
        });
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape(format!("{scale} features differ in length")));
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (n, width), device)?)
}

/// Score several queries in `f64`.
pub fn score_queries(queries: &[MultiScaleFeature], mp: &PrototypeMatrix, cfg: &HeadConfig) -> Result<Vec<ScoreResult>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let dev = Device::Cpu;
    let mut qs = Vec::new();
    let mut ps = Vec::new();
    for &s in &cfg.scales {
        qs.push(scale_rows(queries.iter().map(|q| q.get(s)).collect(), s, &dev)?);
        ps.push(scale_rows((0..mp.n_way()).map(|c| mp.get(c, s)).collect(), s, &dev)?);
    }
    let t = score_tensors(&qs, &ps, cfg)?;
    let distances = t.distances.to_vec3::<f64>()?;
    let alpha = t.alpha.to_vec2::<f64>()?;
    let probs = t.probs.to_vec2::<f64>()?;
    Ok(distances
        .into_iter()
        .zip(alpha)
        .zip(probs)
        .map(|((d, a), p)| {
            let predicted = argmax(&p);
            ScoreResult {
                scales: cfg.scales.clone(),
                distances: d,
                confidence: a,
                probs: p,
                predicted,
            }
        })
        .collect())
}

pub fn score_query(q: &MultiScaleFeature, mp: &PrototypeMatrix, cfg: &HeadConfig) -> Result<ScoreResult> {
    Ok(score_queries(std::slice::from_ref(q), mp, cfg)?.remove(0))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

pub fn classify(result: &ScoreResult) -> usize {
    argmax(&result.probs)
}

/// Mean negative log-probability of the true classes.
pub fn episode_loss(results: &[ScoreResult], labels: &[usize]) -> Result<f64> {
    if results.len() != labels.len() {
        return Err(Error::Shape(format!("{} results, {} labels", results.len(), labels.len())));
    }
    if results.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut total = 0.0;
    for (r, &l) in results.iter().zip(labels) {
        let p = *r
            .probs
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} outside 0..{}", r.probs.len())))?;
        if p < PROB_FLOOR {
            log::warn!("true-class probability {p:e} clamped to {PROB_FLOOR:e}");
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fewshot::head::ablation_config;

    fn feat(g: &[f64], l: &[f64], m: &[f64]) -> MultiScaleFeature {
        MultiScaleFeature {
            z_g: g.to_vec(),
            z_l: l.to_vec(),
            z_mix: m.to_vec(),
        }
    }

    #[test]
    fn hand_case_two_classes() {
        // class A at the query on every scale, class B at distance 1 on every scale
        let q = feat(&[0.0], &[0.0], &[0.0]);
        let mp = PrototypeMatrix {
            protos: vec![[vec![0.0], vec![0.0], vec![0.0]], [vec![1.0], vec![1.0], vec![1.0]]],
        };
        let r = score_query(&q, &mp, &HeadConfig::default()).unwrap();
        assert!((r.confidence[0] - 3.0).abs() < 1e-12);
        assert!((r.confidence[1] - 3.0 * (-1f64).exp()).abs() < 1e-12);
        assert!((r.probs[0] - 0.8695).abs() < 1e-4, "{}", r.probs[0]);
        assert_eq!(r.predicted, 0);
        let loss = episode_loss(&[r], &[0]).unwrap();
        assert!((loss - 0.1399).abs() < 1e-4, "{loss}");
    }

    #[test]
    fn equal_distances_give_uniform_probs_and_ties_go_low() {
        let q = feat(&[0.0, 0.0], &[0.0], &[1.0]);
        let p = [vec![1.0, 0.0], vec![1.0], vec![0.0]];
        let mp = PrototypeMatrix {
            protos: vec![p.clone(), p.clone(), p.clone(), p.clone(), p],
        };
        let r = score_query(&q, &mp, &HeadConfig::default()).unwrap();
        for x in &r.probs {
            assert!((x - 0.2).abs() < 1e-12);
        }
        assert_eq!(classify(&r), 0);
        assert!((episode_loss(&[r], &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classify_cases() {
        let r = |p: Vec<f64>| ScoreResult {
            scales: vec![Scale::Local],
            distances: vec![],
            confidence: p.clone(),
            probs: p,
            predicted: 0,
        };
        assert_eq!(classify(&r(vec![0.2, 0.7, 0.1])), 1);
        assert_eq!(classify(&r(vec![0.5, 0.5])), 0);
    }

    #[test]
    fn mix_without_projector_is_fatal() {
        let q = MultiScaleFeature::without_mix(vec![1.0], vec![1.0]);
        let mp = PrototypeMatrix {
            protos: vec![[vec![0.0], vec![0.0], vec![]], [vec![1.0], vec![1.0], vec![]]],
        };
        let cfg = ablation_config(&[Scale::Mix], Metric::Euclidean, false).unwrap();
        let err = score_query(&q, &mp, &cfg).unwrap_err().to_string();
        assert!(err.contains("projector"), "{err}");
        let local = ablation_config(&[Scale::Local], Metric::Euclidean, false).unwrap();
        assert_eq!(score_query(&q, &mp, &local).unwrap().predicted, 1);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let q = feat(&[0.0, 0.0], &[1.0], &[1.0]);
        let mp = PrototypeMatrix {
            protos: vec![[vec![1.0, 0.0], vec![1.0], vec![1.0]], [vec![0.0, 1.0], vec![1.0], vec![1.0]]],
        };
        let cfg = HeadConfig {
            metric: Metric::Cosine,
            ..HeadConfig::default()
        };
        assert!(score_query(&q, &mp, &cfg).is_err());
        let q = feat(&[2.0, 0.0], &[1.0], &[1.0]);
        let r = score_query(&q, &mp, &cfg).unwrap();
        assert!((r.distances[0][0]).abs() < 1e-12);
        assert!((r.distances[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_class_b() {
        let q = feat(&[1.0, 2.0], &[3.0], &[4.0]);
        let mp = PrototypeMatrix {
            protos: vec![
                [vec![1.0, 2.0], vec![3.0], vec![4.0]],
                [vec![11.0, 2.0], vec![13.0], vec![-6.0]],
            ],
        };
        let r = score_query(&q, &mp, &HeadConfig::default()).unwrap();
        assert_eq!(r.predicted, 0);
        assert!(r.probs[0] > 0.9);
    }

    #[test]
    fn floor_clamps_zero_probability() {
        let r = ScoreResult {
            scales: vec![Scale::Global],
            distances: vec![],
            confidence: vec![],
            probs: vec![1.0, 0.0],
            predicted: 0,
        };
        assert!((episode_loss(&[r], &[1]).unwrap() - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
    }
}
