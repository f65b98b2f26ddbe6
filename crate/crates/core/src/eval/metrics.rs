use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-vs-rest counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
    pub total: usize,
}

pub fn confusion(preds: &[usize], labels: &[usize], n_way: usize) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions, {} labels", preds.len(), labels.len())));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&x| x >= n_way) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n_way}")));
    }
    let mut per_class = vec![ClassCounts::default(); n_way];
    for (&p, &y) in preds.iter().zip(labels) {
        for (c, counts) in per_class.iter_mut().enumerate() {
            match (p == c, y == c) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        per_class,
        total: preds.len(),
    })
}

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize, what: &str, class: usize) -> f64 {
    if den == 0 {
        log::warn!("{what} undefined for class {class} (zero denominator); counted as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy is the fraction of correctly classified queries (ΣTP / Q).
/// Per-class precision, recall and F1 are averaged with equal weight; a zero
/// denominator contributes 0 and logs a warning.
pub fn metrics(counts: &ConfusionCounts) -> ClassificationMetrics {
    let n = counts.per_class.len().max(1) as f64;
    let tp: usize = counts.per_class.iter().map(|c| c.tp).sum();
    let accuracy = if counts.total == 0 { 0.0 } else { tp as f64 / counts.total as f64 };
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for (i, c) in counts.per_class.iter().enumerate() {
        let p = ratio(c.tp, c.tp + c.fp, "precision", i);
        let r = ratio(c.tp, c.tp + c.fn_, "recall", i);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    ClassificationMetrics {
        accuracy,
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
    }
}

/// Macro one-vs-rest ROC AUC from `(Q, N)` class probabilities, computed as
/// the Mann–Whitney statistic with mid-ranks (ties count one half). Classes
/// without positives or negatives are skipped with a warning.
pub fn auc(prob_matrix: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if prob_matrix.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows, {} labels", prob_matrix.len(), labels.len())));
    }
    let n_way = prob_matrix.first().map(Vec::len).unwrap_or(0);
    if prob_matrix.iter().any(|r| r.len() != n_way) {
        return Err(Error::Shape("score rows differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n_way}")));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("AUC needs at least two classes among the labels".into()));
    }
    let q = labels.len();
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_way {
        let n_pos = labels.iter().filter(|&&l| l == c).count();
        let n_neg = q - n_pos;
        if n_pos == 0 || n_neg == 0 {
            log::warn!("AUC undefined for class {c}; skipped");
            continue;
        }
        let mut order: Vec<usize> = (0..q).collect();
        order.sort_by(|&a, &b| prob_matrix[a][c].total_cmp(&prob_matrix[b][c]));
        let mut ranks = vec![0.0; q];
        let mut i = 0;
        while i < q {
            let mut j = i;
            while j + 1 < q && prob_matrix[order[j + 1]][c] == prob_matrix[order[i]][c] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = mid;
            }
            i = j + 1;
        }
        let pos_rank_sum: f64 = (0..q).filter(|&k| labels[k] == c).map(|k| ranks[k]).sum();
        let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        total += u / (n_pos * n_neg) as f64;
        used += 1;
    }
    Ok(total / used as f64)
}
