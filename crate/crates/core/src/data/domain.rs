use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSpec, Split};
use crate::error::{Error, Result};

/// How far the novel classes sit from the base classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    /// Base and novel from one dataset's train/test splits.
    Same,
    /// Same organ, different source dataset.
    Near,
    /// Partly different organs and a different source dataset.
    Mixture,
}

impl DomainKind {
    pub fn default_n_way(self) -> usize {
        match self {
            DomainKind::Same => 7,
            DomainKind::Near | DomainKind::Mixture => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::Same => "same",
            DomainKind::Near => "near",
            DomainKind::Mixture => "mixture",
        }
    }
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(DomainKind::Same),
            "near" => Ok(DomainKind::Near),
            "mixture" => Ok(DomainKind::Mixture),
            other => Err(Error::InvalidArgument(format!(
                "unknown task `{other}` (expected same, near or mixture)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTask {
    pub kind: DomainKind,
    pub base: DatasetSpec,
    pub novel: DatasetSpec,
    pub n_way: usize,
}

impl DomainTask {
    pub fn with_n_way(mut self, n_way: usize) -> Result<Self> {
        if n_way < 2 {
            return Err(Error::InvalidArgument(format!("n_way must be >= 2, got {n_way}")));
        }
        self.n_way = n_way;
        Ok(self)
    }

    /// Base and novel label spaces are disjoint for cross-dataset tasks.
    pub fn disjoint_labels(&self) -> bool {
        self.kind != DomainKind::Same
    }
}

pub fn make_domain_task(kind: DomainKind, base: DatasetSpec, novel: DatasetSpec) -> Result<DomainTask> {
    match kind {
        DomainKind::Same => {
            if base.name != novel.name {
                return Err(Error::InvalidArgument(format!(
                    "same-domain task needs one dataset, got base `{}` and novel `{}`",
                    base.name, novel.name
                )));
            }
            if base.split != Split::Train || novel.split != Split::Test {
                return Err(Error::InvalidArgument(
                    "same-domain task meta-trains on the train split and meta-tests on the test split".into(),
                ));
            }
        }
        DomainKind::Near | DomainKind::Mixture => {
            if base.name == novel.name {
                return Err(Error::InvalidArgument(format!(
                    "{kind}-domain task needs a novel dataset different from `{}`",
                    base.name
                )));
            }
        }
    }
    Ok(DomainTask {
        kind,
        base,
        novel,
        n_way: kind.default_n_way(),
    })
}

/// Euclidean distance between the unit-normalised mean feature vectors of
/// two feature sets.
pub fn dataset_distance(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let mean_a = unit_mean(features_a, "first")?;
    let mean_b = unit_mean(features_b, "second")?;
    if mean_a.len() != mean_b.len() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            mean_a.len(),
            mean_b.len()
        )));
    }
    Ok(mean_a
        .iter()
        .zip(&mean_b)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

fn unit_mean(rows: &[Vec<f64>], which: &str) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("{which} feature set is empty")))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        if r.len() != dim {
            return Err(Error::Shape(format!(
                "{which} feature set has rows of length {} and {dim}",
                r.len()
            )));
        }
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{which} feature set has a zero mean vector"
        )));
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}
