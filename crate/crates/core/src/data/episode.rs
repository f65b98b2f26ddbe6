use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seeding::{stream, StreamDomain};

/// Shape of an N-way K-shot meta-task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_queries: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            n_way,
            k_shot,
            q_queries,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidArgument(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 || self.q_queries < 1 {
            return Err(Error::InvalidArgument(format!(
                "k_shot and q_queries must be >= 1, got {} and {}",
                self.k_shot, self.q_queries
            )));
        }
        Ok(())
    }

    /// The `index`-th episode of this spec's stream.
    pub fn episode(&self, dataset: &Dataset, index: u64) -> Result<Episode> {
        self.episode_in(dataset, StreamDomain::Episode, index)
    }

    /// The `index`-th episode of the given stream domain, so training and
    /// evaluation episodes never share random draws.
    pub fn episode_in(&self, dataset: &Dataset, domain: StreamDomain, index: u64) -> Result<Episode> {
        let mut rng = stream(self.seed, domain, index);
        sample_episode(dataset, self, &mut rng)
    }
}

/// One meta-task. Samples are referenced by their index in the source
/// dataset; labels are episode-local (`0..n_way`, by class draw order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Source class ids in draw order; `classes[label]` is the original id.
    pub classes: Vec<usize>,
    /// `(sample index, episode label)`, class-major.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn support_indices(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.0).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.1).collect()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.0).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.1).collect()
    }
}

/// Draw `n_way` classes uniformly without replacement, then `k_shot +
/// q_queries` samples per class without replacement; the first `k_shot` go to
/// the support set.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    if dataset.n_classes() < spec.n_way {
        return Err(Error::Episode(format!(
            "{}-way episode requested but dataset `{}` has {} classes",
            spec.n_way,
            dataset.name,
            dataset.n_classes()
        )));
    }
    let per_class = spec.k_shot + spec.q_queries;
    let classes = sample_indices(rng, dataset.n_classes(), spec.n_way).into_vec();
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_queries);
    for (label, &class) in classes.iter().enumerate() {
        let pool = dataset.class_indices(class);
        if pool.len() < per_class {
            return Err(Error::Episode(format!(
                "class `{}` has {} samples, {} needed ({} shot + {} query)",
                dataset.class_names[class],
                pool.len(),
                per_class,
                spec.k_shot,
                spec.q_queries
            )));
        }
        let picks = sample_indices(rng, pool.len(), per_class).into_vec();
        for (j, p) in picks.into_iter().enumerate() {
            if j < spec.k_shot {
                support.push((pool[p], label));
            } else {
                query.push((pool[p], label));
            }
        }
    }
    Ok(Episode {
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        q_queries: spec.q_queries,
        classes,
        support,
        query,
    })
}
