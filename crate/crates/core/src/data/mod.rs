//! Datasets, the synthetic texture corpus, domain-shift task definitions and
//! episodic sampling.

mod dataset;
mod domain;
mod episode;
mod synthetic;

pub use dataset::{load_dataset, Dataset, DatasetSpec, Sample, Split};
pub use domain::{dataset_distance, make_domain_task, DomainKind, DomainTask};
pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use synthetic::{
    class_textures, generate_synthetic_corpus, nearest_centroid_accuracy, ClassTexture, SyntheticManifest,
};
