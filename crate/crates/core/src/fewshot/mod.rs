//! Prototype head: PCA mixing of the two channels, the multi-scale
//! prototype matrix, soft-vote scoring, and episodic meta-training.

mod head;
mod model;
mod pca;
mod prototypes;
mod scoring;
mod train;

pub use head::{ablation_config, parse_scales, scales_label, HeadConfig, Metric, Scale};
pub use model::DcpnModel;
pub use pca::{fit_channel, fit_pca, ChannelPca, PcaProjector};
pub use prototypes::{
    averaging_matrix, check_support_labels, compute_prototypes, mix_features, mix_tensors, MultiScaleFeature,
    PrototypeMatrix,
};
pub use scoring::{
    argmax, classify, episode_loss, nll_tensor, score_queries, score_query, score_tensors, ScoreResult, ScoreTensors,
    PROB_FLOOR,
};
pub use train::{meta_train, EpisodeLog, MetaTrainReport, MetaTrainSettings, TRAIN_LOG_FILE};
