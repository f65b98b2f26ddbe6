//! Uniform-masking MAE pretraining of the pyramid encoder.

mod loss;
mod mae;
mod mask;
mod shuffle;
mod train;

pub use loss::{loss_weights, mae_loss, masked_mse, ReconTarget};
pub use mae::{patchify, sample_plans, unpatchify, DecoderConfig, MaskedAutoencoder, DECODER_PREFIX};
pub use mask::{
    assemble_encoder_input, secondary_mask, uniform_sample_mask, LossScope, MaskPlan, DEFAULT_SM_RATIO,
};
pub use shuffle::{pixel_shuffle_upsample, pixel_unshuffle};
pub use train::{dump_reconstructions, pretrain_loop, step_inputs, LossRow, PretrainReport, PretrainSettings, LOSS_LOG_FILE};
