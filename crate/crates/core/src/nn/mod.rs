//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! registry, the handful of layers the encoders need, and an AdamW whose
//! state can be checkpointed.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{grid_coords, sincos_position_code, BatchNorm2d, Conv2d, LayerNorm, Linear, Mlp};
pub use optim::{AdamSettings, AdamW};
pub use params::{restore, snapshot, sorted_vars, Init, ParamBuilder};
