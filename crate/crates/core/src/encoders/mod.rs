//! Dual-channel embedding network: a pyramid transformer for global
//! features and a residual CNN for local features, each followed by an
//! affine head onto a shared embedding dimension.

mod conv;
mod pyramid;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use conv::{ConvEncoder, ConvEncoderConfig};
pub use pyramid::{PyramidEncoder, PyramidEncoderConfig, TransformerBlock, FIRST_STRIDE, TOTAL_STRIDE};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamBuilder};

/// Parameter-name prefixes. The pyramid prefix is shared with the masked
/// pretraining model so its checkpoints load directly.
pub const PYRAMID_PREFIX: &str = "pyramid";
pub const GLOBAL_HEAD_PREFIX: &str = "global_head";
pub const CONV_PREFIX: &str = "conv";
pub const LOCAL_HEAD_PREFIX: &str = "local_head";

/// One affine map from a backbone's pooled width to the common dimension.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    linear: Linear,
}

impl ProjectionHead {
    pub fn new(pb: &ParamBuilder, raw_dim: usize, dim: usize) -> Result<Self> {
        let bound = 1.0 / (raw_dim as f64).sqrt();
        Ok(Self {
            linear: Linear::with_init(pb, raw_dim, dim, Init::Uniform { bound })?,
        })
    }

    /// Identity weights, zero bias. Only valid when `raw_dim == dim`.
    pub fn identity(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::with_init(pb, dim, dim, Init::Eye)?,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.linear.bias()
    }

    pub fn forward(&self, raw: &Tensor) -> Result<Tensor> {
        project_to_common_dim(raw, self)
    }
}

/// Apply a projection head to `(B, D_raw)` features.
pub fn project_to_common_dim(raw: &Tensor, head: &ProjectionHead) -> Result<Tensor> {
    let (_, d_raw) = raw.dims2()?;
    if d_raw != head.raw_dim() {
        return Err(Error::Shape(format!(
            "projection head expects {} inputs, got {d_raw}",
            head.raw_dim()
        )));
    }
    head.linear.forward(raw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualEncoderConfig {
    /// Common embedding dimension of both channels; must be even.
    pub dim: usize,
    pub pyramid: PyramidEncoderConfig,
    pub conv: ConvEncoderConfig,
}

impl DualEncoderConfig {
    pub fn tiny() -> Self {
        Self {
            dim: 64,
            pyramid: PyramidEncoderConfig::tiny(),
            conv: ConvEncoderConfig::tiny(),
        }
    }

    pub fn full() -> Self {
        Self {
            dim: 512,
            pyramid: PyramidEncoderConfig::small(),
            conv: ConvEncoderConfig::resnet50(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::config("encoders.dim", format!("{} must be positive and even", self.dim)));
        }
        self.pyramid.validate()?;
        self.conv.validate()
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        self.pyramid.validate_input(h, w)?;
        self.conv.validate_input(h, w)
    }
}

/// Global channel: pyramid transformer + head.
#[derive(Debug, Clone)]
pub struct GlobalChannel {
    pub pyramid: PyramidEncoder,
    pub head: ProjectionHead,
}

impl GlobalChannel {
    pub fn new(pb: &ParamBuilder, cfg: &PyramidEncoderConfig, dim: usize) -> Result<Self> {
        let pyramid = PyramidEncoder::new(&pb.pp(PYRAMID_PREFIX), cfg)?;
        let head = ProjectionHead::new(&pb.pp(GLOBAL_HEAD_PREFIX), cfg.out_dim(), dim)?;
        Ok(Self { pyramid, head })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        pyramid_forward(images, self)
    }
}

/// `(B, 3, H, W)` → `(B, D)` global features.
pub fn pyramid_forward(images: &Tensor, channel: &GlobalChannel) -> Result<Tensor> {
    channel.head.forward(&channel.pyramid.forward_pooled(images)?)
}

/// Local channel: residual CNN + head.
#[derive(Debug, Clone)]
pub struct LocalChannel {
    pub conv: ConvEncoder,
    pub head: ProjectionHead,
}

impl LocalChannel {
    pub fn new(pb: &ParamBuilder, cfg: &ConvEncoderConfig, dim: usize) -> Result<Self> {
        let conv = ConvEncoder::new(&pb.pp(CONV_PREFIX), cfg)?;
        let head = ProjectionHead::new(&pb.pp(LOCAL_HEAD_PREFIX), cfg.out_dim(), dim)?;
        Ok(Self { conv, head })
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        conv_forward(images, self, train)
    }
}

/// `(B, 3, H, W)` → `(B, D)` local features. `train` selects batch
/// statistics in the normalisation layers.
pub fn conv_forward(images: &Tensor, channel: &LocalChannel, train: bool) -> Result<Tensor> {
    channel.head.forward(&channel.conv.forward_pooled(images, train)?)
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub global: GlobalChannel,
    pub local: LocalChannel,
}

impl DualEncoder {
    pub fn new(pb: &ParamBuilder, config: &DualEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            global: GlobalChannel::new(pb, &config.pyramid, config.dim)?,
            local: LocalChannel::new(pb, &config.conv, config.dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        dual_encode(images, self, train)
    }
}

/// Both channels on the same batch: `(Z_G, Z_L)`, each `(B, D)`.
pub fn dual_encode(images: &Tensor, encoder: &DualEncoder, train: bool) -> Result<(Tensor, Tensor)> {
    if encoder.global.head.dim() != encoder.local.head.dim() {
        return Err(Error::Shape(format!(
            "channel dimensions differ: {} vs {}",
            encoder.global.head.dim(),
            encoder.local.head.dim()
        )));
    }
    let (_, _, h, w) = images.dims4()?;
    encoder.config.validate_input(h, w)?;
    let z_g = encoder.global.forward(images)?;
    let z_l = encoder.local.forward(images, train)?;
    Ok((z_g, z_l))
}
