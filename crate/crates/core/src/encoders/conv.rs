//! Residual convolutional encoder for the local channel.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvEncoderConfig {
    pub stem_width: usize,
    /// Stem convolution stride 2 followed by 2×2 max pooling (stride 4 total).
    pub stem_downsample: bool,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Three-layer bottleneck blocks with 4× expansion instead of basic blocks.
    pub bottleneck: bool,
    pub output_stride: usize,
}

impl ConvEncoderConfig {
    /// Desk-scale preset: widths 16/32/64, one basic block each, behind the
    /// usual stride-4 stem.
    pub fn tiny() -> Self {
        Self {
            stem_width: 16,
            stem_downsample: true,
            widths: vec![16, 32, 64],
            blocks: vec![1, 1, 1],
            bottleneck: false,
            output_stride: 16,
        }
    }

    /// 50-layer bottleneck residual network layout.
    pub fn resnet50() -> Self {
        Self {
            stem_width: 64,
            stem_downsample: true,
            widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            bottleneck: true,
            output_stride: 32,
        }
    }

    fn expansion(&self) -> usize {
        if self.bottleneck {
            4
        } else {
            1
        }
    }

    pub fn out_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.expansion()
    }

    pub fn computed_stride(&self) -> usize {
        let stem = if self.stem_downsample { 4 } else { 1 };
        stem << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("encoders.conv.{k}");
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::config(key("widths"), "widths and blocks must be non-empty and equally long"));
        }
        if self.stem_width == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::config(key("widths"), "widths and block counts must be positive"));
        }
        if self.computed_stride() != self.output_stride {
            return Err(Error::config(
                key("output_stride"),
                format!("layout gives stride {}, config says {}", self.computed_stride(), self.output_stride),
            ));
        }
        Ok(())
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        if h < self.output_stride || w < self.output_stride || h % self.output_stride != 0 || w % self.output_stride != 0 {
            return Err(Error::Shape(format!(
                "conv input {h}x{w} must be a positive multiple of output stride {}",
                self.output_stride
            )));
        }
        Ok(())
    }
}

/// 2×2 stride-2 max pooling as a reduction, so the gradient reaches the
/// window maximum unscaled (the fused kernel's backward pass rescales it).
/// Odd trailing rows and columns are dropped.
fn max_pool_2x2(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let xs = xs.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)?;
    Ok(xs.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), cin, cout, k, stride, k / 2, false)?,
            bn: BatchNorm2d::new(&pb.pp("bn"), cout)?,
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(xs)?, train)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    layers: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn new(pb: &ParamBuilder, cin: usize, width: usize, stride: usize, bottleneck: bool) -> Result<Self> {
        let (layers, cout) = if bottleneck {
            let cout = width * 4;
            (
                vec![
                    ConvBn::new(&pb.pp("c1"), cin, width, 1, 1)?,
                    ConvBn::new(&pb.pp("c2"), width, width, 3, stride)?,
                    ConvBn::new(&pb.pp("c3"), width, cout, 1, 1)?,
                ],
                cout,
            )
        } else {
            (
                vec![
                    ConvBn::new(&pb.pp("c1"), cin, width, 3, stride)?,
                    ConvBn::new(&pb.pp("c2"), width, width, 3, 1)?,
                ],
                width,
            )
        };
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(&pb.pp("shortcut"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self { layers, shortcut })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut ys = xs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            ys = layer.forward(&ys, train)?;
            if i != last {
                ys = ys.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(xs, train)?,
            None => xs.clone(),
        };
        Ok((ys + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvEncoder {
    config: ConvEncoderConfig,
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
}

impl ConvEncoder {
    pub fn new(pb: &ParamBuilder, config: &ConvEncoderConfig) -> Result<Self> {
        config.validate()?;
        let (k, s) = if config.stem_downsample { (7, 2) } else { (3, 1) };
        let stem = ConvBn::new(&pb.pp("stem"), 3, config.stem_width, k, s)?;
        let mut blocks = Vec::new();
        let mut cin = config.stem_width;
        for (stage, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let block = ResidualBlock::new(
                    &pb.pp(format!("stage{stage}")).pp(format!("block{i}")),
                    cin,
                    width,
                    stride,
                    config.bottleneck,
                )?;
                cin = width * config.expansion();
                blocks.push(block);
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &ConvEncoderConfig {
        &self.config
    }

    /// `(B, 3, H, W)` → `(B, C, H/stride, W/stride)`.
    pub fn forward_map(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        self.config.validate_input(h, w)?;
        let mut xs = self.stem.forward(images, train)?.relu()?;
        if self.config.stem_downsample {
            xs = max_pool_2x2(&xs)?;
        }
        for block in &self.blocks {
            xs = block.forward(&xs, train)?;
        }
        Ok(xs)
    }

    /// Global-average-pooled features `(B, C)`.
    pub fn forward_pooled(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_map(images, train)?.mean((2, 3))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    #[test]
    fn output_stride_matches_layout() {
        assert_eq!(ConvEncoderConfig::tiny().computed_stride(), 16);
        assert_eq!(ConvEncoderConfig::resnet50().computed_stride(), 32);
        assert_eq!(ConvEncoderConfig::resnet50().out_dim(), 2048);
        let mut bad = ConvEncoderConfig::tiny();
        bad.output_stride = 8;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn map_shape() {
        let vm = VarMap::new();
        let pb = ParamBuilder::new(&vm, 1, DType::F32, &Device::Cpu);
        let enc = ConvEncoder::new(&pb, &ConvEncoderConfig::tiny()).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        assert_eq!(enc.forward_map(&x, false).unwrap().dims(), &[2, 64, 2, 2]);
        assert!(enc.forward_map(&x.narrow(2, 0, 24).unwrap(), false).is_err());
    }
}
