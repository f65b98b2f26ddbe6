//! Four-stage pyramid transformer with spatial-reduction attention.
//!
//! Feature maps are kept channels-last, `(B, h, w, C)`, and only permuted to
//! channels-first around convolutions. Positions are injected once, after the
//! first patch embedding, as a fixed sine/cosine code evaluated at explicit
//! coordinates; this lets the masked pretraining feed a compacted token grid
//! while still telling the encoder where every token originally sat.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{grid_coords, sincos_position_code, Conv2d, LayerNorm, Linear, Mlp, ParamBuilder};

/// Spatial stride of the first patch embedding; later stages halve again.
pub const FIRST_STRIDE: usize = 4;
pub const TOTAL_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidEncoderConfig {
    /// Side of the square patches used as masking units during pretraining.
    pub patch_size: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    pub stage_heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
}

impl PyramidEncoderConfig {
    /// Desk-scale preset: dims 16/32/64/128, one block per stage.
    pub fn tiny() -> Self {
        Self {
            patch_size: 16,
            stage_depths: [1, 1, 1, 1],
            stage_dims: [16, 32, 64, 128],
            stage_heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 2,
        }
    }

    /// PVT-small layout.
    pub fn small() -> Self {
        Self {
            patch_size: 16,
            stage_depths: [3, 4, 6, 3],
            stage_dims: [64, 128, 320, 512],
            stage_heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 8,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dims[3]
    }

    pub fn stage_strides(&self) -> [usize; 4] {
        [4, 8, 16, 32]
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("encoders.pyramid.{k}");
        if self.stage_dims.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(key("stage_dims"), "must be non-decreasing"));
        }
        for s in 0..4 {
            if self.stage_dims[s] == 0 || self.stage_heads[s] == 0 || self.stage_dims[s] % self.stage_heads[s] != 0 {
                return Err(Error::config(
                    key("stage_heads"),
                    format!("stage {s}: dim {} not divisible by {} heads", self.stage_dims[s], self.stage_heads[s]),
                ));
            }
            if self.sr_ratios[s] == 0 {
                return Err(Error::config(key("sr_ratios"), "ratios must be >= 1"));
            }
        }
        if self.stage_dims[0] % 4 != 0 {
            return Err(Error::config(key("stage_dims"), "first stage dim must be divisible by 4"));
        }
        if self.patch_size == 0 || self.patch_size % FIRST_STRIDE != 0 || TOTAL_STRIDE % self.patch_size != 0 {
            return Err(Error::config(
                key("patch_size"),
                format!("{} must be a multiple of {FIRST_STRIDE} dividing {TOTAL_STRIDE}", self.patch_size),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(key("mlp_ratio"), "must be >= 1"));
        }
        Ok(())
    }

    /// Check that an `h × w` input runs through all four stages.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "pyramid input {h}x{w} must be a positive multiple of {TOTAL_STRIDE}"
            )));
        }
        for (s, stride) in self.stage_strides().iter().enumerate() {
            let (sh, sw) = (h / stride, w / stride);
            let r = self.sr_ratios[s];
            if sh % r != 0 || sw % r != 0 {
                return Err(Error::Shape(format!(
                    "stage {s} map {sh}x{sw} not divisible by reduction ratio {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SpatialReductionAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    dim: usize,
}

impl SpatialReductionAttention {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, sr: usize) -> Result<Self> {
        let reduce = if sr > 1 {
            Some((
                Conv2d::new(&pb.pp("sr"), dim, dim, sr, sr, 0, true)?,
                LayerNorm::new(&pb.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&pb.pp("q"), dim, dim)?,
            kv: Linear::new(&pb.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim)?,
            reduce,
            heads,
            dim,
        })
    }

    /// `xs`: `(B, h, w, C)` → `(B, h, w, C)`.
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = xs.dims4()?;
        let n = h * w;
        let dh = self.dim / self.heads;
        let tokens = xs.reshape((b, n, c))?;
        let q = self
            .q
            .forward(&tokens)?
            .reshape((b, n, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?;
        let source = match &self.reduce {
            Some((conv, norm)) => {
                let reduced = conv.forward(&xs.permute((0, 3, 1, 2))?.contiguous()?)?;
                let (_, _, rh, rw) = reduced.dims4()?;
                norm.forward(&reduced.permute((0, 2, 3, 1))?.reshape((b, rh * rw, c))?)?
            }
            None => tokens,
        };
        let m = source.dim(1)?;
        let kv = self
            .kv
            .forward(&source)?
            .reshape((b, m, 2, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let k = kv.get(0)?.contiguous()?;
        let v = kv.get(1)?.contiguous()?;
        let scale = 1.0 / (dh as f64).sqrt();
        let attn = (q.matmul(&k.t()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)?.reshape((b, h, w, c)).map_err(Into::into)
    }
}

/// Pre-norm transformer block with spatial-reduction attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SpatialReductionAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            attn: SpatialReductionAttention::new(&pb.pp("attn"), dim, heads, sr)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    /// `(B, h, w, C)` → same shape.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let xs = (xs + self.attn.forward(&self.norm1.forward(xs)?)?)?;
        let ys = self.mlp.forward(&self.norm2.forward(&xs)?)?;
        Ok((xs + ys)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Stage {
    fn new(pb: &ParamBuilder, cfg: &PyramidEncoderConfig, s: usize) -> Result<Self> {
        let in_ch = if s == 0 { 3 } else { cfg.stage_dims[s - 1] };
        let stride = if s == 0 { FIRST_STRIDE } else { 2 };
        let dim = cfg.stage_dims[s];
        let blocks = (0..cfg.stage_depths[s])
            .map(|i| TransformerBlock::new(&pb.pp(format!("block{i}")), dim, cfg.stage_heads[s], cfg.sr_ratios[s], cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Conv2d::new(&pb.pp("embed"), in_ch, dim, stride, stride, 0, true)?,
            embed_norm: LayerNorm::new(&pb.pp("embed_norm"), dim)?,
            blocks,
            norm: LayerNorm::new(&pb.pp("norm"), dim)?,
        })
    }

    /// Channels-first input → channels-last embedded tokens.
    fn embed(&self, xs_chw: &Tensor) -> Result<Tensor> {
        let ys = self.embed.forward(xs_chw)?.permute((0, 2, 3, 1))?;
        self.embed_norm.forward(&ys)
    }

    fn run_blocks(&self, mut xs: Tensor) -> Result<Tensor> {
        for block in &self.blocks {
            xs = block.forward(&xs)?;
        }
        self.norm.forward(&xs)
    }
}

#[derive(Debug, Clone)]
pub struct PyramidEncoder {
    config: PyramidEncoderConfig,
    stages: Vec<Stage>,
    dtype: DType,
    device: Device,
}

impl PyramidEncoder {
    pub fn new(pb: &ParamBuilder, config: &PyramidEncoderConfig) -> Result<Self> {
        config.validate()?;
        let stages = (0..4)
            .map(|s| Stage::new(&pb.pp(format!("stage{s}")), config, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            stages,
            dtype: pb.dtype(),
            device: pb.device().clone(),
        })
    }

    pub fn config(&self) -> &PyramidEncoderConfig {
        &self.config
    }

    /// First-stage patch embedding: `(B, 3, H, W)` → `(B, H/4, W/4, C1)`.
    /// Each output token depends only on its own 4×4 pixel block.
    pub fn embed_patches(&self, images: &Tensor) -> Result<Tensor> {
        self.stages[0].embed(images)
    }

    /// Run all stages from first-stage tokens `(B, h, w, C1)` whose original
    /// positions (in first-stage token units, row-major) are `coords`, either
    /// shared by the batch (`h·w` entries) or per element (`B·h·w`).
    /// Returns the final map `(B, h/8, w/8, C4)`.
    pub fn forward_tokens(&self, tokens: &Tensor, coords: &[(f64, f64)]) -> Result<Tensor> {
        let (b, h, w, c) = tokens.dims4()?;
        let lead = if coords.len() == h * w {
            1
        } else if coords.len() == b * h * w {
            b
        } else {
            return Err(Error::Shape(format!("{} coordinates for a {b}x{h}x{w} token map", coords.len())));
        };
        let pos = sincos_position_code(coords, c, self.dtype, &self.device)?.reshape((lead, h, w, c))?;
        let mut xs = self.stages[0].run_blocks(tokens.broadcast_add(&pos)?)?;
        for stage in &self.stages[1..] {
            let chw = xs.permute((0, 3, 1, 2))?.contiguous()?;
            xs = stage.run_blocks(stage.embed(&chw)?)?;
        }
        Ok(xs)
    }

    /// Final-stage map for whole images: `(B, 3, H, W)` → `(B, H/32, W/32, C4)`.
    pub fn forward_map(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        self.config.validate_input(h, w)?;
        let tokens = self.embed_patches(images)?;
        self.forward_tokens(&tokens, &grid_coords(h / FIRST_STRIDE, w / FIRST_STRIDE))
    }

    /// Spatially averaged final-stage features `(B, C4)`.
    pub fn forward_pooled(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward_map(images)?.mean((1, 2))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;

    #[test]
    fn final_map_is_one_thirty_second() {
        let vm = VarMap::new();
        let pb = ParamBuilder::new(&vm, 0, DType::F32, &Device::Cpu);
        let enc = PyramidEncoder::new(&pb, &PyramidEncoderConfig::tiny()).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward_map(&x).unwrap().dims(), &[2, 2, 2, 128]);
        // 224 / 32 = 7 for the full-scale input size
        assert_eq!(224 / TOTAL_STRIDE, 7);
        let mut cfg = PyramidEncoderConfig::small();
        cfg.sr_ratios = [8, 4, 2, 1];
        cfg.validate_input(224, 224).unwrap();
    }

    #[test]
    fn rejects_indivisible_inputs_and_bad_configs() {
        let cfg = PyramidEncoderConfig::tiny();
        assert!(cfg.validate_input(48, 48).is_err());
        assert!(cfg.validate_input(32, 32).is_ok());
        let mut bad = cfg.clone();
        bad.stage_heads = [3, 2, 4, 8];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.stage_dims = [16, 8, 64, 128];
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.patch_size = 12;
        assert!(bad.validate().is_err());
    }
}
