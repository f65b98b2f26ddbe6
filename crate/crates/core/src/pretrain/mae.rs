//! Masked autoencoder around the pyramid encoder.
//!
//! The encoder sees a compact token map: for every 2×2 cell of masking
//! patches, the first-stage tokens of the kept patch are placed side by side,
//! giving a regular grid half the original size. After the four stages the
//! latent is widened by a linear layer and pixel-shuffled back onto the
//! half-resolution cell grid, scattered into the full patch grid next to
//! decoder mask tokens, and decoded into per-patch pixels.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_weights, masked_mse};
use super::mask::{assemble_encoder_input, secondary_mask, uniform_sample_mask, LossScope, MaskPlan};
use super::shuffle::pixel_shuffle_upsample;
use crate::encoders::{PyramidEncoder, PyramidEncoderConfig, TransformerBlock, FIRST_STRIDE, PYRAMID_PREFIX, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{grid_coords, sincos_position_code, Init, LayerNorm, Linear, ParamBuilder};

pub const DECODER_PREFIX: &str = "mae";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// PixelShuffle factor from the latent grid to the cell grid; must be
    /// `32 / patch_size`.
    pub upsample_factor: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    2
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        Self {
            depth: 1,
            dim: 64,
            heads: 2,
            upsample_factor: 2,
            mlp_ratio: 2,
        }
    }

    /// MAE-base style decoder for 16-pixel patches.
    pub fn base() -> Self {
        Self {
            depth: 8,
            dim: 512,
            heads: 16,
            upsample_factor: 2,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self, encoder: &PyramidEncoderConfig) -> Result<()> {
        let key = |k: &str| format!("pretrain.decoder.{k}");
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::config(key("dim"), format!("{} must be a positive multiple of 4", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(key("heads"), format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(key("mlp_ratio"), "must be >= 1"));
        }
        let expected = TOTAL_STRIDE / encoder.patch_size.max(1);
        if self.upsample_factor != expected {
            return Err(Error::config(
                key("upsample_factor"),
                format!(
                    "{} does not restore the cell grid; patch size {} needs {expected}",
                    self.upsample_factor, encoder.patch_size
                ),
            ));
        }
        Ok(())
    }
}

/// `(B, 3, H, W)` → `(B, G, P·P·3)`, patches row-major, pixels `(y, x, c)`.
pub fn patchify(images: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible into {p}-pixel patches")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(images
        .permute((0, 2, 3, 1))?
        .reshape(vec![b, gh, p, gw, p, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((b, gh * gw, p * p * c))?)
}

/// Inverse of [`patchify`] for a `gh × gw` grid of 3-channel patches.
pub fn unpatchify(patches: &Tensor, p: usize, gh: usize, gw: usize) -> Result<Tensor> {
    let (b, g, e) = patches.dims3()?;
    if g != gh * gw || e != p * p * 3 {
        return Err(Error::Shape(format!("{g} patches of width {e} do not form a {gh}x{gw} grid of {p}px")));
    }
    Ok(patches
        .reshape(vec![b, gh, gw, p, p, 3])?
        .permute(vec![0, 5, 1, 3, 2, 4])?
        .reshape((b, 3, gh * p, gw * p))?)
}

/// Draw uniform-sampling plus secondary-masking plans for a batch.
pub fn sample_plans<R: Rng + ?Sized>(
    batch: usize,
    grid_h: usize,
    grid_w: usize,
    sm_ratio: f64,
    rng: &mut R,
) -> Result<Vec<MaskPlan>> {
    (0..batch)
        .map(|_| {
            let plan = uniform_sample_mask(grid_h, grid_w, rng)?;
            secondary_mask(&plan, sm_ratio, rng)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    encoder: PyramidEncoder,
    decoder_config: DecoderConfig,
    enc_mask_token: Tensor,
    latent_proj: Linear,
    dec_mask_token: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    pred: Linear,
    dtype: DType,
    device: Device,
}

impl MaskedAutoencoder {
    /// The encoder is registered under [`PYRAMID_PREFIX`] so its weights load
    /// straight into the global channel of the few-shot model.
    pub fn new(pb: &ParamBuilder, encoder: &PyramidEncoderConfig, decoder: &DecoderConfig) -> Result<Self> {
        encoder.validate()?;
        decoder.validate(encoder)?;
        let enc = PyramidEncoder::new(&pb.pp(PYRAMID_PREFIX), encoder)?;
        let d = pb.pp(DECODER_PREFIX);
        let c1 = encoder.stage_dims[0];
        let r = decoder.upsample_factor;
        let p = encoder.patch_size;
        let blocks = (0..decoder.depth)
            .map(|i| TransformerBlock::new(&d.pp(format!("block{i}")), decoder.dim, decoder.heads, 1, decoder.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder: enc,
            decoder_config: decoder.clone(),
            enc_mask_token: d.get(c1, "enc_mask_token", Init::Normal { std: 0.02 })?,
            latent_proj: Linear::new(&d.pp("latent_proj"), encoder.out_dim(), r * r * decoder.dim)?,
            dec_mask_token: d.get(decoder.dim, "dec_mask_token", Init::Normal { std: 0.02 })?,
            blocks,
            norm: LayerNorm::new(&d.pp("norm"), decoder.dim)?,
            pred: Linear::new(&d.pp("pred"), decoder.dim, p * p * 3)?,
            dtype: pb.dtype(),
            device: pb.device().clone(),
        })
    }

    pub fn encoder(&self) -> &PyramidEncoder {
        &self.encoder
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.decoder_config
    }

    pub fn patch_size(&self) -> usize {
        self.encoder.config().patch_size
    }

    /// Masking inputs must halve into a map the pyramid can process, i.e.
    /// sides divisible by 64 for the default reduction ratios.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let p = self.patch_size();
        if h % (2 * p) != 0 || w % (2 * p) != 0 {
            return Err(Error::Shape(format!("{h}x{w} input does not tile into 2x2 cells of {p}px patches")));
        }
        self.encoder
            .config()
            .validate_input(h / 2, w / 2)
            .map_err(|e| Error::Shape(format!("masked {h}x{w} input leaves a compact map the encoder cannot take: {e}")))
    }

    /// Encode the kept patches: `(B, 3, H, W)` → latent `(B, H/64, W/64, C4)`.
    pub fn encode(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let (b, _, h, w) = images.dims4()?;
        self.validate_input(h, w)?;
        let p = self.patch_size();
        let q = p / FIRST_STRIDE;
        let (gh, gw) = (h / p, w / p);
        if plans.len() != b || plans.iter().any(|pl| pl.grid_h != gh || pl.grid_w != gw) {
            return Err(Error::Shape(format!("mask plans do not match a batch of {b} on a {gh}x{gw} grid")));
        }
        let tokens = self.encoder.embed_patches(images)?;
        let c1 = tokens.dim(3)?;
        // (B, G, q·q·C1): first-stage tokens grouped by masking patch
        let grouped = tokens
            .reshape(vec![b, gh, q, gw, q, c1])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .reshape((b, gh * gw, q * q * c1))?;
        let token = self.enc_mask_token.unsqueeze(0)?.repeat((q * q, 1))?.flatten_all()?;
        let compact = assemble_encoder_input(&grouped, plans, &token)?;
        let (ch, cw) = (gh / 2, gw / 2);
        let map = compact
            .reshape(vec![b, ch, cw, q, q, c1])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .reshape((b, ch * q, cw * q, c1))?;
        let coords = compact_coords(plans, q);
        self.encoder.forward_tokens(&map, &coords)
    }

    /// Latent `(B, h, w, C4)` → per-patch pixel predictions `(B, G, P·P·3)`
    /// for every patch of the full grid.
    pub fn decode_and_reconstruct(&self, latent: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let (b, lh, lw, _) = latent.dims4()?;
        let r = self.decoder_config.upsample_factor;
        let dim = self.decoder_config.dim;
        let first = plans
            .first()
            .ok_or_else(|| Error::Shape("no mask plans".into()))?;
        let (gh, gw) = (first.grid_h, first.grid_w);
        if plans.len() != b || lh * r != gh / 2 || lw * r != gw / 2 {
            return Err(Error::Shape(format!(
                "latent {lh}x{lw} with upsample {r} does not restore the {}x{} cell grid",
                gh / 2,
                gw / 2
            )));
        }
        let wide = self.latent_proj.forward(latent)?.permute((0, 3, 1, 2))?.contiguous()?;
        let cells = pixel_shuffle_upsample(&wide, r)?; // (B, dim, gh/2, gw/2)
        let n_cells = (gh / 2) * (gw / 2);
        let g = gh * gw;
        let kept = cells.permute((0, 2, 3, 1))?.reshape((b, n_cells, dim))?;
        let fill = self
            .dec_mask_token
            .reshape((1, 1, dim))?
            .broadcast_as((b, g - n_cells, dim))?;
        let seq = Tensor::cat(&[&kept, &fill], 1)?.reshape((b * g, dim))?;
        let mut order = Vec::with_capacity(b * g);
        for (i, plan) in plans.iter().enumerate() {
            order.extend(plan.restore_order().into_iter().map(|j| (i * g + j) as u32));
        }
        let order = Tensor::from_vec(order, b * g, &self.device)?;
        let full = seq.index_select(&order, 0)?.reshape((b, gh, gw, dim))?;
        let pos = sincos_position_code(&grid_coords(gh, gw), dim, self.dtype, &self.device)?.reshape((1, gh, gw, dim))?;
        let mut xs = full.broadcast_add(&pos)?;
        for block in &self.blocks {
            xs = block.forward(&xs)?;
        }
        let xs = self.norm.forward(&xs)?;
        Ok(self.pred.forward(&xs)?.reshape((b, g, self.patch_size() * self.patch_size() * 3))?)
    }

    /// Predictions `(B, G, P·P·3)` and the differentiable reconstruction loss.
    pub fn forward_loss(&self, images: &Tensor, plans: &[MaskPlan], scope: LossScope) -> Result<(Tensor, Tensor)> {
        let latent = self.encode(images, plans)?;
        let pred = self.decode_and_reconstruct(&latent, plans)?;
        let target = patchify(images, self.patch_size())?;
        let weights = loss_weights(plans, scope, &self.device)?;
        let loss = masked_mse(&pred, &target, &weights)?;
        Ok((pred, loss))
    }

    /// Full-image reconstruction `(B, 3, H, W)`: predicted pixels everywhere.
    pub fn reconstruct(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let p = self.patch_size();
        let pred = self.decode_and_reconstruct(&self.encode(images, plans)?, plans)?;
        unpatchify(&pred, p, h / p, w / p)
    }
}

/// Original first-stage coordinates of every token on the compact map, per
/// batch element.
fn compact_coords(plans: &[MaskPlan], q: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for plan in plans {
        let (ch, cw) = (plan.compact_h(), plan.compact_w());
        for cr in 0..ch {
            for u in 0..q {
                for cc in 0..cw {
                    let k = plan.kept[cr * cw + cc];
                    let (pr, pc) = (k / plan.grid_w, k % plan.grid_w);
                    for v in 0..q {
                        out.push(((pr * q + u) as f64, (pc * q + v) as f64));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use candle_nn::VarMap;

    fn model(vm: &VarMap, depth: usize) -> MaskedAutoencoder {
        let pb = ParamBuilder::new(vm, 0, DType::F32, &Device::Cpu);
        let mut dec = DecoderConfig::tiny();
        dec.depth = depth;
        MaskedAutoencoder::new(&pb, &PyramidEncoderConfig::tiny(), &dec).unwrap()
    }

    #[test]
    fn patchify_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 8.0 * 12.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 8, 12))
            .unwrap();
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.dims(), &[2, 6, 48]);
        // patch 1 (row 0, col 1), pixel (0,0), channel 2
        let v = p.to_vec3::<f32>().unwrap();
        assert_eq!(v[0][1][2], (2 * 8 * 12 + 4) as f32);
        let back = unpatchify(&p, 4, 2, 3).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn reconstruction_matches_image_shape() {
        for depth in [0, 1] {
            let vm = VarMap::new();
            let m = model(&vm, depth);
            let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
            let plans = sample_plans(2, 4, 4, 0.25, &mut rng_from_seed(0)).unwrap();
            assert_eq!(m.reconstruct(&x, &plans).unwrap().dims(), &[2, 3, 64, 64]);
            let (pred, loss) = m.forward_loss(&x, &plans, LossScope::Missing).unwrap();
            assert_eq!(pred.dims(), &[2, 16, 768]);
            assert!(loss.to_scalar::<f32>().unwrap().is_finite());
        }
    }

    #[test]
    fn rejects_inputs_that_do_not_compact() {
        let vm = VarMap::new();
        let m = model(&vm, 1);
        assert!(m.validate_input(32, 32).is_err());
        assert!(m.validate_input(64, 64).is_ok());
        let mut dec = DecoderConfig::tiny();
        dec.upsample_factor = 4;
        assert!(dec.validate(&PyramidEncoderConfig::tiny()).is_err());
    }

    #[test]
    fn compact_coords_follow_kept_patches() {
        let plan = MaskPlan { grid_h: 2, grid_w: 2, kept: vec![3], sm_masked: vec![] };
        let c = compact_coords(&[plan], 2);
        assert_eq!(c, vec![(2.0, 2.0), (2.0, 3.0), (3.0, 2.0), (3.0, 3.0)]);
    }

    #[test]
    fn hidden_patch_content_does_not_reach_kept_predictions_through_encoder() {
        // changing pixels of a dropped patch must not change the latent
        let vm = VarMap::new();
        let m = model(&vm, 1);
        let plans = sample_plans(1, 4, 4, 0.0, &mut rng_from_seed(3)).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let dropped = (0..16).find(|&p| !plans[0].is_kept(p)).unwrap();
        let (r, c) = (dropped / 4, dropped % 4);
        let mut v = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for ch in 0..3 {
            for y in 0..16 {
                for xx in 0..16 {
                    v[(ch * 64 + r * 16 + y) * 64 + c * 16 + xx] = 0.5;
                }
            }
        }
        let x2 = Tensor::from_vec(v, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let a = m.encode(&x, &plans).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m.encode(&x2, &plans).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
