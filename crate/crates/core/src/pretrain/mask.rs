//! Uniform sampling and secondary masking.

use candle_core::{Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default fraction of kept patches that are secondarily masked.
pub const DEFAULT_SM_RATIO: f64 = 0.25;

/// Masking state for one image on a `grid_h × grid_w` patch grid.
///
/// `kept[c]` is the patch kept from the `c`-th 2×2 cell (cells in row-major
/// order); `sm_masked` is the sorted subset of `kept` whose embeddings are
/// replaced by the shared mask token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub kept: Vec<usize>,
    pub sm_masked: Vec<usize>,
}

/// Which patches enter the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScope {
    /// Everything the encoder did not see: dropped patches and
    /// secondarily masked ones.
    #[default]
    Missing,
    /// Only the patches dropped by uniform sampling.
    DroppedOnly,
}

impl std::str::FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "missing" => Ok(LossScope::Missing),
            "dropped-only" => Ok(LossScope::DroppedOnly),
            o => Err(Error::InvalidArgument(format!("unknown loss scope `{o}`"))),
        }
    }
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn compact_h(&self) -> usize {
        self.grid_h / 2
    }

    pub fn compact_w(&self) -> usize {
        self.grid_w / 2
    }

    /// Cell `(row, col)` on the half-resolution grid that contains `patch`.
    pub fn cell_of(&self, patch: usize) -> (usize, usize) {
        ((patch / self.grid_w) / 2, (patch % self.grid_w) / 2)
    }

    pub fn is_kept(&self, patch: usize) -> bool {
        let (r, c) = self.cell_of(patch);
        self.kept[r * self.compact_w() + c] == patch
    }

    pub fn is_sm_masked(&self, patch: usize) -> bool {
        self.sm_masked.binary_search(&patch).is_ok()
    }

    /// Per-patch loss weights (1 = reconstructed, 0 = ignored).
    pub fn loss_mask(&self, scope: LossScope) -> Vec<bool> {
        (0..self.n_patches())
            .map(|p| match scope {
                LossScope::Missing => !self.is_kept(p) || self.is_sm_masked(p),
                LossScope::DroppedOnly => !self.is_kept(p),
            })
            .collect()
    }

    /// For each full-grid position, its index into `[kept..., dropped...]`,
    /// where dropped patches appear in ascending order.
    pub fn restore_order(&self) -> Vec<usize> {
        let n_kept = self.kept.len();
        let mut next_dropped = n_kept;
        (0..self.n_patches())
            .map(|p| {
                let (r, c) = self.cell_of(p);
                let cell = r * self.compact_w() + c;
                if self.kept[cell] == p {
                    cell
                } else {
                    next_dropped += 1;
                    next_dropped - 1
                }
            })
            .collect()
    }
}

fn check_grid(grid_h: usize, grid_w: usize) -> Result<()> {
    if grid_h == 0 || grid_w == 0 || grid_h % 2 != 0 || grid_w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch grid {grid_h}x{grid_w} must have positive even sides"
        )));
    }
    Ok(())
}

/// Keep exactly one patch, chosen uniformly, from every 2×2 cell.
pub fn uniform_sample_mask<R: Rng + ?Sized>(grid_h: usize, grid_w: usize, rng: &mut R) -> Result<MaskPlan> {
    check_grid(grid_h, grid_w)?;
    let mut kept = Vec::with_capacity(grid_h * grid_w / 4);
    for r in 0..grid_h / 2 {
        for c in 0..grid_w / 2 {
            let pick = rng.random_range(0..4usize);
            kept.push((2 * r + pick / 2) * grid_w + 2 * c + pick % 2);
        }
    }
    Ok(MaskPlan {
        grid_h,
        grid_w,
        kept,
        sm_masked: Vec::new(),
    })
}

/// Mark `floor(ratio · |kept|)` kept patches, chosen uniformly, as masked.
pub fn secondary_mask<R: Rng + ?Sized>(plan: &MaskPlan, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !plan.sm_masked.is_empty() {
        return Err(Error::InvalidArgument("plan already has secondary masking".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("secondary mask ratio {ratio} must lie in [0, 1)")));
    }
    let n = (ratio * plan.kept.len() as f64).floor() as usize;
    let mut sm: Vec<usize> = sample_indices(rng, plan.kept.len(), n)
        .into_iter()
        .map(|i| plan.kept[i])
        .collect();
    sm.sort_unstable();
    Ok(MaskPlan {
        sm_masked: sm,
        ..plan.clone()
    })
}

/// Gather the kept patch embeddings onto the half-resolution grid.
///
/// `patch_embeddings` is `(B, G, E)` in row-major patch order, one plan per
/// batch element, `mask_token` is `(E,)`. Returns `(B, grid_h/2, grid_w/2, E)`
/// where secondarily masked positions hold `mask_token`.
pub fn assemble_encoder_input(patch_embeddings: &Tensor, plans: &[MaskPlan], mask_token: &Tensor) -> Result<Tensor> {
    let (b, g, e) = patch_embeddings.dims3()?;
    if plans.len() != b {
        return Err(Error::Shape(format!("{} mask plans for a batch of {b}", plans.len())));
    }
    if mask_token.dims() != [e] {
        return Err(Error::Shape(format!("mask token {:?}, embeddings have width {e}", mask_token.dims())));
    }
    let first = &plans[0];
    let (ch, cw) = (first.compact_h(), first.compact_w());
    let mut gather = Vec::with_capacity(b * ch * cw);
    let mut masked = Vec::with_capacity(b * ch * cw);
    for (i, plan) in plans.iter().enumerate() {
        if plan.n_patches() != g || plan.grid_h != first.grid_h || plan.kept.len() != ch * cw {
            return Err(Error::Shape(format!(
                "plan {i} ({}x{}, {} kept) does not match {g} patch embeddings",
                plan.grid_h,
                plan.grid_w,
                plan.kept.len()
            )));
        }
        for &k in &plan.kept {
            gather.push((i * g + k) as u32);
            masked.push(if plan.is_sm_masked(k) { 1.0f32 } else { 0.0 });
        }
    }
    let device: &Device = patch_embeddings.device();
    let n = gather.len();
    let idx = Tensor::from_vec(gather, n, device)?;
    let kept = patch_embeddings.reshape((b * g, e))?.index_select(&idx, 0)?;
    let m = Tensor::from_vec(masked, (n, 1), device)?.to_dtype(kept.dtype())?;
    let keep = (1.0 - &m)?;
    let out = (kept.broadcast_mul(&keep)? + m.broadcast_mul(&mask_token.unsqueeze(0)?)?)?;
    Ok(out.reshape((b, ch, cw, e))?)
}
