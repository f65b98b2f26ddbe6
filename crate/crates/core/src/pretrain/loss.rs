use candle_core::{Device, Tensor};

use super::mask::{LossScope, MaskPlan};
use crate::error::{Error, Result};

/// Pixels of the patches the encoder did not see, paired with their
/// reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTarget {
    pub target_pixels: Vec<f64>,
    pub predicted_pixels: Vec<f64>,
    pub n_missing: usize,
}

impl ReconTarget {
    pub fn new(target_pixels: Vec<f64>, predicted_pixels: Vec<f64>) -> Result<Self> {
        if target_pixels.len() != predicted_pixels.len() {
            return Err(Error::Shape(format!(
                "target has {} pixels, prediction {}",
                target_pixels.len(),
                predicted_pixels.len()
            )));
        }
        let n_missing = target_pixels.len();
        Ok(Self {
            target_pixels,
            predicted_pixels,
            n_missing,
        })
    }

    /// Collect missing-patch pixels from `(B, G, E)` patch tensors.
    pub fn from_patches(predicted: &Tensor, target: &Tensor, plans: &[MaskPlan], scope: LossScope) -> Result<Self> {
        let pred = predicted.to_dtype(candle_core::DType::F64)?.to_vec3::<f64>()?;
        let tgt = target.to_dtype(candle_core::DType::F64)?.to_vec3::<f64>()?;
        if pred.len() != plans.len() || tgt.len() != plans.len() {
            return Err(Error::Shape("one mask plan per batch element required".into()));
        }
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (b, plan) in plans.iter().enumerate() {
            for (g, missing) in plan.loss_mask(scope).into_iter().enumerate() {
                if missing {
                    t.extend_from_slice(&tgt[b][g]);
                    p.extend_from_slice(&pred[b][g]);
                }
            }
        }
        Self::new(t, p)
    }
}

/// Mean squared error over the missing pixels.
pub fn mae_loss(target: &ReconTarget) -> Result<f64> {
    if target.target_pixels.len() != target.predicted_pixels.len()
        || target.n_missing != target.target_pixels.len()
    {
        return Err(Error::Shape(format!(
            "reconstruction target inconsistent: {} targets, {} predictions, n_missing {}",
            target.target_pixels.len(),
            target.predicted_pixels.len(),
            target.n_missing
        )));
    }
    if target.n_missing == 0 {
        return Err(Error::InvalidArgument("no missing pixels: reconstruction loss has no signal".into()));
    }
    let sum: f64 = target
        .target_pixels
        .iter()
        .zip(&target.predicted_pixels)
        .map(|(y, y_hat)| (y - y_hat).powi(2))
        .sum();
    Ok(sum / target.n_missing as f64)
}

/// `(B, G)` 0/1 weights for the missing patches of each plan.
pub fn loss_weights(plans: &[MaskPlan], scope: LossScope, device: &Device) -> Result<Tensor> {
    let g = plans.first().map(|p| p.n_patches()).unwrap_or(0);
    let w: Vec<f32> = plans
        .iter()
        .flat_map(|p| p.loss_mask(scope).into_iter().map(|m| if m { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(w, (plans.len(), g), device)?)
}

/// Differentiable counterpart of [`mae_loss`] on `(B, G, E)` patch tensors.
pub fn masked_mse(predicted: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_, _, e) = predicted.dims3()?;
    let weights = weights.to_dtype(predicted.dtype())?;
    let n = weights.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if n == 0.0 {
        return Err(Error::InvalidArgument("no missing patches: reconstruction loss has no signal".into()));
    }
    let per_patch = (predicted - target)?.sqr()?.sum(2)?;
    Ok(((per_patch * weights)?.sum_all()? / (n * e as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn hand_cases() {
        let t = ReconTarget::new(vec![0.3, 0.4], vec![0.3, 0.4]).unwrap();
        assert_eq!(mae_loss(&t).unwrap(), 0.0);
        assert_eq!(mae_loss(&ReconTarget::new(vec![0.0], vec![1.0]).unwrap()).unwrap(), 1.0);
        assert_eq!(mae_loss(&ReconTarget::new(vec![0.0, 0.0], vec![1.0, 3.0]).unwrap()).unwrap(), 5.0);
        assert!(mae_loss(&ReconTarget::new(vec![], vec![]).unwrap()).is_err());
        assert!(ReconTarget::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn tensor_loss_matches_scalar_loss() {
        let dev = Device::Cpu;
        let plans = vec![
            MaskPlan { grid_h: 2, grid_w: 2, kept: vec![3], sm_masked: vec![] },
            MaskPlan { grid_h: 2, grid_w: 2, kept: vec![0], sm_masked: vec![0] },
        ];
        let pred = Tensor::arange(0f64, 24.0, &dev).unwrap().reshape((2, 4, 3)).unwrap();
        let tgt = (pred.sin().unwrap() * 3.0).unwrap();
        for scope in [LossScope::Missing, LossScope::DroppedOnly] {
            let w = loss_weights(&plans, scope, &dev).unwrap();
            let a = masked_mse(&pred, &tgt, &w).unwrap().to_scalar::<f64>().unwrap();
            let b = mae_loss(&ReconTarget::from_patches(&pred, &tgt, &plans, scope).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let zero = Tensor::zeros((2, 4), DType::F32, &dev).unwrap();
        assert!(masked_mse(&pred, &tgt, &zero).is_err());
    }
}
