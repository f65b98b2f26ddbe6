use candle_core::{DType, Device, Tensor};

use super::head::Scale;
use super::pca::PcaProjector;
use crate::error::{Error, Result};

/// Global, local and mixed features of one image. `z_mix` is empty when no
/// projector has been fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeature {
    pub z_g: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_mix: Vec<f64>,
}

impl MultiScaleFeature {
    pub fn without_mix(z_g: Vec<f64>, z_l: Vec<f64>) -> Self {
        Self {
            z_g,
            z_l,
            z_mix: Vec::new(),
        }
    }

    pub fn get(&self, scale: Scale) -> &[f64] {
        match scale {
            Scale::Global => &self.z_g,
            Scale::Local => &self.z_l,
            Scale::Mix => &self.z_mix,
        }
    }
}

/// Reduce each channel to `D/2` principal coordinates and concatenate.
pub fn mix_features(z_g: &[f64], z_l: &[f64], proj: &PcaProjector) -> Result<MultiScaleFeature> {
    if z_g.len() != proj.global.in_dim() || z_l.len() != proj.local.in_dim() {
        return Err(Error::Shape(format!(
            "features ({}, {}) do not match projector input {}",
            z_g.len(),
            z_l.len(),
            proj.global.in_dim()
        )));
    }
    let mut z_mix = proj.global.project(z_g)?;
    z_mix.extend(proj.local.project(z_l)?);
    Ok(MultiScaleFeature {
        z_g: z_g.to_vec(),
        z_l: z_l.to_vec(),
        z_mix,
    })
}

/// Differentiable counterpart of [`mix_features`] on `(B, D)` batches, with
/// the projector held constant.
pub fn mix_tensors(z_g: &Tensor, z_l: &Tensor, proj: &PcaProjector) -> Result<Tensor> {
    let (dtype, device) = (z_g.dtype(), z_g.device());
    let (mg, cg) = proj.global.tensors(dtype, device)?;
    let (ml, cl) = proj.local.tensors(dtype, device)?;
    let pg = z_g.broadcast_sub(&mg)?.matmul(&cg)?;
    let pl = z_l.broadcast_sub(&ml)?.matmul(&cl)?;
    Ok(Tensor::cat(&[&pg, &pl], 1)?)
}

/// Per-class, per-scale prototypes in episode label order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    /// `protos[c] = [P_G, P_L, P_Mix]`.
    pub protos: Vec<[Vec<f64>; 3]>,
}

impl PrototypeMatrix {
    pub fn n_way(&self) -> usize {
        self.protos.len()
    }

    pub fn get(&self, class: usize, scale: Scale) -> &[f64] {
        &self.protos[class][scale.index()]
    }
}

/// Check that labels cover `0..N` with equal counts; returns `(N, K)`.
pub fn check_support_labels(labels: &[usize]) -> Result<(usize, usize)> {
    let n = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    let mut counts = vec![0usize; n];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::InvalidArgument(format!("class {c} has no support samples")));
    }
    let k = counts[0];
    if counts.iter().any(|&x| x != k) {
        return Err(Error::InvalidArgument(format!("unequal support counts per class: {counts:?}")));
    }
    Ok((n, k))
}

/// Mean of each class's support features at every scale.
pub fn compute_prototypes(support: &[MultiScaleFeature], labels: &[usize]) -> Result<PrototypeMatrix> {
    if support.len() != labels.len() {
        return Err(Error::Shape(format!("{} features, {} labels", support.len(), labels.len())));
    }
    let (n, k) = check_support_labels(labels)?;
    let mut protos: Vec<[Vec<f64>; 3]> = (0..n)
        .map(|_| Scale::ALL.map(|s| vec![0.0; support[0].get(s).len()]))
        .collect();
    for (f, &l) in support.iter().zip(labels) {
        for s in Scale::ALL {
            let v = f.get(s);
            if v.len() != protos[l][s.index()].len() {
                return Err(Error::Shape(format!("{s} features differ in length across the support set")));
            }
            for (p, x) in protos[l][s.index()].iter_mut().zip(v) {
                *p += x;
            }
        }
    }
    for row in &mut protos {
        for v in row.iter_mut() {
            v.iter_mut().for_each(|p| *p /= k as f64);
        }
    }
    Ok(PrototypeMatrix { protos })
}

/// `(N, S)` averaging matrix: row `c` holds `1/K` at the support positions
/// of class `c`.
pub fn averaging_matrix(labels: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let (n, k) = check_support_labels(labels)?;
    let s = labels.len();
    let mut a = vec![0.0f64; n * s];
    for (i, &l) in labels.iter().enumerate() {
        a[l * s + i] = 1.0 / k as f64;
    }
    Ok(Tensor::from_vec(a, (n, s), device)?.to_dtype(dtype)?)
}
