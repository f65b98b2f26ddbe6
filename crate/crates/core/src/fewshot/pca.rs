use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal axes of one channel's feature bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPca {
    pub mean: Vec<f64>,
    /// `out_dim` unit vectors of length `D`, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    /// All `D` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl ChannelPca {
    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.in_dim() {
            return Err(Error::Shape(format!("PCA expects {} inputs, got {}", self.in_dim(), z.len())));
        }
        Ok(self
            .components
            .iter()
            .map(|u| u.iter().zip(z.iter().zip(&self.mean)).map(|(a, (x, m))| a * (x - m)).sum())
            .collect())
    }

    pub fn reconstruct(&self, code: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (u, c) in self.components.iter().zip(code) {
            for (o, a) in out.iter_mut().zip(u) {
                *o += c * a;
            }
        }
        out
    }

    /// `(mean (D,), components (D, out_dim))` as constant tensors.
    pub fn tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let d = self.in_dim();
        let k = self.out_dim();
        let mean = Tensor::from_slice(&self.mean, d, device)?.to_dtype(dtype)?;
        let mut cols = vec![0.0; d * k];
        for (j, u) in self.components.iter().enumerate() {
            for (i, a) in u.iter().enumerate() {
                cols[i * k + j] = *a;
            }
        }
        let comps = Tensor::from_vec(cols, (d, k), device)?.to_dtype(dtype)?;
        Ok((mean, comps))
    }
}

/// Per-channel projectors onto `D/2` principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub global: ChannelPca,
    pub local: ChannelPca,
    pub fit_provenance: String,
}

impl PcaProjector {
    pub fn dim(&self) -> usize {
        self.global.in_dim()
    }
}

/// Centre, eigendecompose the covariance (normalised by `M − 1`) and keep
/// the `out_dim` leading axes. Each axis is signed so its largest-magnitude
/// entry is positive.
pub fn fit_channel(bank: &[Vec<f64>], out_dim: usize) -> Result<ChannelPca> {
    let m = bank.len();
    let d = bank.first().map(Vec::len).unwrap_or(0);
    if d == 0 {
        return Err(Error::InvalidArgument("PCA feature bank is empty".into()));
    }
    if bank.iter().any(|row| row.len() != d) {
        return Err(Error::Shape("PCA feature bank rows differ in length".into()));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!("PCA output dim {out_dim} must lie in 1..={d}")));
    }
    if m < out_dim {
        return Err(Error::InvalidArgument(format!(
            "PCA bank has {m} samples but {out_dim} components were requested; shrink the embedding dimension or grow the bank"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in bank {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centred = DMatrix::from_fn(m, d, |i, j| bank[i][j] - mean[j]);
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let cov = (centred.transpose() * &centred) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let components = order[..out_dim]
        .iter()
        .map(|&i| {
            let mut u: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = u
                .iter()
                .enumerate()
                .fold(0, |best, (j, x)| if x.abs() > u[best].abs() { j } else { best });
            if u[lead] < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
            }
            u
        })
        .collect();
    Ok(ChannelPca {
        mean,
        components,
        eigenvalues,
    })
}

/// Fit both channels' projectors on a shared bank.
pub fn fit_pca(
    bank_g: &[Vec<f64>],
    bank_l: &[Vec<f64>],
    out_dim: usize,
    provenance: impl Into<String>,
) -> Result<PcaProjector> {
    if bank_g.len() != bank_l.len() {
        return Err(Error::Shape(format!(
            "global bank has {} rows, local bank {}",
            bank_g.len(),
            bank_l.len()
        )));
    }
    Ok(PcaProjector {
        global: fit_channel(bank_g, out_dim)?,
        local: fit_channel(bank_l, out_dim)?,
        fit_provenance: provenance.into(),
    })
}
