use candle_core::{DType, Module, Tensor, Var, D};
use candle_nn::Conv2dConfig;

use super::params::{Init, ParamBuilder};
use crate::error::Result;

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(pb, in_dim, out_dim, Init::Normal { std: 0.02 })
    }

    pub fn with_init(pb: &ParamBuilder, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let w = pb.get((out_dim, in_dim), "weight", init)?;
        let b = pb.get(out_dim, "bias", Init::Zeros)?;
        Ok(Self {
            inner: candle_nn::Linear::new(w, Some(b)),
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.inner.bias()
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(xs)?)
    }
}

/// Layer normalisation over the last dimension, written with primitive ops so
/// it differentiates in every dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.get(dim, "weight", Init::Ones)?,
            beta: pb.get(dim, "bias", Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let xc = xs.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    inner: candle_nn::Conv2d,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = pb.get(
            (out_ch, in_ch, kernel, kernel),
            "weight",
            Init::Normal {
                std: (2.0 / fan_in).sqrt(),
            },
        )?;
        let b = if bias {
            Some(pb.get(out_ch, "bias", Init::Zeros)?)
        } else {
            None
        };
        let cfg = Conv2dConfig {
            padding,
            stride,
            dilation: 1,
            groups: 1,
            cudnn_fwd_algo: None,
        };
        Ok(Self {
            inner: candle_nn::Conv2d::new(w, b, cfg),
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(xs)?)
    }
}

/// Batch normalisation over `(B, C, H, W)` with running statistics stored as
/// (non-optimised) variables so they travel with checkpoints.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let gamma = pb.get(channels, "weight", Init::Ones)?;
        let beta = pb.get(channels, "bias", Init::Zeros)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: pb.get_var(channels, "running_mean", Init::Zeros)?,
            running_var: pb.get_var(channels, "running_var", Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.gamma.dims1()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let mean = xs.mean_keepdim((0, 2, 3))?;
            let var = xs.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let (b, _, h, w) = xs.dims4()?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (&var * (n / (n - 1.0)))? } else { var.clone() };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (unbiased.detach().flatten_all()? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let xn = xs
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(xs)?.gelu()?)
    }
}

/// Fixed 2-d sine/cosine position code evaluated at arbitrary `(row, col)`
/// coordinates. Returns `(len(coords), dim)`; `dim` must be divisible by 4.
pub fn sincos_position_code(
    coords: &[(f64, f64)],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(crate::Error::InvalidArgument(format!(
            "position code dim {dim} must be divisible by 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(coords.len() * dim);
    for &(r, c) in coords {
        for &pos in &[r, c] {
            out.extend(omega.iter().map(|w| (pos * w).sin()));
            out.extend(omega.iter().map(|w| (pos * w).cos()));
        }
    }
    Ok(Tensor::from_vec(out, (coords.len(), dim), device)?.to_dtype(dtype)?)
}

/// Row-major coordinates of an `h × w` grid.
pub fn grid_coords(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h)
        .flat_map(|i| (0..w).map(move |j| (i as f64, j as f64)))
        .collect()
}
