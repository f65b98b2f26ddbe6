use candle_core::Tensor;

use crate::error::{Error, Result};

/// Channel-to-space rearrangement:
/// `out[b, c, r·i + di, r·j + dj] = x[b, c·r² + di·r + dj, i, j]`.
pub fn pixel_shuffle_upsample(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by r² = {}", r * r)));
    }
    let c_out = c / (r * r);
    Ok(x.reshape((b, c_out, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c_out, h * r, w * r))?)
}

/// Inverse of [`pixel_shuffle_upsample`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("{h}x{w} map not divisible by r = {r}")));
    }
    Ok(x.reshape((b, c, h / r, r, w / r, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * r * r, h / r, w / r))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn enumerated_r2() {
        let x = Tensor::new(&[1f32, 2.0, 3.0, 4.0], &Device::Cpu).unwrap().reshape((1, 4, 1, 1)).unwrap();
        let y = pixel_shuffle_upsample(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn r1_is_identity_and_bad_channels_fail() {
        let x = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((1, 6, 2, 2)).unwrap();
        let y = pixel_shuffle_upsample(&x, 1).unwrap();
        assert_eq!(x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(pixel_shuffle_upsample(&x, 2).is_err());
        assert!(pixel_unshuffle(&Tensor::zeros((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap(), 2).is_err());
    }

    #[test]
    fn matches_index_formula() {
        let (b, c, h, w, r) = (2, 2 * 9, 2, 3, 3);
        let x = Tensor::arange(0f32, (b * c * h * w) as f32, &Device::Cpu).unwrap().reshape((b, c, h, w)).unwrap();
        let y = pixel_shuffle_upsample(&x, r).unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let co = c / (r * r);
        for bi in 0..b {
            for ci in 0..co {
                for i in 0..h {
                    for j in 0..w {
                        for di in 0..r {
                            for dj in 0..r {
                                let src = ((bi * c + ci * r * r + di * r + dj) * h + i) * w + j;
                                let dst = ((bi * co + ci) * h * r + r * i + di) * w * r + r * j + dj;
                                assert_eq!(yv[dst], xv[src]);
                            }
                        }
                    }
                }
            }
        }
    }
}
