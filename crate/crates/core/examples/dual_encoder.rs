//! The two embedding channels on a batch of synthetic images.

use candle_core::{DType, Device, Tensor, D};
use dcpn::data::generate_synthetic_corpus;
use dcpn::encoders::{DualEncoder, DualEncoderConfig};
use dcpn::nn::ParamBuilder;

fn cosine(a: &Tensor, b: &Tensor) -> dcpn::Result<Vec<f32>> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&(na * nb)?)?.to_vec1()?)
}

fn main() -> dcpn::Result<()> {
    let cfg = DualEncoderConfig::tiny();
    let varmap = candle_nn::VarMap::new();
    let encoder = DualEncoder::new(&ParamBuilder::new(&varmap, 0, DType::F32, &Device::Cpu), &cfg)?;
    let n_params: usize = varmap.all_vars().iter().map(|v| v.elem_count()).sum();
    println!("tiny dual encoder: D = {}, {n_params} parameters", cfg.dim);

    let (corpus, _) = generate_synthetic_corpus(4, 2, 32, 0)?;
    let images = corpus.batch(&[0, 2, 4, 6], DType::F32, &Device::Cpu)?;
    let (z_g, z_l) = encoder.forward(&images, false)?;
    println!("Z_G {:?}, Z_L {:?}", z_g.dims(), z_l.dims());
    println!("cos(Z_G, Z_L) per image: {:?}", cosine(&z_g, &z_l)?);

    let reversed = corpus.batch(&[6, 4, 2, 0], DType::F32, &Device::Cpu)?;
    let (r_g, _) = encoder.forward(&reversed, false)?;
    let diff = (r_g.get(0)? - z_g.get(3)?)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("reversing the batch reverses the rows (max difference {diff:.2e})");
    Ok(())
}
