//! Uniform sampling plus secondary masking on a patch grid, and the
//! PixelShuffle rearrangement that restores the latent resolution.

use candle_core::{Device, Tensor};
use dcpn::pretrain::{pixel_shuffle_upsample, pixel_unshuffle, secondary_mask, uniform_sample_mask};
use dcpn::seeding::rng_from_seed;

fn main() -> dcpn::Result<()> {
    let mut rng = rng_from_seed(3);
    let plan = secondary_mask(&uniform_sample_mask(14, 14, &mut rng)?, 0.25, &mut rng)?;
    println!(
        "14x14 grid: {} kept, {} of them replaced by the mask token",
        plan.kept.len(),
        plan.sm_masked.len()
    );
    println!("legend: # visible   m mask token   . dropped");
    for r in 0..plan.grid_h {
        let row: String = (0..plan.grid_w)
            .map(|c| {
                let p = r * plan.grid_w + c;
                if plan.is_sm_masked(p) {
                    'm'
                } else if plan.is_kept(p) {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        println!("  {row}");
    }

    let latent = Tensor::new(&[1f32, 2., 3., 4.], &Device::Cpu)?.reshape((1, 4, 1, 1))?;
    let up = pixel_shuffle_upsample(&latent, 2)?;
    println!("pixel shuffle of [1,2,3,4] with r=2: {:?}", up.squeeze(0)?.squeeze(0)?.to_vec2::<f32>()?);
    let x = Tensor::randn(0f32, 1., (2, 8, 3, 5), &Device::Cpu)?;
    let back = pixel_unshuffle(&pixel_shuffle_upsample(&x, 2)?, 2)?;
    println!("unshuffle(shuffle(x)) == x: {}", back.eq(&x)?.min_all()?.to_scalar::<u8>()? == 1);
    Ok(())
}
