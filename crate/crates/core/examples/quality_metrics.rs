//! PSNR and SSIM of an image against noisy and shifted copies of itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use retinexformer::data::procedural_clean;
use retinexformer::metrics::{psnr, ssim};

fn main() -> retinexformer::Result<()> {
    let clean = procedural_clean(64, 64, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.0, 0.01, 0.05, 0.1, 0.2] {
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        let mut noisy = clean.clone();
        for v in noisy.data_mut() {
            *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
        println!("sigma {sigma:<4}  PSNR {:>7.2} dB  SSIM {:.4}", psnr(&noisy, &clean, 1.0)?, ssim(&noisy, &clean)?);
    }
    for gain in [0.9, 0.5, 0.2] {
        let dark = clean.map(|v| v * gain);
        println!("gain  {gain:<4}  PSNR {:>7.2} dB  SSIM {:.4}", psnr(&dark, &clean, 1.0)?, ssim(&dark, &clean)?);
    }
    Ok(())
}
