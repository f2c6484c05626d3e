//! Briefly trains a small model, then enhances an image whose size is not a
//! multiple of 4 and saves input and output as PPM.

use retinexformer::data::{procedural_clean, save_image, synth_pair, Dataset};
use retinexformer::metrics::psnr;
use retinexformer::retinex::DegradationConfig;
use retinexformer::train::{enhance, Schedule, TrainConfig, Trainer};
use retinexformer::{ModelConfig, OrfMode};

fn main() -> retinexformer::Result<()> {
    let data = Dataset::synthetic(16, 32, &DegradationConfig::default(), 5)?;
    let config = TrainConfig {
        model: ModelConfig { crop_size: 32, ..ModelConfig::with_channels(8) },
        schedule: Schedule::new(2e-3, 1e-6, 300)?,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(&data.pairs, None, |_| {})?;

    let clean = procedural_clean(50, 70, 99);
    let pair = synth_pair(&clean, &DegradationConfig::default(), 100)?;
    let out = enhance(&trainer.store, &config.model, OrfMode::Full, &pair.low)?;
    let clamped = out.enhanced.map(|v| v.clamp(0.0, 1.0));
    println!("input    {:.2} dB", psnr(&pair.low, &pair.reference, 1.0)?);
    println!("lit-up   {:.2} dB", psnr(&out.lit_image.map(|v| v.clamp(0.0, 1.0)), &pair.reference, 1.0)?);
    println!("enhanced {:.2} dB", psnr(&clamped, &pair.reference, 1.0)?);
    save_image(&pair.low, "low.ppm")?;
    save_image(&clamped, "enhanced.ppm")?;
    Ok(())
}
