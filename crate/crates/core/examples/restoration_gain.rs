//! Trains on 200 synthetic pairs and scores 20 held-out pairs against the
//! raw low-light input.

use retinexformer::data::Dataset;
use retinexformer::retinex::DegradationConfig;
use retinexformer::train::{evaluate_pairs, summarize, Schedule, TrainConfig, Trainer};

fn main() -> retinexformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let mut train = Dataset::synthetic(220, 64, &DegradationConfig::default(), 2024)?;
    let held_out = train.split_off(20);
    let config = TrainConfig {
        schedule: Schedule::new(lr, 1e-6, steps)?,
        eval_every: steps / 5,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(&train.pairs, Some(&held_out), |r| {
        if let (Some(p), Some(s)) = (r.eval_psnr, r.eval_ssim) {
            println!("step {:5}  loss {:.4}  held-out PSNR {p:.2} dB  SSIM {s:.4}", r.step, r.loss);
        }
    })?;
    let m = summarize(&evaluate_pairs(&trainer.store, &config.model, config.mode, &held_out)?);
    println!(
        "input  PSNR {:.2} dB  SSIM {:.4}\noutput PSNR {:.2} dB  SSIM {:.4}\ngain   {:+.2} dB  {:+.4}",
        m.psnr_in, m.ssim_in, m.psnr_out, m.ssim_out, m.psnr_out - m.psnr_in, m.ssim_out - m.ssim_in
    );
    Ok(())
}
