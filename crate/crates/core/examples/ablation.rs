//! Trains each framework variant on the same synthetic benchmark and prints
//! held-out PSNR/SSIM per mode and seed.

use retinexformer::data::Dataset;
use retinexformer::retinex::{DegradationConfig, OrfMode};
use retinexformer::train::{ablate_orf, Schedule, TrainConfig, ABLATION_CSV_HEADER};

fn main() -> retinexformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seeds: Vec<u64> = args.next().map_or(vec![0, 1, 2], |s| s.split(',').filter_map(|v| v.parse().ok()).collect());
    let modes: Vec<OrfMode> = match args.next() {
        Some(s) => s.split(',').map(OrfMode::parse).collect::<retinexformer::Result<_>>()?,
        None => OrfMode::ALL.to_vec(),
    };
    let mut train = Dataset::synthetic(220, 64, &DegradationConfig::default(), 2024)?;
    let held_out = train.split_off(20);
    let base = TrainConfig { schedule: Schedule::new(lr, 1e-6, steps)?, ..TrainConfig::default() };
    println!("{ABLATION_CSV_HEADER}");
    for seed in seeds {
        for row in ablate_orf(&base, &modes, &[seed], &train, &held_out)? {
            println!("{}", row.to_csv());
        }
    }
    Ok(())
}
