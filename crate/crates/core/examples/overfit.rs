//! Fits the full framework to a single synthetic 64×64 pair.

use retinexformer::data::{procedural_clean, synth_pair};
use retinexformer::retinex::DegradationConfig;
use retinexformer::train::{Schedule, TrainConfig, Trainer};

fn main() -> retinexformer::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let clean = procedural_clean(64, 64, 11);
    let pair = synth_pair(&clean, &DegradationConfig::default(), 12)?;
    let config = TrainConfig {
        batch_size: 1,
        augment: false,
        schedule: Schedule::new(lr, 1e-6, steps)?,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config)?;
    let start = std::time::Instant::now();
    let rows = trainer.run(std::slice::from_ref(&pair), None, |r| {
        if r.step % 100 == 0 {
            println!("step {:5}  lr {:.2e}  loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    let last = rows.last().expect("at least one step");
    println!("final loss {:.5} after {} steps in {:.1?}", last.loss, rows.len(), start.elapsed());
    Ok(())
}
