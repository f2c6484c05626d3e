//! Parameter counts per base width, with the width nearest a target count.

use retinexformer::network::count_parameters;
use retinexformer::ModelConfig;

fn main() -> retinexformer::Result<()> {
    let target: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1_610_000);
    let mut best = (usize::MAX, 0);
    for c in (4..=64).step_by(4) {
        let n = count_parameters(&ModelConfig::with_channels(c))?;
        println!("C={c:<3} {n:>10}");
        best = best.min((n.abs_diff(target), c));
    }
    println!("closest to {target}: C={}", best.1);
    Ok(())
}
