use std::time::Instant;

use retinexformer::{init_parameters, orf_forward, ModelConfig, OrfMode, Tape, Tensor};

fn main() -> retinexformer::Result<()> {
    let config = ModelConfig::default();
    let store = init_parameters::<f32>(&config, 0)?;
    println!("parameters: {}", store.num_elements());
    let img = Tensor::from_fn(vec![64, 64, 3], |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 17) as f32 / 17.0);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new().check_finite(false);
        let p = store.bind(&mut tape, true);
        let x = tape.constant(img.clone());
        let out = orf_forward(&mut tape, &p, &config, x, OrfMode::Full)?;
        let d = tape.sub(out.enhanced, x)?;
        let a = tape.abs(d)?;
        let loss = tape.mean(a)?;
        let t1 = Instant::now();
        let _g = tape.backward(loss)?;
        println!("nodes {} fwd {:?} bwd {:?}", tape.len(), t1 - t0, t1.elapsed());
    }
    Ok(())
}
