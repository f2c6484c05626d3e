use retinexformer::data::{procedural_clean, synth_pair, Dataset, ImagePair};
use retinexformer::metrics::mae;
use retinexformer::retinex::DegradationConfig;
use retinexformer::train::{enhance, Schedule, TrainConfig, Trainer};
use retinexformer::{Error, ModelConfig, OrfMode};

fn tiny(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { crop_size: 16, ..ModelConfig::with_channels(4) },
        schedule: Schedule::new(lr, 1e-6, steps).unwrap(),
        batch_size: 2,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn pairs(n: usize, size: usize) -> Vec<ImagePair> {
    Dataset::synthetic(n, size, &DegradationConfig::default(), 31).unwrap().pairs
}

#[test]
fn first_loss_is_lit_image_error() {
    let clean = procedural_clean(16, 16, 2);
    let pair = synth_pair(&clean, &DegradationConfig::default(), 3).unwrap();
    for mode in OrfMode::ALL {
        let config = TrainConfig { batch_size: 1, augment: false, mode, ..tiny(10, 1e-3) };
        let mut trainer = Trainer::new(config.clone()).unwrap();
        let lit = enhance(&trainer.store, &config.model, mode, &pair.low).unwrap().lit_image;
        let expected = mae(&lit, &pair.reference).unwrap();
        let (_, loss) = trainer.step(std::slice::from_ref(&pair)).unwrap();
        assert!((loss - expected).abs() < 1e-6, "{}: {loss} vs {expected}", mode.name());
    }
}

#[test]
fn fixed_seed_gives_identical_traces() {
    let data = pairs(4, 24);
    let trace = || {
        let mut trainer = Trainer::new(tiny(6, 1e-3)).unwrap();
        let rows = trainer.run(&data, None, |_| {}).unwrap();
        (rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), trainer.store)
    };
    let (a, sa) = trace();
    let (b, sb) = trace();
    assert_eq!(a, b);
    assert!(sa.iter().zip(sb.iter()).all(|((_, x), (_, y))| x.data() == y.data()));
    let mut other = Trainer::new(TrainConfig { seed: 1, ..tiny(6, 1e-3) }).unwrap();
    let c: Vec<u64> = other.run(&data, None, |_| {}).unwrap().iter().map(|r| r.loss.to_bits()).collect();
    assert_ne!(a, c);
}

#[test]
fn nan_parameter_aborts_with_batch_seed() {
    let data = pairs(2, 16);
    let mut trainer = Trainer::new(tiny(5, 1e-3)).unwrap();
    trainer.store.get_mut("estimator.fuse.bias").unwrap().data_mut()[0] = f32::NAN;
    match trainer.step(&data) {
        Err(Error::Numeric(m)) => assert!(m.contains("batch seed") && m.contains("step 0"), "{m}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn loss_eventually_decreases() {
    let data = pairs(8, 16);
    let mut trainer = Trainer::new(tiny(400, 3e-3)).unwrap();
    let losses: Vec<f64> = trainer.run(&data, None, |_| {}).unwrap().iter().map(|r| r.loss).collect();
    let min = |s: &[f64]| s.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min(&losses[300..]) < min(&losses[..100]), "{} vs {}", min(&losses[300..]), min(&losses[..100]));
}

#[test]
fn checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let config = TrainConfig { checkpoint: Some(path.clone()), checkpoint_every: 2, ..tiny(3, 1e-3) };
    let mut trainer = Trainer::new(config).unwrap();
    trainer.run(&pairs(2, 16), None, |_| {}).unwrap();
    let back = retinexformer::ParameterStore::<f32>::load(&path).unwrap();
    assert!(back.iter().zip(trainer.store.iter()).all(|((_, a), (_, b))| a == b));
}

#[test]
fn divide_mode_trains_without_numeric_failure() {
    let data = pairs(4, 16);
    let mut trainer = Trainer::new(TrainConfig { mode: OrfMode::DivideIllumination, ..tiny(30, 1e-3) }).unwrap();
    let rows = trainer.run(&data, None, |_| {}).unwrap();
    assert!(rows.iter().all(|r| r.loss.is_finite()));
}
