use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use retinexformer::data::{decode_ppm, encode_ppm, Dataset};
use retinexformer::train::enhance;
use retinexformer::{init_parameters, ModelConfig, OrfMode, Tensor};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retinexformer")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth-data", "--out-dir", s(dir), "--size", "16"];
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn synth_data_writes_pairs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&synth(&a, &["--count", "10", "--seed", "3"])), 0);
    assert_eq!(code(&synth(&b, &["--count", "10", "--seed", "3"])), 0);
    let ppm: Vec<_> = fs::read_dir(a.join("pairs"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
        .collect();
    assert_eq!(ppm.len(), 20);
    assert_eq!(fs::read_to_string(a.join("index.txt")).unwrap().lines().count(), 10);
    for e in ppm {
        let name = e.file_name();
        assert_eq!(fs::read(e.path()).unwrap(), fs::read(b.join("pairs").join(&name)).unwrap());
    }
}

#[test]
fn synth_data_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth(&tmp.path().join("x"), &["--sigma", "-1"]);
    assert_eq!(code(&out), 2);
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&synth(&tmp.path().join("y"), &["--clean-dir", s(&empty)])), 2);
    assert_eq!(code(&synth(&tmp.path().join("z"), &["--lmin", "0"])), 2);
}

#[test]
fn synth_data_uses_clean_images() {
    let tmp = tempfile::tempdir().unwrap();
    let clean_dir = tmp.path().join("clean");
    fs::create_dir(&clean_dir).unwrap();
    let clean = retinexformer::data::procedural_clean(12, 8, 1);
    fs::write(clean_dir.join("a.ppm"), encode_ppm(&clean).unwrap()).unwrap();
    let out_dir = tmp.path().join("out");
    assert_eq!(code(&synth(&out_dir, &["--clean-dir", s(&clean_dir), "--count", "2"])), 0);
    let set = Dataset::load(&out_dir).unwrap();
    assert_eq!(set.pairs[1].low.shape(), &[12, 8, 3]);
}

#[test]
fn train_enhance_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, &["--count", "3"])), 0);
    let weights = tmp.path().join("w.bin");
    let log = tmp.path().join("log.csv");
    let out = cli(&[
        "train", "--data", s(&data), "--out-weights", s(&weights), "--log", s(&log), "--steps", "4",
        "--base-channels", "4", "--crop-size", "16", "--lr-start", "1e-3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("# resolved configuration"));
    let log = fs::read_to_string(&log).unwrap();
    assert!(log.starts_with("step,lr,loss"));
    assert_eq!(log.lines().count(), 5);

    let report = tmp.path().join("m.csv");
    let out = cli(&["eval", "--weights", s(&weights), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(&report).unwrap();
    assert!(report.starts_with("image_id,psnr_in,psnr_out,ssim_in,ssim_out"));
    assert!(report.lines().last().unwrap().starts_with("mean,"));

    let src = data.join("pairs/0000_low.ppm");
    let dst = tmp.path().join("e.ppm");
    assert_eq!(code(&cli(&["enhance", "--weights", s(&weights), "--in", s(&src), "--out", s(&dst)])), 0);
    assert_eq!(decode_ppm(&fs::read(&dst).unwrap()).unwrap().shape(), &[16, 16, 3]);

    let out_dir = tmp.path().join("enhanced");
    let out = cli(&["enhance", "--weights", s(&weights), "--in", s(&data.join("pairs")), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 6);
}

#[test]
fn untrained_enhance_returns_lit_image() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ModelConfig::with_channels(4);
    let store = init_parameters::<f32>(&config, 0).unwrap();
    let weights = tmp.path().join("w.bin");
    store.save(&weights).unwrap();
    let img = retinexformer::data::procedural_clean(10, 14, 4).map(|v| v * 0.3);
    let src = tmp.path().join("in.ppm");
    fs::write(&src, encode_ppm(&img).unwrap()).unwrap();
    let img = decode_ppm(&fs::read(&src).unwrap()).unwrap();
    let dst = tmp.path().join("out.ppm");
    assert_eq!(code(&cli(&["enhance", "--weights", s(&weights), "--in", s(&src), "--out", s(&dst)])), 0);
    let got = decode_ppm(&fs::read(&dst).unwrap()).unwrap();
    let lit = enhance(&store, &config, OrfMode::Full, &img).unwrap().lit_image;
    let want = decode_ppm(&encode_ppm(&lit).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn eval_of_identical_pair_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = ModelConfig::with_channels(4);
    config.crop_size = 16;
    let mut store = init_parameters::<f32>(&config, 0).unwrap();
    store.get_mut("estimator.out.weight").unwrap().data_mut().fill(0.0);
    let weights = tmp.path().join("w.bin");
    store.save(&weights).unwrap();
    let clean = retinexformer::data::procedural_clean(16, 16, 2);
    let clean = decode_ppm(&encode_ppm(&clean).unwrap()).unwrap();
    let mut set = Dataset::default();
    set.push("same", retinexformer::data::ImagePair { low: clean.clone(), reference: clean, illumination: None });
    let data = tmp.path().join("d");
    set.save(&data).unwrap();
    let report = tmp.path().join("m.csv");
    assert_eq!(code(&cli(&["eval", "--weights", s(&weights), "--data", s(&data), "--report", s(&report)])), 0);
    let text = fs::read_to_string(&report).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "same");
    assert_eq!(row[2], "inf");
    assert_eq!(row[4].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn corrupt_weights_exit_four_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let store = init_parameters::<f32>(&ModelConfig::with_channels(4), 0).unwrap();
    let weights = tmp.path().join("w.bin");
    store.save(&weights).unwrap();
    let bytes = fs::read(&weights).unwrap();
    fs::write(&weights, &bytes[..bytes.len() / 2]).unwrap();
    let src = tmp.path().join("in.ppm");
    fs::write(&src, encode_ppm(&Tensor::full(vec![8, 8, 3], 0.2f32)).unwrap()).unwrap();
    let out = cli(&["enhance", "--weights", s(&weights), "--in", s(&src), "--out", s(&tmp.path().join("o.ppm"))]);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("corrupt weight file (tensor "), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&weights, &bad).unwrap();
    let out = cli(&["enhance", "--weights", s(&weights), "--in", s(&src), "--out", s(&tmp.path().join("o.ppm"))]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn usage_and_io_errors() {
    assert_eq!(code(&cli(&["train", "--bogus"])), 2);
    assert_eq!(code(&cli(&["nonsense"])), 2);
    assert_eq!(code(&cli(&["--help"])), 0);
    let out = cli(&["enhance", "--weights", "/nonexistent/w.bin", "--in", "/nonexistent/a.ppm", "--out", "/tmp/x.ppm"]);
    assert_eq!(code(&out), 3);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "unknown_key = 3\n").unwrap();
    assert_eq!(code(&cli(&["grad-check", "--config", s(&cfg)])), 2);
}

#[test]
fn grad_check_ops_passes() {
    let out = cli(&["grad-check", "--scope", "ops"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")), "{text}");
}

#[test]
fn flops_prints_exact_rows() {
    let out = cli(&["flops", "--grid", "16x16,8,2", "8x8,8,1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "H,W,C,k,formula_igmsa,measured,formula_gmsa,ratio");
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4], f[5], "{line}");
    }
    assert_eq!(code(&cli(&["flops", "--grid", "16x16,8,3"])), 2);
    assert_eq!(code(&cli(&["flops"])), 0);
}
