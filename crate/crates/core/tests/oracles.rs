mod common;

use common::{attention_case, conv_direct, deconv_direct, random_tensor};
use proptest::prelude::*;
use retinexformer::nn::ConvSpec;
use retinexformer::{Tape, Tensor};

#[test]
fn attention_matches_loops_on_small_grid() {
    let mut worst = 0.0f64;
    for h in 1..=4 {
        for w in 1..=4 {
            for c in 1..=4 {
                for k in [1, 2] {
                    if c % k != 0 {
                        continue;
                    }
                    let e = attention_case(h, w, c, k, (h * 100 + w * 10 + c + k * 1000) as u64);
                    worst = worst.max(e);
                }
            }
        }
    }
    assert!(worst < 1e-5, "max rel error {worst:e}");
}

fn matmul_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(vec![m, n], |i| (0..k).map(|t| a.get(&[i[0], t]) * b.get(&[t, i[1]])).sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_matches_loops(h in 1usize..6, w in 1usize..6, half in 1usize..4, two in any::<bool>(), seed in any::<u64>()) {
        let c = 2 * half;
        let k = if two { 2 } else { 1 };
        prop_assert!(attention_case(h, w, c, k, seed) < 1e-5);
    }

    #[test]
    fn matmul_matches_loops(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = random_tensor(vec![m, k], -1.0, 1.0, seed);
        let b = random_tensor(vec![k, n], -1.0, 1.0, seed ^ 7);
        let mut tape = Tape::<f64>::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(av, bv).unwrap();
        prop_assert!(tape.value(out).max_abs_diff(&matmul_loop(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_columns_are_distributions(r in 1usize..7, c in 1usize..7, seed in any::<u64>()) {
        let a = random_tensor(vec![r, c], -30.0, 30.0, seed);
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(a);
        let s = tape.softmax(av, 0).unwrap();
        let s = tape.value(s);
        for j in 0..c {
            let total: f64 = (0..r).map(|i| s.get(&[i, j])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!((0..r).all(|i| s.get(&[i, j]) >= 0.0));
        }
    }

    #[test]
    fn split_then_concat_is_identity(r in 1usize..5, a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let x = random_tensor(vec![r, a + b], -1.0, 1.0, seed);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let parts = tape.split(xv, 1, &[a, b]).unwrap();
        let joined = tape.concat(&parts, 1).unwrap();
        prop_assert_eq!(tape.value(joined), &x);
    }

    #[test]
    fn conv_matches_direct_loops(
        h in 2usize..8, w in 2usize..8, cin in 1usize..4, cout in 1usize..4,
        kind in 0usize..4, seed in any::<u64>(),
    ) {
        let spec = match kind {
            0 => ConvSpec::pointwise(cin, cout),
            1 => ConvSpec::same(3, cin, cout),
            2 => ConvSpec::depthwise(3, cin),
            _ => ConvSpec::downsample(cin, cout),
        };
        let ws = spec.weight_shape().to_vec();
        let x = random_tensor(vec![h, w, cin], -1.0, 1.0, seed);
        let wt = random_tensor(ws, -1.0, 1.0, seed ^ 3);
        let b = random_tensor(vec![spec.out_channels], -1.0, 1.0, seed ^ 5);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let out = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
        let want = conv_direct(&x, &wt, Some(&b), &spec);
        prop_assert_eq!(tape.shape(out), want.shape());
        prop_assert!(tape.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn deconv_matches_direct_loops(h in 1usize..5, w in 1usize..5, cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let x = random_tensor(vec![h, w, cin], -1.0, 1.0, seed);
        let wt = random_tensor(vec![cin, 2, 2, cout], -1.0, 1.0, seed ^ 3);
        let b = random_tensor(vec![cout], -1.0, 1.0, seed ^ 5);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let out = tape.conv_transpose2d(xv, wv, Some(bv)).unwrap();
        prop_assert!(tape.value(out).max_abs_diff(&deconv_direct(&x, &wt, Some(&b))).unwrap() < 1e-12);
    }
}
