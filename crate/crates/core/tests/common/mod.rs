//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use retinexformer::nn::ConvSpec;
use retinexformer::{ParameterStore, Tensor};

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Direct nested-loop convolution over an `H×W×Cin` input with HWIO weights.
pub fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let (h, wd, cin) = x.hwc().unwrap();
    let (k, s, p) = (spec.kernel_size, spec.stride, spec.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let cout = spec.out_channels;
    let per_group_in = cin / spec.groups;
    let per_group_out = cout / spec.groups;
    Tensor::from_fn(vec![oh, ow, cout], |i| {
        let (oy, ox, co) = (i[0], i[1], i[2]);
        let g = co / per_group_out;
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                let ix = (ox * s + kx) as isize - p as isize;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                    continue;
                }
                for ci in 0..per_group_in {
                    let xin = x.get(&[iy as usize, ix as usize, g * per_group_in + ci]);
                    acc += xin * w.get(&[ky, kx, ci, co]);
                }
            }
        }
        acc
    })
}

/// Transposed 2×2 stride-2 convolution with weight `[Cin, 2, 2, Cout]`.
pub fn deconv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (h, wd, cin) = x.hwc().unwrap();
    let cout = w.shape()[3];
    Tensor::from_fn(vec![2 * h, 2 * wd, cout], |i| {
        let (y, xx, co) = (i[0], i[1], i[2]);
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin {
            acc += x.get(&[y / 2, xx / 2, ci]) * w.get(&[ci, y % 2, xx % 2, co]);
        }
        acc
    })
}

/// Scalar-loop IG-MSA: per head `(Y ⊙ V) · softmax_keys(KᵀQ / α)`, heads
/// concatenated, projected, plus the conv positional term on `V`.
pub fn ig_msa_loops(
    store: &ParameterStore<f64>,
    prefix: &str,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    heads: usize,
) -> Tensor<f64> {
    let (h, w, c) = x.hwc().unwrap();
    let n = h * w;
    let dk = c / heads;
    let p = |name: &str| store.get(&format!("{prefix}.{name}")).unwrap().clone();
    let mut joined = vec![vec![0.0; c]; n];
    let mut v_full = vec![vec![0.0; c]; n];
    for head in 0..heads {
        let (wq, wk, wv) = (p(&format!("wq.head{head}")), p(&format!("wk.head{head}")), p(&format!("wv.head{head}")));
        let alpha = p(&format!("alpha.head{head}")).data()[0];
        let alpha = if alpha.abs() < 1e-3 { 1e-3f64.copysign(alpha) } else { alpha };
        let xi = |t: usize, j: usize| x.data()[t * c + head * dk + j];
        let lin = |wm: &Tensor<f64>, t: usize, a: usize| (0..dk).map(|b| xi(t, b) * wm.get(&[a, b])).sum::<f64>();
        let q: Vec<Vec<f64>> = (0..n).map(|t| (0..dk).map(|a| lin(&wq, t, a)).collect()).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|t| (0..dk).map(|a| lin(&wk, t, a)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|t| (0..dk).map(|a| lin(&wv, t, a)).collect()).collect();
        let mut attn = vec![vec![0.0; dk]; dk];
        for col in 0..dk {
            let logits: Vec<f64> = (0..dk).map(|row| (0..n).map(|t| k[t][row] * q[t][col]).sum::<f64>() / alpha).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for row in 0..dk {
                attn[row][col] = (logits[row] - m).exp() / z;
            }
        }
        for t in 0..n {
            for col in 0..dk {
                joined[t][head * dk + col] =
                    (0..dk).map(|row| y.data()[t * c + head * dk + row] * v[t][row] * attn[row][col]).sum();
            }
            for j in 0..dk {
                v_full[t][head * dk + j] = v[t][j];
            }
        }
    }
    let proj = p("proj");
    let dw = |input: &Vec<Vec<f64>>, wt: &Tensor<f64>| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; c]; n];
        for yy in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                acc += input[sy as usize * w + sx as usize][ch] * wt.get(&[ky, kx, 0, ch]);
                            }
                        }
                    }
                    out[yy * w + xx][ch] = acc;
                }
            }
        }
        out
    };
    let e1 = dw(&v_full, &p("pos.conv1.weight"));
    let e1: Vec<Vec<f64>> = e1.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let pos = dw(&e1, &p("pos.conv2.weight"));
    Tensor::from_fn(vec![h, w, c], |i| {
        let t = i[0] * w + i[1];
        let o = i[2];
        (0..c).map(|cc| joined[t][cc] * proj.get(&[o, cc])).sum::<f64>() + pos[t][o]
    })
}

pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Relative error with an absolute floor for entries near zero.
pub fn max_rel_diff_floor(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Runs the library IG-MSA and the loop oracle on one random configuration
/// and returns the maximum relative error.
pub fn attention_case(h: usize, w: usize, c: usize, heads: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    use retinexformer::attention::{ig_msa, register_attention, PositionalEncoding};
    use retinexformer::Tape;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::<f64>::new();
    register_attention(&mut store, "a", c, heads, PositionalEncoding::Conv, &mut rng).unwrap();
    for i in 0..heads {
        let alpha = store.get_mut(&format!("a.alpha.head{i}")).unwrap();
        alpha.data_mut()[0] = rng.random_range(0.3..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let x = random_tensor(vec![h, w, c], -1.0, 1.0, seed ^ 1);
    let y = random_tensor(vec![h, w, c], 0.0, 2.0, seed ^ 2);
    let mut tape = Tape::<f64>::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = ig_msa(&mut tape, &p, "a", xv, Some(yv), heads).unwrap();
    let got = tape.value(out.output).clone();
    let want = ig_msa_loops(&store, "a", &x, &y, heads);
    max_rel_diff_floor(&got, &want, 1e-6)
}
