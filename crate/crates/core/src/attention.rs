//! Illumination-guided multi-head self-attention (IG-MSA) and the block
//! (IGAB) that wraps it.
//!
//! Tokens are channels, not pixels: an `H×W×C` feature is flattened to
//! `X ∈ R^{HW×C}` and split column-wise into `k` heads of width `d_k = C/k`.
//! Per head,
//!
//! ```text
//! Q = X_i W_Qᵀ,  K = X_i W_Kᵀ,  V = X_i W_Vᵀ          (W_* ∈ R^{d_k×d_k}, no bias)
//! head_i = (Y_i ⊙ V) · softmax₀(Kᵀ Q / α_i)           (d_k×d_k attention map)
//! ```
//!
//! where `Y` is the illumination feature flattened the same way and `softmax₀`
//! normalizes over the key index, so every column of the map sums to one.
//! Heads are concatenated, projected by a bias-free `C×C` matrix, and a
//! positional term is added. The two attention matmuls cost `2·HW·C²/k`
//! multiply-adds in total, linear in the number of pixels.

use std::fmt;
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::params::{uniform_fan_in, Bound, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Smallest magnitude the learnable logit divisor may take.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// How the positional term of IG-MSA is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PositionalEncoding {
    /// Depthwise conv3×3 → GELU → depthwise conv3×3 over the value tensor.
    /// Works at any resolution.
    #[default]
    Conv,
    /// A learnable `HW×C` table, usable only at the resolution it was built for.
    Table { height: usize, width: usize },
}

fn pos_spec(dim: usize) -> ConvSpec {
    ConvSpec::depthwise(3, dim).without_bias()
}

/// Number of scalar parameters [`register_attention`] creates.
pub fn attention_parameter_count(dim: usize, heads: usize, pos: PositionalEncoding) -> usize {
    let dk = dim / heads;
    let pos_count = match pos {
        PositionalEncoding::Conv => 2 * pos_spec(dim).parameter_count(),
        PositionalEncoding::Table { height, width } => height * width * dim,
    };
    heads * (3 * dk * dk + 1) + dim * dim + pos_count
}

fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(format!("{dim} channels cannot be split into {heads} heads")));
    }
    Ok(dim / heads)
}

/// Adds `wq/wk/wv.head{i}`, `alpha.head{i}`, `proj` and the positional
/// parameters under `prefix`. `alpha` starts at 1.
pub fn register_attention<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    dim: usize,
    heads: usize,
    pos: PositionalEncoding,
    rng: &mut R,
) -> Result<()> {
    let dk = check_heads(dim, heads)?;
    for i in 0..heads {
        for w in ["wq", "wk", "wv"] {
            store.insert(format!("{prefix}.{w}.head{i}"), uniform_fan_in(vec![dk, dk], dk, rng))?;
        }
        store.insert(format!("{prefix}.alpha.head{i}"), Tensor::scalar(T::one()))?;
    }
    store.insert(format!("{prefix}.proj"), uniform_fan_in(vec![dim, dim], dim, rng))?;
    match pos {
        PositionalEncoding::Conv => {
            let spec = pos_spec(dim);
            nn::register_conv(store, &format!("{prefix}.pos.conv1"), &spec, rng)?;
            nn::register_conv(store, &format!("{prefix}.pos.conv2"), &spec, rng)?;
        }
        PositionalEncoding::Table { height, width } => {
            store.insert(format!("{prefix}.pos.table"), Tensor::zeros(vec![height * width, dim]))?;
        }
    }
    Ok(())
}

/// Result of [`ig_msa`], with intermediates exposed for inspection.
#[derive(Clone, Debug)]
pub struct IgMsaOutput {
    /// `H×W×C` output feature.
    pub output: Var,
    /// Concatenated head outputs before the projection, `HW×C`.
    pub heads: Var,
    /// Per-head `d_k×d_k` attention maps (post-softmax).
    pub attention: Vec<Var>,
}

/// Runs IG-MSA on `x` guided by `guide`. `guide = None` is the ungated
/// variant (equivalent to an all-ones guide).
pub fn ig_msa<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    guide: Option<Var>,
    heads: usize,
) -> Result<IgMsaOutput> {
    let (h, w, c) = tape.value(x).hwc()?;
    let dk = check_heads(c, heads)?;
    let hw = h * w;
    if let Some(y) = guide {
        if tape.shape(y) != [h, w, c] {
            return Err(Error::shape(format!(
                "illumination feature {:?} does not match input {:?}",
                tape.shape(y),
                [h, w, c]
            )));
        }
    }
    let tokens = tape.reshape(x, &[hw, c])?;
    let guide_tokens = guide.map(|y| tape.reshape(y, &[hw, c])).transpose()?;
    let floor = T::from_f64_lossy(ALPHA_FLOOR);

    let mut head_outputs = Vec::with_capacity(heads);
    let mut values = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for i in 0..heads {
        let xi = if heads == 1 { tokens } else { tape.narrow(tokens, 1, i * dk, dk)? };
        let project = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let wt = p.var(&format!("{prefix}.{name}.head{i}"))?;
            let wt = tape.transpose(wt)?;
            tape.matmul(xi, wt)
        };
        let q = project(tape, "wq")?;
        let k = project(tape, "wk")?;
        let v = project(tape, "wv")?;

        let kt = tape.transpose(k)?;
        let logits = tape.attention_matmul(kt, q)?;
        let alpha = p.var(&format!("{prefix}.alpha.head{i}"))?;
        let alpha = tape.floor_abs(alpha, floor)?;
        let logits = tape.div(logits, alpha)?;
        let attn = tape.softmax(logits, 0)?;

        let gated = match guide_tokens {
            Some(y) => {
                let yi = if heads == 1 { y } else { tape.narrow(y, 1, i * dk, dk)? };
                tape.mul(yi, v)?
            }
            None => v,
        };
        head_outputs.push(tape.attention_matmul(gated, attn)?);
        values.push(v);
        attention.push(attn);
    }
    let joined = if heads == 1 { head_outputs[0] } else { tape.concat(&head_outputs, 1)? };
    let proj = p.var(&format!("{prefix}.proj"))?;
    let proj_t = tape.transpose(proj)?;
    let projected = tape.matmul(joined, proj_t)?;

    let positional = if let Ok(table) = p.var(&format!("{prefix}.pos.table")) {
        if tape.shape(table) != [hw, c] {
            return Err(Error::shape(format!(
                "fixed positional table {:?} cannot serve a {h}×{w}×{c} input",
                tape.shape(table)
            )));
        }
        table
    } else {
        let v_all = if heads == 1 { values[0] } else { tape.concat(&values, 1)? };
        let v_img = tape.reshape(v_all, &[h, w, c])?;
        let spec = pos_spec(c);
        let e = nn::conv(tape, p, &format!("{prefix}.pos.conv1"), v_img, spec)?;
        let e = tape.gelu(e)?;
        let e = nn::conv(tape, p, &format!("{prefix}.pos.conv2"), e, spec)?;
        tape.reshape(e, &[hw, c])?
    };
    let out = tape.add(projected, positional)?;
    let output = tape.reshape(out, &[h, w, c])?;
    Ok(IgMsaOutput { output, heads: joined, attention })
}

pub fn igab_parameter_count(dim: usize, heads: usize, pos: PositionalEncoding) -> usize {
    let [fc1, fc2] = nn::ffn_specs(dim);
    4 * dim + attention_parameter_count(dim, heads, pos) + fc1.parameter_count() + fc2.parameter_count()
}

pub fn register_igab<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    dim: usize,
    heads: usize,
    pos: PositionalEncoding,
    rng: &mut R,
) -> Result<()> {
    nn::LayerNormParams::new(dim).register(store, &format!("{prefix}.norm1"))?;
    register_attention(store, &format!("{prefix}.attn"), dim, heads, pos, rng)?;
    nn::LayerNormParams::new(dim).register(store, &format!("{prefix}.norm2"))?;
    nn::register_ffn(store, &format!("{prefix}.ffn"), dim, rng)
}

/// Pre-norm residual block: `x₁ = x + IG-MSA(LN(x))`, `out = x₁ + FFN(LN(x₁))`.
pub fn igab<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    guide: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let n1 = nn::layer_norm(tape, p, &format!("{prefix}.norm1"), x)?;
    let attn = ig_msa(tape, p, &format!("{prefix}.attn"), n1, guide, heads)?;
    let x1 = tape.add(x, attn.output)?;
    let n2 = nn::layer_norm(tape, p, &format!("{prefix}.norm2"), x1)?;
    let f = nn::ffn(tape, p, &format!("{prefix}.ffn"), n2)?;
    tape.add(x1, f)
}

/// Multiply-add count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlopCount(pub u128);

impl Add for FlopCount {
    type Output = FlopCount;
    fn add(self, rhs: FlopCount) -> FlopCount {
        FlopCount(self.0 + rhs.0)
    }
}

impl std::iter::Sum for FlopCount {
    fn sum<I: Iterator<Item = FlopCount>>(iter: I) -> FlopCount {
        iter.fold(FlopCount(0), Add::add)
    }
}

impl fmt::Display for FlopCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `k·[d_k·(d_k·HW) + HW·(d_k·d_k)] = 2·HW·C²/k`: the two attention matmuls
/// of every head; projections excluded.
pub fn flops_ig_msa(h: usize, w: usize, c: usize, k: usize) -> Result<FlopCount> {
    let dk = check_heads(c, k)? as u128;
    let hw = (h * w) as u128;
    Ok(FlopCount(k as u128 * (dk * (dk * hw) + hw * (dk * dk))))
}

/// Global MSA over all `HW` spatial tokens: `2·(HW)²·C`.
pub fn flops_g_msa(h: usize, w: usize, c: usize) -> FlopCount {
    let hw = (h * w) as u128;
    FlopCount(2 * hw * hw * c as u128)
}

/// Runs IG-MSA once on random data with the attention counter on and returns
/// the multiply-adds its attention matmuls executed.
pub fn measured_ig_msa_flops(h: usize, w: usize, c: usize, k: usize, seed: u64) -> Result<FlopCount> {
    check_heads(c, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::<f32>::new();
    register_attention(&mut store, "attn", c, k, PositionalEncoding::Conv, &mut rng)?;
    let mut tape = Tape::new();
    tape.enable_attention_counter();
    let p = store.bind(&mut tape, false);
    let mut rand_feature = || Tensor::from_fn(vec![h, w, c], |_| rng.random_range(-1.0f32..1.0));
    let x = tape.constant(rand_feature());
    let y = tape.constant(rand_feature());
    ig_msa(&mut tape, &p, "attn", x, Some(y), k)?;
    Ok(FlopCount(tape.attention_macs()? as u128))
}

/// One row of the FLOP report.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopRow {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub formula_ig_msa: FlopCount,
    pub measured: FlopCount,
    pub formula_g_msa: FlopCount,
}

pub const FLOP_CSV_HEADER: &str = "H,W,C,k,formula_igmsa,measured,formula_gmsa,ratio";

impl FlopRow {
    pub fn compute(h: usize, w: usize, c: usize, k: usize) -> Result<Self> {
        Ok(FlopRow {
            h,
            w,
            c,
            k,
            formula_ig_msa: flops_ig_msa(h, w, c, k)?,
            measured: measured_ig_msa_flops(h, w, c, k, 0)?,
            formula_g_msa: flops_g_msa(h, w, c),
        })
    }

    /// G-MSA cost over IG-MSA cost.
    pub fn ratio(&self) -> f64 {
        self.formula_g_msa.0 as f64 / self.formula_ig_msa.0 as f64
    }

    /// Exact check of `ratio == HW·k/C` in integers.
    pub fn ratio_matches_closed_form(&self) -> bool {
        self.formula_g_msa.0 * self.c as u128
            == (self.h * self.w * self.k) as u128 * self.formula_ig_msa.0
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.h,
            self.w,
            self.c,
            self.k,
            self.formula_ig_msa,
            self.measured,
            self.formula_g_msa,
            self.ratio()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        assert_eq!(flops_ig_msa(16, 16, 8, 2).unwrap(), FlopCount(16384));
        assert_eq!(flops_g_msa(16, 16, 8), FlopCount(1_048_576));
        assert_eq!(flops_ig_msa(8, 8, 8, 1).unwrap(), FlopCount(8192));
        assert!(matches!(flops_ig_msa(8, 8, 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn scaling_laws() {
        let base = flops_ig_msa(16, 16, 8, 2).unwrap().0;
        assert_eq!(flops_ig_msa(32, 16, 8, 2).unwrap().0, 2 * base);
        let g = flops_g_msa(16, 16, 8).0;
        assert_eq!(flops_g_msa(32, 16, 8).0, 4 * g);
        for k in [2, 4, 8] {
            assert!(flops_ig_msa(16, 16, 8, k).unwrap() < flops_ig_msa(16, 16, 8, 1).unwrap());
        }
    }

    #[test]
    fn counter_disabled_is_usage_error() {
        let tape = Tape::<f32>::new();
        assert!(matches!(tape.attention_macs(), Err(Error::Usage(_))));
    }
}
