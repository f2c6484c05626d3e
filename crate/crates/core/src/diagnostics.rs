//! Central-difference gradient checks for every differentiable op, layer,
//! block and the assembled framework, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, PositionalEncoding};
use crate::autodiff::{finite_diff_check_many, Difference, Tape, Var};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::network::{self, ModelConfig};
use crate::nn::{self, ConvSpec};
use crate::params::{Bound, ParameterStore};
use crate::retinex::{self, OrfMode};
use crate::tensor::Tensor;
use crate::train::mae_loss;

/// Step of the central differences used below network scope.
pub const GRAD_EPS: f64 = 1e-6;

/// Richardson step for the whole-network check, where saturated attention
/// maps leave gradients near 1e-8 that a plain central difference cannot
/// resolve against rounding in the loss.
pub const NETWORK_STEP: f64 = 2e-3;

/// Number of parameter entries sampled in the whole-network check.
pub const NETWORK_SAMPLES: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Layers,
    Blocks,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Layers, Scope::Blocks, Scope::Network];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Layers => "layers",
            Scope::Blocks => "blocks",
            Scope::Network => "network",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown scope `{s}`; expected ops, layers, blocks or network")))
    }

    /// Largest accepted relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Scope::Network => 1e-4,
            _ => 1e-5,
        }
    }
}

/// Result for one checked target.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub scope: Scope,
    pub target: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.scope.threshold()
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(tape.shape(out), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

struct Suite {
    scope: Scope,
    rng: ChaCha8Rng,
    seed: u64,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn new(scope: Scope, seed: u64) -> Self {
        Suite { scope, rng: ChaCha8Rng::seed_from_u64(seed), seed, rows: Vec::new() }
    }

    fn rand(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        random(shape, lo, hi, &mut self.rng)
    }

    /// Values with magnitude in `[lo, hi]` and random sign.
    fn away_from_zero(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
    }

    fn record(&mut self, target: &str, report: crate::autodiff::GradCheckReport) {
        self.rows.push(CheckRow {
            scope: self.scope,
            target: target.to_string(),
            max_rel_error: report.max_rel_error,
            checked: report.checked,
        });
    }

    /// Checks `Σ f(inputs) ⊙ R` with respect to every input entry.
    fn op<F>(&mut self, target: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let seed = derive_seed(self.seed, self.rows.len() as u64);
        let report = finite_diff_check_many(
            |tape, v| {
                let out = f(tape, v)?;
                weighted_sum(tape, out, seed)
            },
            &inputs,
            Difference::Central(GRAD_EPS),
            None,
        )?;
        self.record(target, report);
        Ok(())
    }

    /// Like [`Suite::op`] for functions of a parameter store plus leading
    /// data inputs. `scalar_loss` skips the weighted sum.
    #[allow(clippy::too_many_arguments)]
    fn with_store<F>(
        &mut self,
        target: &str,
        data: Vec<Tensor<f64>>,
        store: &ParameterStore<f64>,
        sample: Option<usize>,
        scalar_loss: bool,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
    {
        let n = data.len();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut inputs = data;
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let seed = derive_seed(self.seed, self.rows.len() as u64);
        let report = finite_diff_check_many(
            |tape, v| {
                let p = Bound::from_vars(names.iter().cloned(), &v[n..]);
                let out = f(tape, &p, &v[..n])?;
                if scalar_loss { Ok(out) } else { weighted_sum(tape, out, seed) }
            },
            &inputs,
            if self.scope == Scope::Network { Difference::Richardson(NETWORK_STEP) } else { Difference::Central(GRAD_EPS) },
            sample.map(|k| (k, seed)),
        )?;
        self.record(target, report);
        Ok(())
    }
}

fn ops(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.rand(&[3, 4, 2], -1.0, 1.0), s.rand(&[4, 1], -1.0, 1.0));
    s.op("add (broadcast)", vec![a, b], |t, v| t.add(v[0], v[1]))?;
    let (a, b) = (s.rand(&[2, 3], -1.0, 1.0), s.rand(&[2, 3], -1.0, 1.0));
    s.op("sub", vec![a, b], |t, v| t.sub(v[0], v[1]))?;
    let (a, b) = (s.rand(&[3, 4, 2], -1.0, 1.0), s.rand(&[2], -1.0, 1.0));
    s.op("mul (broadcast)", vec![a, b], |t, v| t.mul(v[0], v[1]))?;
    let (a, b) = (s.rand(&[2, 3], -1.0, 1.0), s.away_from_zero(&[2, 3], 0.5, 2.0));
    s.op("div", vec![a, b], |t, v| t.div(v[0], v[1]))?;
    let a = s.rand(&[2, 3], -1.0, 1.0);
    s.op("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7))?;
    s.op("add_scalar", vec![a], |t, v| t.add_scalar(v[0], 0.3))?;

    let (a, b) = (s.rand(&[3, 4], -1.0, 1.0), s.rand(&[4, 5], -1.0, 1.0));
    s.op("matmul", vec![a, b], |t, v| t.matmul(v[0], v[1]))?;
    let (a, b) = (s.rand(&[2, 3, 4], -1.0, 1.0), s.rand(&[2, 4, 5], -1.0, 1.0));
    s.op("matmul (batched)", vec![a, b], |t, v| t.matmul(v[0], v[1]))?;
    let (a, b) = (s.rand(&[2, 3, 4], -1.0, 1.0), s.rand(&[4, 5], -1.0, 1.0));
    s.op("matmul (shared rhs)", vec![a, b], |t, v| t.matmul(v[0], v[1]))?;
    let (a, b) = (s.rand(&[4, 3], -1.0, 1.0), s.rand(&[4, 3], -1.0, 1.0));
    s.op("attention_matmul", vec![a, b], |t, v| {
        let at = t.transpose(v[0])?;
        t.attention_matmul(at, v[1])
    })?;

    let a = s.rand(&[2, 3, 4], -1.0, 1.0);
    s.op("transpose", vec![a.clone()], |t, v| t.transpose(v[0]))?;
    s.op("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4]))?;
    s.op("narrow", vec![a.clone()], |t, v| t.narrow(v[0], 1, 1, 2))?;
    s.op("split", vec![a.clone()], |t, v| {
        let parts = t.split(v[0], 2, &[1, 3])?;
        let sq = t.mul(parts[0], parts[0])?;
        let tail = t.sum(parts[1])?;
        t.add(sq, tail)
    })?;
    let (a, b) = (s.rand(&[2, 2, 1], -1.0, 1.0), s.rand(&[2, 2, 3], -1.0, 1.0));
    s.op("concat", vec![a, b], |t, v| t.concat(&[v[0], v[1]], 2))?;
    let a = s.rand(&[3, 3, 3], -1.0, 1.0);
    s.op("mean_over_axis", vec![a.clone()], |t, v| t.mean_over_axis(v[0], 2))?;
    s.op("sum", vec![a.clone()], |t, v| t.sum(v[0]))?;
    s.op("mean", vec![a], |t, v| t.mean(v[0]))?;
    let a = s.away_from_zero(&[3, 4], 0.2, 1.0);
    s.op("abs", vec![a], |t, v| t.abs(v[0]))?;
    let a = s.rand(&[4, 5], -2.0, 2.0);
    s.op("softmax (axis 0)", vec![a.clone()], |t, v| t.softmax(v[0], 0))?;
    s.op("softmax (axis 1)", vec![a], |t, v| t.softmax(v[0], 1))?;
    let a = s.rand(&[3, 5], -3.0, 3.0);
    s.op("gelu", vec![a], |t, v| t.gelu(v[0]))?;
    let a = s.away_from_zero(&[4], 0.1, 2.0);
    s.op("floor_abs", vec![a], |t, v| t.floor_abs(v[0], 1e-3))?;
    let (x, g, b) = (s.rand(&[2, 3, 5], -1.0, 1.0), s.rand(&[5], 0.5, 1.5), s.rand(&[5], -0.5, 0.5));
    s.op("layer_norm", vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;

    let convs = [
        ("conv2d 3x3", ConvSpec::same(3, 2, 3), [5, 5]),
        ("conv2d 4x4 stride 2", ConvSpec::downsample(2, 3), [6, 6]),
        ("conv2d 1x1", ConvSpec::pointwise(3, 2), [3, 4]),
        ("conv2d depthwise 3x3", ConvSpec::depthwise(3, 3).without_bias(), [5, 5]),
        ("conv2d depthwise 9x9", ConvSpec::depthwise(9, 2), [6, 6]),
    ];
    for (name, spec, [h, w]) in convs {
        let x = s.rand(&[h, w, spec.in_channels], -1.0, 1.0);
        let wt = s.rand(&spec.weight_shape(), -0.5, 0.5);
        let mut inputs = vec![x, wt];
        if spec.bias {
            inputs.push(s.rand(&[spec.out_channels], -0.5, 0.5));
        }
        s.op(name, inputs, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), spec))?;
    }
    let (x, w, b) = (s.rand(&[3, 2, 3], -1.0, 1.0), s.rand(&[3, 2, 2, 2], -0.5, 0.5), s.rand(&[2], -0.5, 0.5));
    s.op("conv_transpose2d 2x2", vec![x, w, b], |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2])))
}

fn randomized<F>(seed: u64, register: F) -> Result<ParameterStore<f64>>
where
    F: FnOnce(&mut ParameterStore<f64>, &mut ChaCha8Rng) -> Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    register(&mut store, &mut rng)?;
    network::randomize_all(&mut store, seed ^ 0x5a5a);
    Ok(store)
}

fn layers(s: &mut Suite) -> Result<()> {
    let seed = s.seed;
    let ln = randomized(seed, |st, _| nn::LayerNormParams::new(4).register(st, "ln"))?;
    let x = s.rand(&[3, 3, 4], -1.0, 1.0);
    s.with_store("layer norm", vec![x], &ln, None, false, |t, p, d| nn::layer_norm(t, p, "ln", d[0]))?;

    let spec = ConvSpec::downsample(3, 4);
    let conv = randomized(seed, |st, r| nn::register_conv(st, "c", &spec, r))?;
    let x = s.rand(&[4, 4, 3], -1.0, 1.0);
    s.with_store("conv layer", vec![x], &conv, None, false, move |t, p, d| nn::conv(t, p, "c", d[0], spec))?;

    let deconv = randomized(seed, |st, r| nn::register_deconv(st, "up", 4, 2, r))?;
    let x = s.rand(&[2, 3, 4], -1.0, 1.0);
    s.with_store("deconv layer", vec![x], &deconv, None, false, |t, p, d| nn::deconv(t, p, "up", d[0]))?;

    let ffn = randomized(seed, |st, r| nn::register_ffn(st, "ffn", 3, r))?;
    let x = s.rand(&[3, 2, 3], -1.0, 1.0);
    s.with_store("feed-forward", vec![x], &ffn, None, false, |t, p, d| nn::ffn(t, p, "ffn", d[0]))?;

    let est = randomized(seed, |st, r| retinex::register_estimator(st, 4, r))?;
    let (img, target) = (s.rand(&[5, 5, 3], 0.0, 1.0), s.rand(&[5, 5, 3], 0.0, 1.0));
    s.with_store("estimator (MAE of lit image)", vec![img, target], &est, None, true, |t, p, d| {
        let e = retinex::estimate_illumination(t, p, d[0])?;
        mae_loss(t, e.lit_image, d[1])
    })?;
    let img = s.rand(&[5, 5, 3], 0.0, 1.0);
    s.with_store("estimator (light-up feature)", vec![img], &est, None, false, |t, p, d| {
        Ok(retinex::estimate_illumination(t, p, d[0])?.light_up_feature)
    })?;

    for heads in [1, 2] {
        let store = randomized(seed + heads as u64, |st, r| {
            attention::register_attention(st, "attn", 4, heads, PositionalEncoding::Conv, r)
        })?;
        let (x, y) = (s.rand(&[3, 4, 4], -1.0, 1.0), s.rand(&[3, 4, 4], -1.0, 1.0));
        s.with_store(&format!("ig-msa k={heads}"), vec![x, y], &store, None, false, move |t, p, d| {
            Ok(attention::ig_msa(t, p, "attn", d[0], Some(d[1]), heads)?.output)
        })?;
    }
    let table = PositionalEncoding::Table { height: 2, width: 3 };
    let store = randomized(seed, |st, r| attention::register_attention(st, "attn", 4, 2, table, r))?;
    let (x, y) = (s.rand(&[2, 3, 4], -1.0, 1.0), s.rand(&[2, 3, 4], -1.0, 1.0));
    s.with_store("ig-msa fixed table", vec![x, y], &store, None, false, |t, p, d| {
        Ok(attention::ig_msa(t, p, "attn", d[0], Some(d[1]), 2)?.output)
    })
}

fn blocks(s: &mut Suite) -> Result<()> {
    let seed = s.seed;
    for heads in [1, 2] {
        let store = randomized(seed + heads as u64, |st, r| {
            attention::register_igab(st, "b", 4, heads, PositionalEncoding::Conv, r)
        })?;
        let (x, y) = (s.rand(&[4, 4, 4], -1.0, 1.0), s.rand(&[4, 4, 4], -1.0, 1.0));
        s.with_store(&format!("igab k={heads}"), vec![x, y], &store, None, false, move |t, p, d| {
            attention::igab(t, p, "b", d[0], Some(d[1]), heads)
        })?;
    }
    let store = randomized(seed, |st, r| attention::register_igab(st, "b", 4, 2, PositionalEncoding::Conv, r))?;
    let x = s.rand(&[4, 4, 4], -1.0, 1.0);
    s.with_store("igab ungated", vec![x], &store, None, false, |t, p, d| attention::igab(t, p, "b", d[0], None, 2))?;

    let store = randomized(seed, |st, r| {
        nn::register_conv(st, "igt.flu_down0", &ConvSpec::downsample(2, 4), r)?;
        nn::register_conv(st, "igt.flu_down1", &ConvSpec::downsample(4, 8), r)
    })?;
    let f = s.rand(&[8, 8, 2], -1.0, 1.0);
    s.with_store("light-up feature pyramid", vec![f], &store, None, false, |t, p, d| {
        network::downscale_flu(t, p, d[0], 2)
    })
}

/// Configuration used by the whole-network check: 8×8 inputs, `C = 4`.
pub fn small_config() -> ModelConfig {
    ModelConfig { base_channels: 4, crop_size: 8, ..ModelConfig::default() }
}

fn network_checks(s: &mut Suite) -> Result<()> {
    let config = small_config();
    let mut store = network::init_parameters::<f64>(&config, s.seed)?;
    network::randomize_all(&mut store, s.seed ^ 0xabc);
    for mode in [OrfMode::Full, OrfMode::LightUpMap, OrfMode::NoOrf] {
        let (img, target) = (s.rand(&[8, 8, 3], 0.0, 1.0), s.rand(&[8, 8, 3], 0.0, 1.0));
        let cfg = config.clone();
        s.with_store(
            &format!("framework {} (MAE)", mode.name()),
            vec![img, target],
            &store,
            Some(NETWORK_SAMPLES),
            true,
            move |t, p, d| {
                let out = retinex::orf_forward(t, p, &cfg, d[0], mode)?;
                mae_loss(t, out.enhanced, d[1])
            },
        )?;
    }
    Ok(())
}

/// Runs every check in `scope`.
pub fn grad_check(scope: Scope, seed: u64) -> Result<Vec<CheckRow>> {
    let mut suite = Suite::new(scope, seed);
    match scope {
        Scope::Ops => ops(&mut suite)?,
        Scope::Layers => layers(&mut suite)?,
        Scope::Blocks => blocks(&mut suite)?,
        Scope::Network => network_checks(&mut suite)?,
    }
    Ok(suite.rows)
}

/// Grid used by the FLOP report when none is given.
pub fn default_flop_grid() -> Vec<(usize, usize, usize, usize)> {
    let mut grid = Vec::new();
    for (h, w) in [(8, 8), (16, 16), (32, 16), (32, 32)] {
        for (c, k) in [(8, 1), (8, 2), (16, 4)] {
            grid.push((h, w, c, k));
        }
    }
    grid
}
