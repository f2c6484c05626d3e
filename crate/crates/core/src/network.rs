//! The illumination-guided transformer restorer: a three-scale U-shape of
//! IGAB blocks whose attention at every scale is guided by a matching level
//! of the light-up feature pyramid.
//!
//! ```text
//! I_lu ─conv3×3─ IGAB ─┬─ down ─ 2×IGAB ─┬─ down ─ 2×IGAB ─ up ─ fuse(F₁) ─ 2×IGAB ─ up ─ fuse(F₀) ─ IGAB ─conv3×3─ I_re
//!                      F₀                F₁
//! I_en = I_lu + I_re
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, PositionalEncoding};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::params::{Bound, ParameterStore};
use crate::retinex;
use crate::tensor::{Real, Tensor};

/// Number of scales of the U-shape.
pub const SCALES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width `C` at full resolution; scale `i` uses `2ⁱC`.
    pub base_channels: usize,
    /// Attention heads at each scale.
    pub heads: [usize; SCALES],
    /// IGABs per encoder stage and in the bottleneck; the decoder mirrors the encoder.
    pub blocks: [usize; SCALES],
    /// Training crop size; also the resolution of fixed positional tables.
    pub crop_size: usize,
    /// Use fixed-resolution positional tables instead of the conv encoding.
    pub fixed_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            heads: [1, 2, 4],
            blocks: [1, 2, 2],
            crop_size: 64,
            fixed_positional: false,
        }
    }
}

impl ModelConfig {
    pub fn with_channels(base_channels: usize) -> Self {
        ModelConfig { base_channels, ..Self::default() }
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("base channel count must be positive"));
        }
        for s in 0..SCALES {
            if self.heads[s] == 0 || !self.width(s).is_multiple_of(self.heads[s]) {
                return Err(Error::config(format!(
                    "scale {s}: {} channels not divisible by {} heads",
                    self.width(s),
                    self.heads[s]
                )));
            }
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(4) {
            return Err(Error::config(format!("crop size {} is not a multiple of 4", self.crop_size)));
        }
        Ok(())
    }

    fn positional(&self, scale: usize) -> PositionalEncoding {
        if self.fixed_positional {
            let side = self.crop_size >> scale;
            PositionalEncoding::Table { height: side, width: side }
        } else {
            PositionalEncoding::Conv
        }
    }

    /// Stage name, scale index and block count, in forward order.
    fn stages(&self) -> [(&'static str, usize, usize); 5] {
        [
            ("enc0", 0, self.blocks[0]),
            ("enc1", 1, self.blocks[1]),
            ("bottleneck", 2, self.blocks[2]),
            ("dec1", 1, self.blocks[1]),
            ("dec0", 0, self.blocks[0]),
        ]
    }
}

fn convs(c: usize) -> Vec<(&'static str, ConvSpec)> {
    vec![
        ("igt.embed", ConvSpec::same(3, 3, c)),
        ("igt.down0", ConvSpec::downsample(c, 2 * c)),
        ("igt.flu_down0", ConvSpec::downsample(c, 2 * c)),
        ("igt.down1", ConvSpec::downsample(2 * c, 4 * c)),
        ("igt.flu_down1", ConvSpec::downsample(2 * c, 4 * c)),
        ("igt.fuse1", ConvSpec::pointwise(4 * c, 2 * c)),
        ("igt.fuse0", ConvSpec::pointwise(2 * c, c)),
        ("igt.out", ConvSpec::same(3, c, 3)),
    ]
}

fn spec_of(c: usize, name: &str) -> ConvSpec {
    convs(c).into_iter().find(|(n, _)| *n == name).expect("known conv").1
}

/// Builds every parameter of the estimator and the restorer.
///
/// Weights are fan-in scaled uniform, biases zero, `alpha = 1`, layer norms
/// identity. The estimator's output bias is 1 so the light-up map starts near
/// one, and the restorer's last conv is all zeros so `I_en = I_lu` at step 0.
pub fn init_parameters<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    config.validate()?;
    let c = config.base_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    retinex::register_estimator(&mut store, c, &mut rng)?;

    let all = convs(c);
    let conv = |store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, name: &str| {
        let spec = all.iter().find(|(n, _)| *n == name).expect("known conv").1;
        nn::register_conv(store, name, &spec, rng)
    };
    let blocks = |store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, stage: &str, scale: usize, n: usize| {
        (0..n).try_for_each(|j| {
            attention::register_igab(
                store,
                &format!("igt.{stage}.igab{j}"),
                config.width(scale),
                config.heads[scale],
                config.positional(scale),
                rng,
            )
        })
    };
    let [enc0, enc1, bottleneck, dec1, dec0] = config.stages();

    conv(&mut store, &mut rng, "igt.embed")?;
    blocks(&mut store, &mut rng, enc0.0, enc0.1, enc0.2)?;
    conv(&mut store, &mut rng, "igt.down0")?;
    conv(&mut store, &mut rng, "igt.flu_down0")?;
    blocks(&mut store, &mut rng, enc1.0, enc1.1, enc1.2)?;
    conv(&mut store, &mut rng, "igt.down1")?;
    conv(&mut store, &mut rng, "igt.flu_down1")?;
    blocks(&mut store, &mut rng, bottleneck.0, bottleneck.1, bottleneck.2)?;
    nn::register_deconv(&mut store, "igt.up1", 4 * c, 2 * c, &mut rng)?;
    conv(&mut store, &mut rng, "igt.fuse1")?;
    blocks(&mut store, &mut rng, dec1.0, dec1.1, dec1.2)?;
    nn::register_deconv(&mut store, "igt.up0", 2 * c, c, &mut rng)?;
    conv(&mut store, &mut rng, "igt.fuse0")?;
    blocks(&mut store, &mut rng, dec0.0, dec0.1, dec0.2)?;
    conv(&mut store, &mut rng, "igt.out")?;
    store.get_mut("igt.out.weight")?.data_mut().iter_mut().for_each(|v| *v = T::zero());
    Ok(store)
}

impl ModelConfig {
    /// Recovers the architecture from a store built by [`init_parameters`].
    /// A store that matches no configuration is reported as corrupt.
    pub fn from_store<T: Real>(store: &ParameterStore<T>) -> Result<Self> {
        let embed = store
            .get("igt.embed.weight")
            .map_err(|_| Error::corrupt("igt.embed.weight", "tensor missing"))?;
        let base_channels = match embed.shape() {
            [3, 3, 3, c] => *c,
            other => return Err(Error::corrupt("igt.embed.weight", format!("unexpected shape {other:?}"))),
        };
        let count = |f: &dyn Fn(usize) -> String| (0..).take_while(|&i| store.contains(&f(i))).count();
        let stages = ["enc0", "enc1", "bottleneck"];
        let blocks: [usize; SCALES] = std::array::from_fn(|s| count(&|j| format!("igt.{}.igab{j}.norm1.gamma", stages[s])));
        let heads: [usize; SCALES] =
            std::array::from_fn(|s| count(&|i| format!("igt.{}.igab0.attn.alpha.head{i}", stages[s])));
        let (fixed_positional, crop_size) = match store.get("igt.enc0.igab0.attn.pos.table") {
            Ok(t) => (true, (t.shape()[0] as f64).sqrt().round() as usize),
            Err(_) => (false, Self::default().crop_size),
        };
        let config = ModelConfig { base_channels, heads, blocks, crop_size, fixed_positional };
        let corrupt = |m: String| Error::corrupt("tensor set", m);
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        let expected = count_parameters(&config)?;
        if expected != store.num_elements() || blocks.contains(&0) {
            return Err(corrupt(format!(
                "{} values stored, architecture {config:?} needs {expected}",
                store.num_elements()
            )));
        }
        Ok(config)
    }
}

/// Closed-form parameter count of [`init_parameters`].
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let c = config.base_channels;
    let conv_total: usize = convs(c).iter().map(|(_, s)| s.parameter_count()).sum();
    let deconv = |cin: usize, cout: usize| cin * 4 * cout + cout;
    let blocks: usize = config
        .stages()
        .iter()
        .map(|&(_, scale, n)| {
            n * attention::igab_parameter_count(config.width(scale), config.heads[scale], config.positional(scale))
        })
        .sum();
    Ok(retinex::estimator_parameter_count(c) + conv_total + deconv(4 * c, 2 * c) + deconv(2 * c, c) + blocks)
}

/// The light-up feature at `level` (0, 1 or 2): identity at level 0, one
/// channel-doubling strided conv4×4 per further level.
pub fn downscale_flu<T: Real>(tape: &mut Tape<T>, p: &Bound, f_lu: Var, level: usize) -> Result<Var> {
    if level >= SCALES {
        return Err(Error::usage(format!("light-up feature level {level} out of range 0..{SCALES}")));
    }
    let mut f = f_lu;
    for l in 0..level {
        let c = tape.value(f).hwc()?.2;
        let name = format!("igt.flu_down{l}");
        f = nn::conv(tape, p, &name, f, ConvSpec::downsample(c, 2 * c))?;
    }
    Ok(f)
}

#[derive(Clone, Copy, Debug)]
pub struct IgtOutput {
    /// `I_en = I_lu + I_re`.
    pub enhanced: Var,
    /// `I_re`, the restorer's residual.
    pub residual: Var,
}

pub(crate) fn check_divisible(shape: &[usize]) -> Result<()> {
    match shape {
        [h, w, 3] if h % 4 == 0 && w % 4 == 0 => Ok(()),
        [h, w, 3] => Err(Error::shape(format!(
            "image is {h}×{w}; height and width must be divisible by 4 for the three-scale network"
        ))),
        other => Err(Error::shape(format!("expected an H×W×3 image, got {other:?}"))),
    }
}

/// Restorer forward pass. `f_lu = None` runs every attention block ungated.
pub fn igt_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &ModelConfig,
    lit: Var,
    f_lu: Option<Var>,
) -> Result<IgtOutput> {
    check_divisible(tape.shape(lit))?;
    let c = config.base_channels;
    let guides: [Option<Var>; SCALES] = match f_lu {
        Some(f) => {
            let g1 = downscale_flu(tape, p, f, 1)?;
            let g2 = nn::conv(tape, p, "igt.flu_down1", g1, spec_of(c, "igt.flu_down1"))?;
            [Some(f), Some(g1), Some(g2)]
        }
        None => [None; SCALES],
    };
    let stage = |tape: &mut Tape<T>, name: &str, scale: usize, n: usize, mut x: Var| -> Result<Var> {
        for j in 0..n {
            let prefix = format!("igt.{name}.igab{j}");
            x = attention::igab(tape, p, &prefix, x, guides[scale], config.heads[scale])?;
        }
        Ok(x)
    };
    let [enc0, enc1, bottleneck, dec1, dec0] = config.stages();

    let x = nn::conv(tape, p, "igt.embed", lit, spec_of(c, "igt.embed"))?;
    let f0 = stage(tape, enc0.0, enc0.1, enc0.2, x)?;
    let x = nn::conv(tape, p, "igt.down0", f0, spec_of(c, "igt.down0"))?;
    let f1 = stage(tape, enc1.0, enc1.1, enc1.2, x)?;
    let x = nn::conv(tape, p, "igt.down1", f1, spec_of(c, "igt.down1"))?;
    let x = stage(tape, bottleneck.0, bottleneck.1, bottleneck.2, x)?;

    let x = nn::deconv(tape, p, "igt.up1", x)?;
    let x = tape.concat(&[x, f1], 2)?;
    let x = nn::conv(tape, p, "igt.fuse1", x, spec_of(c, "igt.fuse1"))?;
    let x = stage(tape, dec1.0, dec1.1, dec1.2, x)?;

    let x = nn::deconv(tape, p, "igt.up0", x)?;
    let x = tape.concat(&[x, f0], 2)?;
    let x = nn::conv(tape, p, "igt.fuse0", x, spec_of(c, "igt.fuse0"))?;
    let x = stage(tape, dec0.0, dec0.1, dec0.2, x)?;

    let residual = nn::conv(tape, p, "igt.out", x, spec_of(c, "igt.out"))?;
    let enhanced = tape.add(lit, residual)?;
    Ok(IgtOutput { enhanced, residual })
}

/// Resamples every weight with fresh values, keeping layer-norm and `alpha`
/// terms at their defaults. Used where a zero-initialized layer would hide
/// gradients from the rest of the network.
pub fn randomize_all<T: Real>(store: &mut ParameterStore<T>, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".gamma") || name.contains(".alpha.") {
            continue;
        }
        let fan_in = match t.shape() {
            [k, k2, cin, _] if k == k2 => k * k2 * cin,
            [cin, 2, 2, _] => *cin,
            [_, cols] => *cols,
            _ => 16,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = T::from_f64_lossy(rng.random_range(-bound..bound));
        }
    }
}

/// Convenience check that an image tensor has a valid network shape.
pub fn validate_image<T: Real>(image: &Tensor<T>) -> Result<()> {
    check_divisible(image.shape())
}
