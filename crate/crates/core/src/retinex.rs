//! One-stage Retinex framework: an illumination estimator produces a
//! light-up map `L̄` and a light-up feature `F_lu`; the lit image
//! `I_lu = I ⊙ L̄` and `F_lu` feed the restorer, which outputs `I_en`.
//!
//! The estimator predicts the multiplicative inverse of the illumination, so
//! lighting up is a product. The division-based alternative is only reachable
//! through [`OrfMode::DivideIllumination`].

use log::warn;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{self, ModelConfig};
use crate::nn::{self, ConvSpec};
use crate::params::{Bound, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Offset added to the estimated illumination before dividing by it.
pub const DIVIDE_EPSILON: f64 = 1e-4;

/// Light-up maps larger than this in magnitude trigger a warning.
pub const LIGHT_UP_WARN_LIMIT: f64 = 10.0;

/// Per-pixel channel mean of an image, `H×W×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationPrior<T = f32> {
    pub map: Tensor<T>,
}

pub fn illumination_prior<T: Real>(image: &Tensor<T>) -> Result<IlluminationPrior<T>> {
    let (h, w, c) = image.hwc()?;
    let inv = T::one() / T::from_usize(c).unwrap();
    let data = image.data().chunks_exact(c).map(|px| px.iter().copied().sum::<T>() * inv).collect();
    Ok(IlluminationPrior { map: Tensor::new(vec![h, w, 1], data)? })
}

/// Parameters of the synthetic corruption `I = (R + R̂) ⊙ (L + L̂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationConfig {
    /// Lower bound `l_min` of the illumination field `L ∈ [l_min, 1]`.
    pub illumination_min: f64,
    /// Half-width of the smooth illumination perturbation `L̂`.
    pub illumination_perturbation: f64,
    /// Standard deviation of the per-pixel reflectance noise `R̂`.
    pub noise_sigma: f64,
    /// Side of the coarse random grid that is upsampled into smooth fields.
    pub coarse_grid: usize,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            illumination_min: 0.1,
            illumination_perturbation: 0.05,
            noise_sigma: 0.05,
            coarse_grid: 4,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.illumination_min > 0.0 && self.illumination_min <= 1.0) {
            return Err(Error::config(format!(
                "illumination minimum must lie in (0, 1], got {}",
                self.illumination_min
            )));
        }
        if !(self.illumination_perturbation >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma and illumination perturbation must be non-negative"));
        }
        if self.coarse_grid < 2 {
            return Err(Error::config("coarse grid needs at least 2×2 nodes"));
        }
        Ok(())
    }
}

/// Estimator outputs.
#[derive(Clone, Copy, Debug)]
pub struct LightUpOutput {
    /// `L̄`, `H×W×3`.
    pub light_up_map: Var,
    /// `I_lu = I ⊙ L̄`.
    pub lit_image: Var,
    /// `F_lu`, `H×W×C`.
    pub light_up_feature: Var,
}

fn estimator_specs(c: usize) -> [(&'static str, ConvSpec); 3] {
    [
        ("estimator.fuse", ConvSpec::pointwise(4, c)),
        ("estimator.depthwise", ConvSpec::depthwise(9, c)),
        ("estimator.out", ConvSpec::pointwise(c, 3)),
    ]
}

pub fn estimator_parameter_count(c: usize) -> usize {
    estimator_specs(c).iter().map(|(_, s)| s.parameter_count()).sum()
}

pub fn register_estimator<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    for (name, spec) in estimator_specs(channels) {
        nn::register_conv(store, name, &spec, rng)?;
    }
    store.get_mut("estimator.out.bias")?.data_mut().iter_mut().for_each(|v| *v = T::one());
    Ok(())
}

/// Raw estimator: `(map, F_lu)` where `map` is the 3-channel output conv.
fn estimator_core<T: Real>(tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<(Var, Var)> {
    let (_, _, channels) = tape.value(image).hwc()?;
    if channels != 3 {
        return Err(Error::shape(format!("estimator expects an RGB image, got {channels} channels")));
    }
    let c = tape.value(p.var("estimator.depthwise.bias")?).len();
    let [fuse, depthwise, out] = estimator_specs(c);
    let prior = tape.mean_over_axis(image, 2)?;
    let stacked = tape.concat(&[image, prior], 2)?;
    let fused = nn::conv(tape, p, fuse.0, stacked, fuse.1)?;
    let feature = nn::conv(tape, p, depthwise.0, fused, depthwise.1)?;
    let map = nn::conv(tape, p, out.0, feature, out.1)?;
    Ok((map, feature))
}

/// Estimator: `[I, mean_c(I)]` → conv1×1 → depthwise conv9×9 (= `F_lu`) →
/// conv1×1 (= `L̄`), then `I_lu = I ⊙ L̄`. `L̄` is not clamped.
pub fn estimate_illumination<T: Real>(tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<LightUpOutput> {
    let (map, feature) = estimator_core(tape, p, image)?;
    let peak = tape.value(map).max_abs().to_f64_lossy();
    if peak > LIGHT_UP_WARN_LIMIT {
        warn!("light-up map magnitude {peak:.2} exceeds {LIGHT_UP_WARN_LIMIT}");
    }
    let lit = light_up(tape, image, map)?;
    Ok(LightUpOutput { light_up_map: map, lit_image: lit, light_up_feature: feature })
}

/// `I ⊙ L̄`; shapes must match exactly.
pub fn light_up<T: Real>(tape: &mut Tape<T>, image: Var, map: Var) -> Result<Var> {
    if tape.shape(image) != tape.shape(map) {
        return Err(Error::shape(format!(
            "light-up map {:?} does not match image {:?}",
            tape.shape(map),
            tape.shape(image)
        )));
    }
    tape.mul(image, map)
}

/// Variants of the framework compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OrfMode {
    /// No estimator: `I_lu = I`, attention ungated.
    NoOrf,
    /// Estimator predicts `L`; `I_lu = I ./ (L + ε)`, attention ungated.
    DivideIllumination,
    /// Estimator predicts `L̄`; `I_lu = I ⊙ L̄`, attention ungated.
    LightUpMap,
    /// `I_lu = I ⊙ L̄` and `F_lu` guides every attention block.
    Full,
}

impl OrfMode {
    pub const ALL: [OrfMode; 4] =
        [OrfMode::NoOrf, OrfMode::DivideIllumination, OrfMode::LightUpMap, OrfMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            OrfMode::NoOrf => "no_orf",
            OrfMode::DivideIllumination => "divide_L",
            OrfMode::LightUpMap => "lightup_map",
            OrfMode::Full => "lightup_map_plus_flu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        OrfMode::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "full" && *m == OrfMode::Full))
            .ok_or_else(|| Error::usage(format!("unknown mode `{s}`")))
    }
}

/// Every intermediate of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OrfOutput {
    pub lit_image: Var,
    /// Present in modes that run the estimator.
    pub light_up_map: Option<Var>,
    pub light_up_feature: Option<Var>,
    pub residual: Var,
    pub enhanced: Var,
}

/// `(I_lu, F_lu) = E(I, L_p)`, `I_en = R(I_lu, F_lu)` as one graph.
pub fn orf_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    config: &ModelConfig,
    image: Var,
    mode: OrfMode,
) -> Result<OrfOutput> {
    network::check_divisible(tape.shape(image))?;
    let (lit, map, feature, guide) = match mode {
        OrfMode::NoOrf => (image, None, None, None),
        OrfMode::DivideIllumination => {
            let (illum, feature) = estimator_core(tape, p, image)?;
            let shifted = tape.add_scalar(illum, T::from_f64_lossy(DIVIDE_EPSILON))?;
            let lit = tape.div(image, shifted)?;
            (lit, Some(illum), Some(feature), None)
        }
        OrfMode::LightUpMap | OrfMode::Full => {
            let e = estimate_illumination(tape, p, image)?;
            let guide = (mode == OrfMode::Full).then_some(e.light_up_feature);
            (e.lit_image, Some(e.light_up_map), Some(e.light_up_feature), guide)
        }
    };
    let restored = network::igt_forward(tape, p, config, lit, guide)?;
    Ok(OrfOutput {
        lit_image: lit,
        light_up_map: map,
        light_up_feature: feature,
        residual: restored.residual,
        enhanced: restored.enhanced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_is_channel_mean() {
        let img = Tensor::<f64>::new(vec![1, 1, 3], vec![0.3, 0.6, 0.9]).unwrap();
        let p = illumination_prior(&img).unwrap();
        assert_eq!(p.map.shape(), &[1, 1, 1]);
        assert!((p.map.data()[0] - 0.6).abs() < 1e-12);
        let zero = illumination_prior(&Tensor::<f32>::zeros(vec![3, 2, 3])).unwrap();
        assert!(zero.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degradation_validation() {
        assert!(DegradationConfig::default().validate().is_ok());
        let bad = DegradationConfig { illumination_min: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DegradationConfig { noise_sigma: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in OrfMode::ALL {
            assert_eq!(OrfMode::parse(m.name()).unwrap(), m);
        }
        assert!(OrfMode::parse("bogus").is_err());
    }
}
