//! Layers used by the estimator and the transformer: convolutions, layer
//! normalization, GELU and the feed-forward block.
//!
//! Each layer comes as a `register_*` function that adds its parameters to a
//! [`ParameterStore`] under a name prefix, plus a forward function that looks
//! them up again in a [`Bound`] view of the same store.

pub(crate) mod kernels;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Geometry of a 2-D convolution. Padding is always zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel_size,
            stride,
            padding,
            groups: 1,
            in_channels: cin,
            out_channels: cout,
            bias: true,
        }
    }

    /// 1×1 convolution.
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::new(1, 1, 0, cin, cout)
    }

    /// Odd `k×k` convolution that preserves spatial size.
    pub fn same(k: usize, cin: usize, cout: usize) -> Self {
        Self::new(k, 1, k / 2, cin, cout)
    }

    /// 4×4 stride-2 convolution with padding 1: halves even sizes exactly.
    pub fn downsample(cin: usize, cout: usize) -> Self {
        Self::new(4, 2, 1, cin, cout)
    }

    /// Size-preserving `k×k` depthwise convolution (`groups == channels`).
    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvSpec { groups: channels, ..Self::same(k, channels, channels) }
    }

    pub fn without_bias(self) -> Self {
        ConvSpec { bias: false, ..self }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0
        {
            return Err(Error::config(format!("degenerate convolution {self:?}")));
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::config(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.groups != 1 && !self.is_depthwise() {
            return Err(Error::config(format!(
                "only dense (groups = 1) and depthwise (groups = channels) convolutions are supported, got groups {}",
                self.groups
            )));
        }
        Ok(())
    }

    /// `[k, k, cin/groups, cout]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel_size, self.kernel_size, self.in_channels / self.groups, self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_size * self.kernel_size * self.in_channels / self.groups
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel_size {
                return Err(Error::shape(format!(
                    "input extent {n} too small for kernel {} with padding {}",
                    self.kernel_size, self.padding
                )));
            }
            Ok((padded - self.kernel_size) / self.stride + 1)
        };
        Ok((out(h)?, out(w)?))
    }
}

/// Affine terms of a channel layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: T,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNormParams<T> {
    /// Identity affine (`gamma = 1`, `beta = 0`).
    pub fn new(channels: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            epsilon: T::from_f64_lossy(LAYER_NORM_EPS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.shape() != self.beta.shape() || self.gamma.rank() != 1 {
            return Err(Error::config("layer norm gamma/beta must both be [C]"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::config("layer norm epsilon must be positive"));
        }
        Ok(())
    }

    pub fn register(self, store: &mut ParameterStore<T>, prefix: &str) -> Result<()> {
        self.validate()?;
        store.insert(format!("{prefix}.gamma"), self.gamma)?;
        store.insert(format!("{prefix}.beta"), self.beta)
    }
}

pub fn register_conv<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    spec: &ConvSpec,
    rng: &mut R,
) -> Result<()> {
    spec.validate()?;
    store.insert(
        format!("{prefix}.weight"),
        uniform_fan_in(spec.weight_shape().to_vec(), spec.fan_in(), rng),
    )?;
    if spec.bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![spec.out_channels]))?;
    }
    Ok(())
}

pub fn conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = if spec.bias { Some(p.var(&format!("{prefix}.bias"))?) } else { None };
    tape.conv2d(x, w, b, spec)
}

/// Weight `[cin, 2, 2, cout]` and bias `[cout]` of a stride-2 transposed conv.
pub fn register_deconv<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.weight"), uniform_fan_in(vec![cin, 2, 2, cout], cin, rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![cout]))
}

pub fn deconv<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.conv_transpose2d(x, w, Some(b))
}

pub fn layer_norm<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gamma"))?;
    let b = p.var(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))
}

/// Hidden width multiplier of the feed-forward block.
pub const FFN_EXPANSION: usize = 4;

pub fn ffn_specs(dim: usize) -> [ConvSpec; 2] {
    [ConvSpec::pointwise(dim, FFN_EXPANSION * dim), ConvSpec::pointwise(FFN_EXPANSION * dim, dim)]
}

pub fn register_ffn<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    let [fc1, fc2] = ffn_specs(dim);
    register_conv(store, &format!("{prefix}.fc1"), &fc1, rng)?;
    register_conv(store, &format!("{prefix}.fc2"), &fc2, rng)
}

/// conv1×1 (C→4C) → GELU → conv1×1 (4C→C).
pub fn ffn<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let dim = *tape.shape(x).last().unwrap_or(&0);
    let [fc1, fc2] = ffn_specs(dim);
    let h = conv(tape, p, &format!("{prefix}.fc1"), x, fc1)?;
    let h = tape.gelu(h)?;
    conv(tape, p, &format!("{prefix}.fc2"), h, fc2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_law() {
        assert_eq!(ConvSpec::downsample(4, 8).output_size(64, 32).unwrap(), (32, 16));
        assert_eq!(ConvSpec::same(3, 1, 1).output_size(5, 5).unwrap(), (5, 5));
        assert_eq!(ConvSpec::depthwise(9, 4).output_size(7, 7).unwrap(), (7, 7));
        assert!(ConvSpec::new(5, 1, 0, 1, 1).output_size(3, 8).is_err());
    }

    #[test]
    fn rejects_bad_groups() {
        let mut s = ConvSpec::pointwise(6, 6);
        s.groups = 4;
        assert!(s.validate().is_err());
        s.groups = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        assert!(ConvSpec::depthwise(3, 6).validate().is_ok());
    }
}
