//! Parameterized layers shared by the model components.

use bivad_tensor::ops::{channel_norm, conv2d, conv_transpose2d};
use bivad_tensor::{Param, Real, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Anything owning learnable parameters.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Convolution with bias, stride 1 or 2, "same" padding.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Real> Conv<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: Param::init_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], fan_in, rng),
            bias: Param::init_uniform(format!("{name}.bias"), &[c_out], fan_in, rng),
            stride,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(conv2d(x, &Var::param(&self.weight), Some(&Var::param(&self.bias)), self.stride)?)
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Transposed convolution with bias; output is `stride` times larger.
#[derive(Debug, Clone)]
pub struct ConvTranspose<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
}

impl<T: Real> ConvTranspose<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: Param::init_uniform(format!("{name}.weight"), &[c_in, c_out, k, k], fan_in, rng),
            bias: Param::init_uniform(format!("{name}.bias"), &[c_out], fan_in, rng),
            stride,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(conv_transpose2d(x, &Var::param(&self.weight), Some(&Var::param(&self.bias)), self.stride)?)
    }
}

impl<T: Real> Module<T> for ConvTranspose<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Channel-wise spatial normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct ChannelNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Real> ChannelNorm<T> {
    pub fn new(name: &str, channels: usize, eps: f64) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(channel_norm(x, &Var::param(&self.gamma), &Var::param(&self.beta), self.eps)?)
    }
}

impl<T: Real> Module<T> for ChannelNorm<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Sets every parameter in `params` to zero.
pub fn zero_params<T: Real>(params: &[Param<T>]) {
    for p in params {
        p.set_value(Tensor::zeros(&p.shape())).expect("same shape");
    }
}
