//! Parameterized layers.

use std::rc::Rc;

use crate::param::{Init, InitKind, Param};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Reflect,
}

pub struct Conv2d<F: Scalar> {
    pub weight: Rc<Param<F>>,
    pub bias: Option<Rc<Param<F>>>,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal weights, zero bias.
    pub fn new(init: &mut Init<'_, F>, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let weight = init.param("weight", &[out_ch, in_ch, k, k], InitKind::Normal { std: (2.0 / fan_in).sqrt() });
        let bias = Some(init.param("bias", &[out_ch], InitKind::Const(0.0)));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            padding: Padding::Zeros,
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let w = self.weight.value();
        let b = self.bias.as_ref().map(|b| b.value());
        match self.padding {
            Padding::Reflect if self.pad > 0 => x.pad_reflect(self.pad).conv2d(&w, b.as_ref(), self.stride, 0),
            _ => x.conv2d(&w, b.as_ref(), self.stride, self.pad),
        }
    }
}

pub struct Linear<F: Scalar> {
    pub weight: Rc<Param<F>>,
    pub bias: Rc<Param<F>>,
}

impl<F: Scalar> Linear<F> {
    /// Uniform `±1/sqrt(in)` weights and bias.
    pub fn new(init: &mut Init<'_, F>, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: init.param("weight", &[out_dim, in_dim], InitKind::Uniform { bound }),
            bias: init.param("bias", &[out_dim], InitKind::Uniform { bound }),
        }
    }

    /// He-normal weights for layers followed by a rectifier.
    pub fn he(init: &mut Init<'_, F>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: init.param("weight", &[out_dim, in_dim], InitKind::Normal { std: (2.0 / in_dim as f64).sqrt() }),
            bias: init.param("bias", &[out_dim], InitKind::Const(0.0)),
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(init: &mut Init<'_, F>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: init.param("weight", &[out_dim, in_dim], InitKind::Const(0.0)),
            bias: init.param("bias", &[out_dim], InitKind::Const(0.0)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.linear(&self.weight.value(), Some(&self.bias.value()))
    }
}

pub struct Embedding<F: Scalar> {
    pub table: Rc<Param<F>>,
}

impl<F: Scalar> Embedding<F> {
    pub fn new(init: &mut Init<'_, F>, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: init.param("table", &[vocab, dim], InitKind::Normal { std: 0.1 }),
        }
    }

    pub fn forward(&self, ids: &[usize], index_shape: &[usize]) -> Tensor<F> {
        Tensor::embedding(&self.table.value(), ids, index_shape)
    }
}

/// Instance normalization with optional per-channel affine parameters.
pub struct InstanceNorm2d<F: Scalar> {
    pub eps: f64,
    pub affine: Option<(Rc<Param<F>>, Rc<Param<F>>)>,
}

impl<F: Scalar> InstanceNorm2d<F> {
    pub fn new(init: &mut Init<'_, F>, channels: usize, eps: f64, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                init.param("gamma", &[1, channels, 1, 1], InitKind::Const(1.0)),
                init.param("beta", &[1, channels, 1, 1], InitKind::Const(0.0)),
            )
        });
        InstanceNorm2d { eps, affine }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let y = x.instance_norm(self.eps);
        match &self.affine {
            Some((g, b)) => y.mul(&g.value()).add(&b.value()),
            None => y,
        }
    }
}

/// Leaky-ReLU slope used across the networks in this workspace.
pub const LEAKY_SLOPE: f64 = 0.2;
