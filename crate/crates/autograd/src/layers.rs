//! Parameterized building blocks. Each layer only stores [`ParamId`]s; values
//! live in the owning [`ParamStore`] and are bound per graph.

use rand::Rng;

use crate::graph::Var;
use crate::ops;
use crate::params::{Binder, ParamId, ParamStore};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = fan_in_bound(in_dim);
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(p.param(self.weight));
        match self.bias {
            Some(b) => y.add(p.param(b)),
            None => y,
        }
    }
}

/// Time convolution over `(B, T, C)` with "same" padding (odd kernels).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "conv1d kernel must be odd for same padding");
        let bound = fan_in_bound(cin * kernel);
        let weight = store.add_uniform(format!("{name}.weight"), &[kernel, cin, cout], bound, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        Conv1d { weight, bias, kernel }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        ops::conv1d(x, p.param(self.weight), self.kernel / 2).add(p.param(self.bias))
    }
}

/// NHWC 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let bound = fan_in_bound(cin * kernel.0 * kernel.1);
        let weight = store.add_uniform(format!("{name}.weight"), &[kernel.0, kernel.1, cin, cout], bound, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        ops::conv2d(x, p.param(self.weight), self.stride, self.pad).add(p.param(self.bias))
    }
}

/// Per-channel time convolution `(B, T, C)`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let bound = fan_in_bound(kernel);
        let weight = store.add_uniform(format!("{name}.weight"), &[kernel, channels], bound, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[channels]);
        DepthwiseConv1d { weight, bias, kernel }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        ops::depthwise_conv1d(x, p.param(self.weight), self.kernel / 2).add(p.param(self.bias))
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add_ones(format!("{name}.gamma"), &[dim]);
        let beta = store.add_zeros(format!("{name}.beta"), &[dim]);
        LayerNorm { gamma, beta }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(LAYER_NORM_EPS).mul(p.param(self.gamma)).add(p.param(self.beta))
    }
}
