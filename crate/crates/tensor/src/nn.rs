//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] under `<prefix>.<field>` and only keeps the ids.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

fn uniform<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in_dim)`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            uniform(vec![in_dim, out_dim], bound, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), uniform(vec![out_dim], bound, rng))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(vec![dim], T::one()))?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Square-kernel convolution over channels-last images. Odd kernels use
/// "same" padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * cin;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            uniform(vec![fan_in, cout], bound, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), uniform(vec![cout], bound, rng))?;
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            stride,
            cin,
            cout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.kernel, self.stride, self.kernel / 2)
    }
}

/// 2x2, stride-2 transposed convolution.
#[derive(Debug, Clone, Copy)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Deconv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (cin.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            uniform(vec![cin, 4 * cout], bound, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), uniform(vec![cout], bound, rng))?;
        Ok(Deconv2d {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.deconv2d(x, w, b, out_h, out_w)
    }
}
