//! Parameterised building blocks.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel with "same"-style padding `kernel / 2`.
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = ps.add(format!("{name}.weight"), kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, 1.0, rng))?;
        let bias = if bias { Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[1, out_ch, 1, 1]))?) } else { None };
        Ok(Conv2d { weight, bias, in_ch, out_ch, kernel, stride, pad: kernel / 2 })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.conv2d(&ps.var(self.weight), self.stride, self.pad)?;
        match self.bias {
            Some(b) => y.add(&ps.var(b)),
            None => Ok(y),
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Affine map over the last axis; weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.add(format!("{name}.weight"), kaiming_uniform(&[in_dim, out_dim], in_dim, 1.0, rng))?;
        let bias = if bias { Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let last = *shape.last().ok_or_else(|| invalid("Linear", "rank-0 input"))?;
        if last != self.in_dim {
            return Err(invalid("Linear", format!("expected last dim {}, got {last}", self.in_dim)));
        }
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let mut y = x.reshape(&[rows, last])?.matmul(&ps.var(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(&ps.var(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }
}

/// Per-sample, per-channel normalisation over the spatial dims of `[N,C,H,W]`.
pub fn instance_norm<T: Scalar>(x: &Var<T>, eps: T) -> Result<Var<T>> {
    x.instance_norm(eps)
}
