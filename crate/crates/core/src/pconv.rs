//! Partial convolution with a single-channel validity mask.

use rand::Rng;
use tsgl_tensor::{kernels, Conv2d, ParamStore, Scalar, Tensor, Var};

use crate::error::{invalid, Result};

/// Count of valid inputs under each output window, `[B,1,Ho,Wo]`.
fn window_valid_count<T: Scalar>(mask: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    Ok(kernels::conv2d(mask, &Tensor::ones(&[1, 1, k, k]), stride, pad)?)
}

/// Scale `sum(1)/sum(M)` over the in-image part of each window (0 where the
/// window holds no valid input) and the updated mask.
fn renorm<T: Scalar>(mask: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if mask.rank() != 4 || mask.shape()[1] != 1 {
        return Err(invalid(format!("partial conv mask must be [B,1,H,W], got {:?}", mask.shape())));
    }
    let count = window_valid_count(mask, k, stride, pad)?;
    let area = window_valid_count(&Tensor::ones(mask.shape()), k, stride, pad)?;
    let half = T::lit(0.5);
    let ratio = count.zip_map(&area, |c, a| if c > half { a / c } else { T::zero() })?;
    let next = count.map(|c| if c > half { T::one() } else { T::zero() });
    Ok((ratio, next))
}

/// Mask after one partial convolution: 1 wherever the window saw a valid input.
pub fn update_mask<T: Scalar>(mask: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    Ok(renorm(mask, k, stride, pad)?.1)
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(crate::error::Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Differentiable partial convolution of `x` `[B,C,H,W]` under `mask` `[B,1,H,W]`.
pub fn partial_conv<T: Scalar>(
    x: &Var<T>,
    mask: &Tensor<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Var<T>, Tensor<T>)> {
    let k = weight.shape()[2];
    if x.shape()[0] != mask.shape()[0] || x.shape()[2..] != mask.shape()[2..] {
        return Err(invalid(format!("partial conv input {:?} vs mask {:?}", x.shape(), mask.shape())));
    }
    check_finite(weight.value(), "partial conv weight")?;
    let (ratio, next) = renorm(mask, k, stride, pad)?;
    let mut y = x.mul(&Var::constant(mask.clone()))?.conv2d(weight, stride, pad)?.mul(&Var::constant(ratio))?;
    if let Some(b) = bias {
        y = y.add(b)?;
    }
    Ok((y.mul(&Var::constant(next.clone()))?, next))
}

/// Plain-tensor partial convolution; `bias` has one entry per output channel.
pub fn partial_conv_step<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let o = weight.shape()[0];
    if bias.len() != o {
        return Err(invalid(format!("bias has {} entries for {o} output channels", bias.len())));
    }
    let b = Var::constant(Tensor::new(&[1, o, 1, 1], bias.to_vec())?);
    let (y, m) = partial_conv(&Var::constant(x.clone()), mask, &Var::constant(weight.clone()), Some(&b), stride, pad)?;
    Ok((y.value().clone(), m))
}

/// Learnable partial convolution layer.
#[derive(Debug, Clone)]
pub struct PartialConv2d {
    pub conv: Conv2d,
}

impl PartialConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(PartialConv2d { conv: Conv2d::new(ps, name, in_ch, out_ch, kernel, stride, true, rng)? })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Var<T>, mask: &Tensor<T>) -> Result<(Var<T>, Tensor<T>)> {
        let b = self.conv.bias.map(|b| ps.var(b));
        partial_conv(x, mask, &ps.var(self.conv.weight), b.as_ref(), self.conv.stride, self.conv.pad)
    }
}
