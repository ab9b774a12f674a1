//! Structure encoder: a cascade of strided partial convolutions.

use rand::Rng;
use tsgl_tensor::{instance_norm, ParamStore, Scalar, Tensor, Var};

use crate::config::StructureConfig;
use crate::error::{invalid, Result};
use crate::pconv::PartialConv2d;

pub const LRELU_SLOPE: f64 = 0.2;
pub const IN_EPS: f64 = 1e-5;

/// Feature map and validity mask at one scale.
#[derive(Debug, Clone)]
pub struct Level<T: Scalar> {
    pub features: Var<T>,
    pub mask: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct StructureEncoder {
    pub layers: Vec<PartialConv2d>,
}

impl StructureEncoder {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, in_ch: usize, cfg: &StructureConfig, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.channels.len());
        let mut c = in_ch;
        for (i, &o) in cfg.channels.iter().enumerate() {
            layers.push(PartialConv2d::new(ps, &format!("structure.{i}"), c, o, cfg.kernel, 2, rng)?);
            c = o;
        }
        Ok(StructureEncoder { layers })
    }

    /// `input` is `[B,C,H,W]` with the mask as its last channel.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, input: &Var<T>, mask: &Tensor<T>) -> Result<Vec<Level<T>>> {
        let (_, _, h, w) = input.value().dims4()?;
        let n = self.layers.len();
        if h % (1 << n) != 0 || w % (1 << n) != 0 {
            return Err(invalid(format!("structure encoder needs sides divisible by {}, got {h}x{w}", 1 << n)));
        }
        let mut out = Vec::with_capacity(n);
        let (mut x, mut m) = (input.clone(), mask.clone());
        for layer in &self.layers {
            let (y, nm) = layer.forward(ps, &x, &m)?;
            let y = instance_norm(&y, T::lit(IN_EPS))?.leaky_relu(T::lit(LRELU_SLOPE));
            out.push(Level { features: y.clone(), mask: nm.clone() });
            x = y;
            m = nm;
        }
        Ok(out)
    }
}
