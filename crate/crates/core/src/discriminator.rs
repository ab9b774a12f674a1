//! Patch discriminator: strided convolutions ending in a per-patch probability.

use rand::Rng;
use tsgl_tensor::{Conv2d, ParamStore, Scalar, Var};

use crate::config::DiscriminatorConfig;
use crate::error::Result;
use crate::structure::LRELU_SLOPE;

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = 3;
        for (i, &o) in cfg.channels.iter().enumerate() {
            layers.push(Conv2d::new(ps, &format!("disc.{i}"), c, o, 3, 2, true, rng)?);
            c = o;
        }
        let head = Conv2d::new(ps, "disc.head", c, 1, 3, 1, true, rng)?;
        Ok(Discriminator { layers, head })
    }

    /// Probabilities `[B,1,h,w]` that each patch is real.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, image: &Var<T>) -> Result<Var<T>> {
        let mut x = image.clone();
        for l in &self.layers {
            x = l.forward(ps, &x)?.leaky_relu(T::lit(LRELU_SLOPE));
        }
        Ok(self.head.forward(ps, &x)?.sigmoid())
    }
}
