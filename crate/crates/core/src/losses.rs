//! Reconstruction, auxiliary-structure and adversarial objectives.

use tsgl_tensor::{Scalar, Tensor, Var};

use crate::config::TrainConfig;
use crate::error::{invalid, Error, Result};

pub const PROB_EPS: f64 = 1e-7;

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(invalid(format!("loss operands differ in shape: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean absolute error against a fixed target.
pub fn l1_loss<T: Scalar>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    check_shapes(pred.shape(), target.shape())?;
    Ok(pred.sub(&Var::constant(target.clone()))?.abs().mean_all())
}

pub fn reconstruction_loss<T: Scalar>(out: &Var<T>, gt: &Tensor<T>) -> Result<Var<T>> {
    l1_loss(out, gt)
}

pub fn auxiliary_loss<T: Scalar>(pred: &Var<T>, edges: &Tensor<T>) -> Result<Var<T>> {
    l1_loss(pred, edges)
}

fn clamp_prob<T: Scalar>(p: &Var<T>) -> Var<T> {
    p.clamp(T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS))
}

/// `−E[log D(fake)]`.
pub fn generator_adv_loss<T: Scalar>(d_fake: &Var<T>) -> Var<T> {
    clamp_prob(d_fake).ln().mean_all().neg()
}

/// `−E[log D(real)] − E[log(1 − D(fake))]`.
pub fn discriminator_loss<T: Scalar>(d_real: &Var<T>, d_fake: &Var<T>) -> Result<Var<T>> {
    let real = clamp_prob(d_real).ln().mean_all();
    let fake = clamp_prob(d_fake).neg().add_scalar(T::one()).ln().mean_all();
    Ok(real.add(&fake)?.neg())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rec: 1.0, adv: 0.1, aux: 1.0 }
    }
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        LossWeights { rec: t.lambda_rec, adv: t.lambda_adv, aux: t.lambda_aux }
    }
}

#[derive(Debug, Clone)]
pub struct LossParts<T: Scalar> {
    pub rec: Var<T>,
    pub adv: Var<T>,
    pub aux: Var<T>,
}

impl<T: Scalar> LossParts<T> {
    pub fn values(&self) -> [f64; 3] {
        [self.rec.value().item().as_f64(), self.adv.value().item().as_f64(), self.aux.value().item().as_f64()]
    }
}

/// Weighted generator objective; fails if any part is non-finite.
pub fn total_loss<T: Scalar>(parts: &LossParts<T>, w: LossWeights) -> Result<Var<T>> {
    let v = parts.values();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("loss parts rec={} adv={} aux={}", v[0], v[1], v[2])));
    }
    Ok(parts
        .rec
        .mul_scalar(T::lit(w.rec))
        .add(&parts.adv.mul_scalar(T::lit(w.adv)))?
        .add(&parts.aux.mul_scalar(T::lit(w.aux)))?)
}
