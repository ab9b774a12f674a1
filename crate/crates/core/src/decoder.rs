//! Bottom-up image decoder and the auxiliary edge-map decoder.

use rand::Rng;
use tsgl_tensor::{instance_norm, Conv2d, ParamStore, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::recon::ReconstructedSet;
use crate::structure::{IN_EPS, LRELU_SLOPE};

fn conv_block<T: Scalar>(ps: &ParamStore<T>, conv: &Conv2d, x: &Var<T>) -> Result<Var<T>> {
    let y = conv.forward(ps, x)?;
    Ok(instance_norm(&y, T::lit(IN_EPS))?.leaky_relu(T::lit(LRELU_SLOPE)))
}

/// `out⊙(1−M) + image⊙M`, so known pixels pass through unchanged.
pub fn composite<T: Scalar>(out: &Var<T>, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Var<T>> {
    let hole = Var::constant(mask.map(|m| T::one() - m));
    let known = Var::constant(image.zip_map(mask, |a, m| a * m)?);
    Ok(out.mul(&hole)?.add(&known)?)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// `fuse[k-1]` merges the running map with reconstructed and balanced level `k`.
    pub fuse: Vec<Conv2d>,
    pub refine: Conv2d,
    pub to_rgb: Conv2d,
    pub composite: bool,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.texture.dim;
        let fuse = (1..=cfg.levels)
            .map(|k| Ok(Conv2d::new(ps, &format!("decoder.fuse.{k}"), 3 * d, d, 3, 1, true, rng)?))
            .collect::<Result<Vec<_>>>()?;
        let refine = Conv2d::new(ps, "decoder.refine", d, d, 3, 1, true, rng)?;
        let to_rgb = Conv2d::new(ps, "decoder.rgb", d, 3, 3, 1, true, rng)?;
        Ok(Decoder { fuse, refine, to_rgb, composite: cfg.decoder.composite })
    }

    /// Raw prediction in `[0,1]`, before compositing.
    pub fn decode<T: Scalar>(&self, ps: &ParamStore<T>, balanced: &[Var<T>], set: &ReconstructedSet<T>) -> Result<Var<T>> {
        let n = self.fuse.len();
        if balanced.len() != n || set.levels.len() != n + 1 {
            return Err(invalid(format!(
                "decoder expects {n} balanced and {} reconstructed maps, got {} and {}",
                n + 1,
                balanced.len(),
                set.levels.len()
            )));
        }
        let mut x = set.levels[n].clone();
        for k in (1..=n).rev() {
            let (_, _, h, w) = set.levels[k - 1].value().dims4()?;
            let (_, _, xh, _) = x.value().dims4()?;
            if xh != h {
                x = x.upsample_bilinear(h / xh)?;
            }
            if x.shape()[2..] != [h, w] || balanced[k - 1].shape()[2..] != [h, w] {
                return Err(invalid(format!("decoder level {k} is misaligned")));
            }
            x = conv_block(ps, &self.fuse[k - 1], &Var::concat(&[x, set.levels[k - 1].clone(), balanced[k - 1].clone()], 1)?)?;
        }
        let x = conv_block(ps, &self.refine, &x.upsample_bilinear(2)?)?;
        Ok(self.to_rgb.forward(ps, &x)?.tanh().add_scalar(T::one()).mul_scalar(T::lit(0.5)))
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        balanced: &[Var<T>],
        set: &ReconstructedSet<T>,
        image: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<Var<T>> {
        let raw = self.decode(ps, balanced, set)?;
        if raw.shape() != image.shape() {
            return Err(invalid(format!("decoded {:?} but image is {:?}", raw.shape(), image.shape())));
        }
        if self.composite {
            composite(&raw, image, mask)
        } else {
            Ok(raw)
        }
    }
}

/// Predicts the full-resolution edge map from the deepest structure features.
#[derive(Debug, Clone)]
pub struct AuxDecoder {
    pub ups: Vec<Conv2d>,
    pub head: Conv2d,
    pub in_channels: usize,
}

impl AuxDecoder {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let ch = &cfg.structure.channels;
        let n = ch.len();
        let mut ups = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let out = if i == 0 { ch[0] } else { ch[i - 1] };
            ups.push(Conv2d::new(ps, &format!("aux.up.{i}"), ch[i], out, 3, 1, true, rng)?);
        }
        let head = Conv2d::new(ps, "aux.head", ch[0], 1, 3, 1, true, rng)?;
        Ok(AuxDecoder { ups, head, in_channels: ch[n - 1] })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, f: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = f.value().dims4()?;
        if c != self.in_channels {
            return Err(invalid(format!("aux decoder wants the deepest structure level ({} channels), got {c}", self.in_channels)));
        }
        let mut x = f.clone();
        for conv in &self.ups {
            x = conv.forward(ps, &x.upsample_bilinear(2)?)?.leaky_relu(T::lit(LRELU_SLOPE));
        }
        Ok(self.head.forward(ps, &x)?.sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn composite_keeps_known_pixels() {
        let out = Var::constant(Tensor::full(&[1, 3, 2, 2], 0.25f64));
        let img = Tensor::from_fn(&[1, 3, 2, 2], |i| (i[1] + i[3]) as f64 * 0.1);
        let mask = Tensor::from_fn(&[1, 1, 2, 2], |i| if i[2] == 0 { 1.0 } else { 0.0 });
        let y = composite(&out, &img, &mask).unwrap();
        for c in 0..3 {
            for x in 0..2 {
                assert_eq!(y.value().get(&[0, c, 0, x]), img.get(&[0, c, 0, x]));
                assert_eq!(y.value().get(&[0, c, 1, x]), 0.25);
            }
        }
    }

    #[test]
    fn aux_zero_head_is_half() {
        let cfg = Config::tiny().model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let aux = AuxDecoder::new(&mut ps, &cfg, &mut rng).unwrap();
        for id in [aux.head.weight, aux.head.bias.unwrap()] {
            ps.get_mut(id).map_inplace(|_| 0.0);
        }
        let f = Var::constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i[1] as f64 - i[3] as f64));
        let y = aux.forward(&ps, &f).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
        assert!(y.value().data().iter().all(|&v| v == 0.5));
        assert!(aux.forward(&ps, &Var::constant(Tensor::zeros(&[1, 5, 2, 2]))).is_err());
    }
}
