//! Assembly of encoder inputs from an image, its derived priors and a mask.

use serde::{Deserialize, Serialize};
use tsgl_tensor::{Scalar, Tensor};

use super::canny::{canny_edge, CannyParams};
use super::image::{to_gray, EdgeMap, RgbImage, SmoothedImage};
use super::mask::Mask;
use super::prior::{structure_prior, PriorKind};
use super::rtv::{edge_preserving_smooth, SmoothParams};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PrepParams {
    pub prior: PriorKind,
    pub canny: CannyParams,
    pub smooth: SmoothParams,
}

/// Mask-independent derived data for one image.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub image: RgbImage<T>,
    /// Ground-truth edge map, also the auxiliary decoder's target.
    pub edges: EdgeMap<T>,
    pub prior: Tensor<T>,
    pub smoothed: SmoothedImage<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn prepare(image: RgbImage<T>, p: &PrepParams) -> Result<Self> {
        let edges = canny_edge(&to_gray(&image), &p.canny)?;
        let prior = if p.prior == PriorKind::EdgeGray {
            Tensor::concat(&[edges.tensor(), to_gray(&image).tensor()], 0)?
        } else {
            structure_prior(&image, p.prior, &p.canny)?
        };
        let smoothed = edge_preserving_smooth(&image, &p.smooth)?;
        Ok(Sample { image, edges, prior, smoothed })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Channel layout: structure = masked prior channels then `M`;
/// texture = masked image (3), masked smoothed image (3), `M`.
#[derive(Debug, Clone)]
pub struct ModelInputs<T> {
    pub structure_input: Tensor<T>,
    pub texture_input: Tensor<T>,
    pub mask: Mask<T>,
}

fn masked<T: Scalar>(t: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(t.zip_map(m, |a, b| a * b)?)
}

pub fn assemble_inputs<T: Scalar>(sample: &Sample<T>, mask: &Mask<T>) -> Result<ModelInputs<T>> {
    if (sample.height(), sample.width()) != (mask.height(), mask.width()) {
        return Err(invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            sample.height(),
            sample.width()
        )));
    }
    if mask.hole_count() == mask.tensor().numel() {
        return Err(invalid("mask has no known pixels"));
    }
    let m = mask.tensor();
    let prior = masked(&sample.prior, m)?;
    let structure_input = Tensor::concat(&[&prior, m], 0)?;
    let img = masked(sample.image.tensor(), m)?;
    let smooth = masked(sample.smoothed.tensor(), m)?;
    let texture_input = Tensor::concat(&[&img, &smooth, m], 0)?;
    Ok(ModelInputs { structure_input, texture_input, mask: mask.clone() })
}

/// One-shot helper with the default edge+grayscale prior.
pub fn build_inputs<T: Scalar>(
    img: &RgbImage<T>,
    mask: &Mask<T>,
    canny: &CannyParams,
    smooth: &SmoothParams,
) -> Result<ModelInputs<T>> {
    let p = PrepParams { prior: PriorKind::EdgeGray, canny: *canny, smooth: *smooth };
    assemble_inputs(&Sample::prepare(img.clone(), &p)?, mask)
}

/// Batched `[B,C,H,W]` tensors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub structure: Tensor<T>,
    pub texture: Tensor<T>,
    pub mask: Tensor<T>,
    pub image: Tensor<T>,
    pub edges: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn collate(samples: &[&Sample<T>], masks: &[Mask<T>]) -> Result<Self> {
        if samples.is_empty() || samples.len() != masks.len() {
            return Err(invalid("batch needs one mask per sample and at least one sample"));
        }
        let mut parts: [Vec<Tensor<T>>; 5] = Default::default();
        for (s, m) in samples.iter().zip(masks) {
            let inp = assemble_inputs(s, m)?;
            for (slot, t) in parts.iter_mut().zip([
                &inp.structure_input,
                &inp.texture_input,
                m.tensor(),
                s.image.tensor(),
                s.edges.tensor(),
            ]) {
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                slot.push(t.reshape(&shape)?);
            }
        }
        let stack = |v: &Vec<Tensor<T>>| -> Result<Tensor<T>> { Ok(Tensor::concat(&v.iter().collect::<Vec<_>>(), 0)?) };
        Ok(Batch {
            structure: stack(&parts[0])?,
            texture: stack(&parts[1])?,
            mask: stack(&parts[2])?,
            image: stack(&parts[3])?,
            edges: stack(&parts[4])?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::{generate_irregular_mask, BorderMode, MaskBucket};

    fn image(h: usize) -> RgbImage<f64> {
        RgbImage::from_fn(h, h, |c, y, x| ((c + 1) as f64 * (y as f64 * 0.3 + x as f64 * 0.17)).sin() * 0.5 + 0.5).unwrap()
    }

    #[test]
    fn all_known_mask_is_identity() {
        let img = image(32);
        let inp = build_inputs(&img, &Mask::all_known(32, 32), &CannyParams::default(), &SmoothParams::default()).unwrap();
        assert_eq!(inp.texture_input.narrow(0, 0, 3).unwrap(), *img.tensor());
        assert_eq!(inp.structure_input.shape(), &[3, 32, 32]);
    }

    #[test]
    fn empty_known_region_rejected() {
        let img = image(32);
        let m = Mask::new(Tensor::zeros(&[1, 32, 32]), None).unwrap();
        assert!(build_inputs(&img, &m, &CannyParams::default(), &SmoothParams::default()).is_err());
    }

    #[test]
    fn holes_are_zero_in_every_masked_channel() {
        let img = image(32);
        let m = generate_irregular_mask(32, 32, MaskBucket::ALL[3], BorderMode::Near, 5).unwrap();
        let inp = build_inputs(&img, &m, &CannyParams::default(), &SmoothParams::default()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if m.tensor().get(&[0, y, x]) == 0.0 {
                    for c in 0..6 {
                        assert_eq!(inp.texture_input.get(&[c, y, x]), 0.0);
                    }
                    for c in 0..3 {
                        assert_eq!(inp.structure_input.get(&[c, y, x]), 0.0);
                    }
                }
            }
        }
    }
}
