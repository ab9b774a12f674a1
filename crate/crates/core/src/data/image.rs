//! Image containers and PNG/JPEG conversion.

use std::path::Path;

use tsgl_tensor::{Scalar, Tensor};

use crate::error::{invalid, Result};

fn check_unit_range<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
        return Err(invalid(format!("{what}: value {v} outside [0,1]")));
    }
    Ok(())
}

fn check_channels<T: Scalar>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    match t.shape() {
        [ch, h, w] if *ch == c && *h > 0 && *w > 0 => Ok(()),
        s => Err(invalid(format!("{what}: expected {c}xHxW, got {s:?}"))),
    }
}

/// `3×H×W` colour image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T>(Tensor<T>);

/// `1×H×W` luminance image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T>(Tensor<T>);

/// `1×H×W` binary edge map.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap<T>(Tensor<T>);

/// Edge-preserving smoothed colour image.
pub type SmoothedImage<T> = RgbImage<T>;

macro_rules! image_accessors {
    ($ty:ident) => {
        impl<T: Scalar> $ty<T> {
            pub fn tensor(&self) -> &Tensor<T> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor<T> {
                self.0
            }

            pub fn height(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[2]
            }
        }
    };
}

image_accessors!(RgbImage);
image_accessors!(GrayImage);
image_accessors!(EdgeMap);

impl<T: Scalar> RgbImage<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        check_channels(&t, 3, "RgbImage")?;
        check_unit_range(&t, "RgbImage")?;
        Ok(RgbImage(t))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn(&[3, h, w], |i| T::lit(f(i[0], i[1], i[2]))))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = img.into_raw();
        Self::new(Tensor::from_fn(&[3, h, w], |i| T::lit(raw[(i[1] * w + i[2]) * 3 + i[0]] as f64 / 255.0)))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = vec![0u8; h * w * 3];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    buf[(y * w + x) * 3 + c] = to_u8(self.0.get(&[c, y, x]).as_f64());
                }
            }
        }
        image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        check_channels(&t, 1, "GrayImage")?;
        check_unit_range(&t, "GrayImage")?;
        Ok(GrayImage(t))
    }
}

impl<T: Scalar> EdgeMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        check_channels(&t, 1, "EdgeMap")?;
        if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(invalid("EdgeMap: values must be 0 or 1"));
        }
        Ok(EdgeMap(t))
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == T::one()).count()
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// ITU-R BT.601 luma.
pub fn to_gray<T: Scalar>(img: &RgbImage<T>) -> GrayImage<T> {
    let (h, w) = (img.height(), img.width());
    let t = img.tensor();
    let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let gray = Tensor::from_fn(&[1, h, w], |i| {
        let v = r * t.get(&[0, i[1], i[2]]) + g * t.get(&[1, i[1], i[2]]) + b * t.get(&[2, i[1], i[2]]);
        v.max(T::zero()).min(T::one())
    });
    GrayImage(gray)
}

/// Writes a single-channel map, linearly rescaled from `[lo, hi]` to 8 bits.
pub fn save_gray_png<T: Scalar>(t: &Tensor<T>, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(invalid(format!("save_gray_png: expected 1xHxW, got {s:?}"))),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: Vec<u8> = t.data().iter().map(|v| to_u8((v.as_f64() - lo) / span)).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(RgbImage::new(Tensor::<f32>::full(&[3, 4, 4], 1.5)).is_err());
        assert!(RgbImage::new(Tensor::<f32>::full(&[1, 4, 4], 0.5)).is_err());
        assert!(EdgeMap::new(Tensor::<f32>::full(&[1, 2, 2], 0.5)).is_err());
    }

    #[test]
    fn gray_of_white_is_one() {
        let img = RgbImage::new(Tensor::<f64>::ones(&[3, 2, 2])).unwrap();
        assert!(to_gray(&img).tensor().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = RgbImage::<f32>::from_fn(4, 6, |c, y, x| ((c * 24 + y * 6 + x) % 255) as f64 / 255.0).unwrap();
        img.save_png(&p).unwrap();
        let back = RgbImage::<f32>::load(&p).unwrap();
        for (a, b) in img.tensor().data().iter().zip(back.tensor().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
