//! Structure priors fed to the structure encoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tsgl_tensor::{kernels, Scalar, Tensor};

use super::canny::{canny_edge, sobel, CannyParams};
use super::image::{to_gray, RgbImage};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Canny edges and luminance (2 channels).
    #[default]
    EdgeGray,
    SobelX,
    SobelY,
    /// Colour image downsampled 8x and bilinearly upsampled back (3 channels).
    LowresRgb,
}

pub const LOWRES_FACTOR: usize = 8;

impl PriorKind {
    pub fn channels(self) -> usize {
        match self {
            PriorKind::EdgeGray => 2,
            PriorKind::SobelX | PriorKind::SobelY => 1,
            PriorKind::LowresRgb => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::EdgeGray => "edge_gray",
            PriorKind::SobelX => "sobel_x",
            PriorKind::SobelY => "sobel_y",
            PriorKind::LowresRgb => "lowres_rgb",
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [PriorKind::EdgeGray, PriorKind::SobelX, PriorKind::SobelY, PriorKind::LowresRgb]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unsupported structure prior {s:?}")))
    }
}

/// `C×H×W` prior channels for `kind`.
pub fn structure_prior<T: Scalar>(img: &RgbImage<T>, kind: PriorKind, canny: &CannyParams) -> Result<Tensor<T>> {
    let (h, w) = (img.height(), img.width());
    let gray = to_gray(img);
    match kind {
        PriorKind::EdgeGray => {
            let edges = canny_edge(&gray, canny)?;
            Ok(Tensor::concat(&[edges.tensor(), gray.tensor()], 0)?)
        }
        PriorKind::SobelX | PriorKind::SobelY => {
            let g: Vec<f64> = gray.tensor().data().iter().map(|v| v.as_f64()).collect();
            let (gx, gy) = sobel(&g, h, w);
            let d = if kind == PriorKind::SobelX { gx } else { gy };
            Ok(Tensor::new(&[1, h, w], d.into_iter().map(T::lit).collect())?)
        }
        PriorKind::LowresRgb => {
            if h % LOWRES_FACTOR != 0 || w % LOWRES_FACTOR != 0 {
                return Err(invalid(format!("lowres prior needs sides divisible by {LOWRES_FACTOR}, got {h}x{w}")));
            }
            let x = img.tensor().reshape(&[1, 3, h, w])?;
            let low = kernels::avg_pool(&x, LOWRES_FACTOR)?;
            Ok(kernels::upsample_bilinear(&low, LOWRES_FACTOR)?.into_reshape(&[3, h, w])?)
        }
    }
}
