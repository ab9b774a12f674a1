//! Canny edge detection on `[0,1]` intensities.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use tsgl_tensor::{Scalar, Tensor};

use super::image::{EdgeMap, GrayImage};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    /// Standard deviation of the pre-smoothing Gaussian, in pixels.
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { low: 0.1, high: 0.2, sigma: 1.4 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low < self.high && self.high <= 1.0) {
            return Err(invalid(format!("canny thresholds need 0 < low < high <= 1, got {} / {}", self.low, self.high)));
        }
        if !(self.sigma > 0.0) {
            return Err(invalid("canny sigma must be positive"));
        }
        Ok(())
    }
}

/// Normalised 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable blur with replicated borders; rows first, then columns.
pub(crate) fn blur_replicate(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img[y * w + clampi(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[clampi(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Sobel derivatives scaled so that a unit step yields magnitude 1.
pub(crate) fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| img[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = ((at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1)))
                / 4.0;
            gy[i] = ((at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1)))
                / 4.0;
        }
    }
    (gx, gy)
}

/// Neighbour offset `(dy, dx)` along the quantised gradient direction.
fn direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut a = gy.atan2(gx).to_degrees();
    if a < 0.0 {
        a += 180.0;
    }
    if !(22.5..157.5).contains(&a) {
        (0, 1)
    } else if a < 67.5 {
        (1, 1)
    } else if a < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

pub fn canny_edge<T: Scalar>(img: &GrayImage<T>, params: &CannyParams) -> Result<EdgeMap<T>> {
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    let raw: Vec<f64> = img.tensor().data().iter().map(|v| v.as_f64()).collect();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(invalid("canny: non-finite input"));
    }
    // A constant offset does not change gradients; removing it keeps the
    // arithmetic identical for shifted inputs.
    let base = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = raw.iter().map(|v| v - base).collect();
    let blurred = blur_replicate(&shifted, h, w, &gaussian_taps(params.sigma));
    let (gx, gy) = sobel(&blurred, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let m_at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = direction(gx[i], gy[i]);
            let (yi, xi) = (y as isize, x as isize);
            // strict on one side, non-strict on the other: plateaus thin to one pixel
            if m > m_at(yi - dy, xi - dx) && m >= m_at(yi + dy, xi + dx) {
                thin[i] = m;
            }
        }
    }

    let mut edges = vec![false; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= params.high {
            edges[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] >= params.low {
                    edges[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    let data = edges.iter().map(|&e| if e { T::one() } else { T::zero() }).collect();
    EdgeMap::new(Tensor::new(&[1, h, w], data)?)
}
