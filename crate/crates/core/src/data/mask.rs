//! Binary validity masks (1 = known, 0 = hole) and free-form brush-stroke generation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsgl_tensor::{Scalar, Tensor};

use crate::error::{invalid, Error, Result};

/// One of the six hole-ratio intervals `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaskBucket(u8);

const BOUNDS: [(f64, f64); 6] = [(0.01, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5), (0.5, 0.6)];

impl MaskBucket {
    pub const ALL: [MaskBucket; 6] =
        [MaskBucket(0), MaskBucket(1), MaskBucket(2), MaskBucket(3), MaskBucket(4), MaskBucket(5)];

    pub fn new(index: usize) -> Result<Self> {
        if index < 6 {
            Ok(MaskBucket(index as u8))
        } else {
            Err(invalid(format!("mask bucket index {index} out of range 0..6")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn lo(self) -> f64 {
        BOUNDS[self.index()].0
    }

    pub fn hi(self) -> f64 {
        BOUNDS[self.index()].1
    }

    pub fn contains(self, ratio: f64) -> bool {
        ratio > self.lo() && ratio <= self.hi()
    }

    pub fn of_ratio(ratio: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.contains(ratio))
    }
}

impl fmt::Display for MaskBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{}]", self.lo(), self.hi())
    }
}

impl FromStr for MaskBucket {
    type Err = Error;

    /// Accepts `(0.1,0.2]`, `0.1-0.2`, or a bare index `0`..`5`.
    fn from_str(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Ok(i) = t.parse::<usize>() {
            return Self::new(i);
        }
        let inner = t.trim_start_matches('(').trim_end_matches(']');
        let parts: Vec<&str> = inner.split([',', '-']).collect();
        if let [a, b] = parts[..] {
            if let (Ok(lo), Ok(hi)) = (a.parse::<f64>(), b.parse::<f64>()) {
                if let Some(bk) = Self::ALL.into_iter().find(|k| (k.lo() - lo).abs() < 1e-9 && (k.hi() - hi).abs() < 1e-9) {
                    return Ok(bk);
                }
            }
        }
        Err(invalid(format!("unknown mask bucket {s:?}; expected one of (0.01,0.1] .. (0.5,0.6]")))
    }
}

impl TryFrom<String> for MaskBucket {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskBucket> for String {
    fn from(b: MaskBucket) -> String {
        b.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderMode {
    /// Strokes may touch the border.
    Near,
    /// Holes keep a margin of `round(50 H / 256)` pixels from every border.
    Far,
}

pub fn far_margin(h: usize, w: usize) -> usize {
    (50.0 * h.min(w) as f64 / 256.0).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask<T> {
    data: Tensor<T>,
    bucket: Option<MaskBucket>,
}

impl<T: Scalar> Mask<T> {
    /// Validates a `1×H×W` binary map; when `bucket` is given the hole ratio must lie in it.
    pub fn new(data: Tensor<T>, bucket: Option<MaskBucket>) -> Result<Self> {
        match data.shape() {
            [1, h, w] if *h > 0 && *w > 0 => {}
            s => return Err(invalid(format!("mask must be 1xHxW, got {s:?}"))),
        }
        if data.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        let m = Mask { data, bucket };
        if let Some(b) = bucket {
            if !b.contains(m.hole_ratio()) {
                return Err(invalid(format!("hole ratio {} outside bucket {b}", m.hole_ratio())));
            }
        }
        Ok(m)
    }

    pub fn all_known(h: usize, w: usize) -> Self {
        Mask { data: Tensor::ones(&[1, h, w]), bucket: None }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn bucket(&self) -> Option<MaskBucket> {
        self.bucket
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn hole_count(&self) -> usize {
        self.data.data().iter().filter(|&&v| v == T::zero()).count()
    }

    pub fn hole_ratio(&self) -> f64 {
        self.hole_count() as f64 / self.data.numel() as f64
    }

    /// Loads a single-channel PNG; pixels below 128 are holes.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = img.into_raw();
        let data = Tensor::from_fn(&[1, h, w], |i| if raw[i[1] * w + i[2]] < 128 { T::zero() } else { T::one() });
        let mut m = Mask::new(data, None)?;
        m.bucket = MaskBucket::of_ratio(m.hole_ratio());
        Ok(m)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.data().iter().map(|&v| if v == T::one() { 255 } else { 0 }).collect();
        image::save_buffer(path, &buf, self.width() as u32, self.height() as u32, image::ExtendedColorType::L8)?;
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 16;
const MAX_DABS: usize = 20_000;

struct Canvas {
    h: usize,
    w: usize,
    margin: usize,
    hole: Vec<bool>,
    count: usize,
}

impl Canvas {
    fn allowed(&self, y: isize, x: isize) -> bool {
        let m = self.margin as isize;
        y >= m && x >= m && y < self.h as isize - m && x < self.w as isize - m
    }

    fn new_pixels(&self, cy: f64, cx: f64, r: isize) -> Vec<usize> {
        let (yc, xc) = (cy.round() as isize, cx.round() as isize);
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (y, x) = (yc + dy, xc + dx);
                if self.allowed(y, x) {
                    let i = y as usize * self.w + x as usize;
                    if !self.hole[i] {
                        out.push(i);
                    }
                }
            }
        }
        out
    }
}

/// Paints random-walk brush strokes until the hole ratio first exceeds the
/// bucket's lower bound. Each dab is shrunk if it would overshoot the upper bound.
pub fn generate_irregular_mask<T: Scalar>(
    h: usize,
    w: usize,
    bucket: MaskBucket,
    mode: BorderMode,
    seed: u64,
) -> Result<Mask<T>> {
    let n = h * w;
    let margin = match mode {
        BorderMode::Near => 0,
        BorderMode::Far => far_margin(h, w),
    };
    if h <= 2 * margin || w <= 2 * margin {
        return Err(invalid(format!("{h}x{w} image leaves no room inside a {margin}px margin")));
    }
    let lo_count = bucket.lo() * n as f64;
    let hi_count = bucket.hi() * n as f64;
    if ((h - 2 * margin) * (w - 2 * margin)) as f64 <= lo_count {
        return Err(invalid(format!("hole ratio {bucket} cannot fit inside a {margin}px margin on {h}x{w}")));
    }
    let r_max = ((bucket.hi() - bucket.lo()) * n as f64 / std::f64::consts::PI).sqrt() * 0.9;
    let r_max = r_max.min(h.min(w) as f64 / 8.0).max(1.0);
    let r_min = (r_max / 3.0).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..MAX_ATTEMPTS {
        let mut cv = Canvas { h, w, margin, hole: vec![false; n], count: 0 };
        let mut dabs = 0;
        'strokes: while dabs < MAX_DABS {
            let radius = rng.random_range(r_min..=r_max);
            let mut y = rng.random_range(margin as f64..(h - margin) as f64);
            let mut x = rng.random_range(margin as f64..(w - margin) as f64);
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            let vertices = rng.random_range(4..=10);
            for _ in 0..vertices {
                angle += rng.random_range(-1.2..1.2);
                let len = rng.random_range(radius..(h.max(w) as f64 / 3.0).max(radius + 1.0));
                let step = (radius / 2.0).max(1.0);
                let steps = (len / step).ceil() as usize;
                for _ in 0..steps {
                    y = (y + step * angle.sin()).clamp(margin as f64, (h - margin - 1) as f64);
                    x = (x + step * angle.cos()).clamp(margin as f64, (w - margin - 1) as f64);
                    dabs += 1;
                    let mut r = radius.round() as isize;
                    let fresh = loop {
                        let px = cv.new_pixels(y, x, r);
                        if (cv.count + px.len()) as f64 <= hi_count || r == 0 {
                            break px;
                        }
                        r -= 1;
                    };
                    if (cv.count + fresh.len()) as f64 > hi_count {
                        continue;
                    }
                    for i in fresh {
                        cv.hole[i] = true;
                        cv.count += 1;
                    }
                    if cv.count as f64 > lo_count {
                        break 'strokes;
                    }
                }
            }
        }
        let ratio = cv.count as f64 / n as f64;
        if bucket.contains(ratio) {
            let data = Tensor::new(&[1, h, w], cv.hole.iter().map(|&m| if m { T::zero() } else { T::one() }).collect())?;
            return Mask::new(data, Some(bucket));
        }
    }
    Err(invalid(format!("could not reach hole ratio {bucket} in {mode:?} mode on {h}x{w} after {MAX_ATTEMPTS} attempts")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_parsing() {
        assert_eq!("(0.1,0.2]".parse::<MaskBucket>().unwrap().index(), 1);
        assert_eq!("0.5-0.6".parse::<MaskBucket>().unwrap().index(), 5);
        assert_eq!("0".parse::<MaskBucket>().unwrap().index(), 0);
        assert!("(0.1,0.3]".parse::<MaskBucket>().is_err());
        assert_eq!(MaskBucket::ALL[0].to_string(), "(0.01,0.1]");
    }

    #[test]
    fn generated_masks_hit_bucket_and_are_deterministic() {
        for b in MaskBucket::ALL {
            let m: Mask<f32> = generate_irregular_mask(64, 64, b, BorderMode::Near, 7).unwrap();
            assert!(b.contains(m.hole_ratio()), "{b}: {}", m.hole_ratio());
            let again: Mask<f32> = generate_irregular_mask(64, 64, b, BorderMode::Near, 7).unwrap();
            assert_eq!(m, again);
        }
    }

    #[test]
    fn far_mode_keeps_margin() {
        let m: Mask<f32> = generate_irregular_mask(256, 256, MaskBucket::ALL[1], BorderMode::Far, 3).unwrap();
        for y in 0..256 {
            for x in 0..256 {
                if m.tensor().get(&[0, y, x]) == 0.0 {
                    assert!(y.min(x).min(255 - y).min(255 - x) >= 50);
                }
            }
        }
    }

    #[test]
    fn far_mode_fails_when_interior_is_too_small() {
        let r: Result<Mask<f32>> = generate_irregular_mask(64, 64, MaskBucket::ALL[5], BorderMode::Far, 1);
        assert!(r.is_err());
    }

    #[test]
    fn png_loader_thresholds_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::save_buffer(&p, &[0u8, 127, 128, 255], 2, 2, image::ExtendedColorType::L8).unwrap();
        let m = Mask::<f32>::load_png(&p).unwrap();
        assert_eq!(m.tensor().data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
