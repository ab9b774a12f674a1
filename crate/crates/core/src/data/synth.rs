//! Procedural training images: textured shapes over colour gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgl_tensor::{Scalar, Tensor};

use super::image::RgbImage;

#[derive(Clone, Copy)]
enum Pattern {
    Solid,
    Stripes { freq: f64, angle: f64 },
    Checker { period: f64 },
    Dots { period: f64 },
}

#[derive(Clone, Copy)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle { p } => {
                let s = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let (d0, d1, d2) = (s(p[0], p[1]), s(p[1], p[2]), s(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

impl Pattern {
    fn value(&self, y: f64, x: f64) -> f64 {
        match *self {
            Pattern::Solid => 0.0,
            Pattern::Stripes { freq, angle } => (freq * (x * angle.cos() + y * angle.sin())).sin(),
            Pattern::Checker { period } => {
                if ((y / period).floor() + (x / period).floor()) as i64 % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Pattern::Dots { period } => {
                let (fy, fx) = ((y / period).fract() - 0.5, (x / period).fract() - 0.5);
                if fy * fy + fx * fx < 0.08 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn pattern(rng: &mut ChaCha8Rng, size: f64) -> Pattern {
    match rng.random_range(0..4) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes { freq: rng.random_range(0.5..1.6), angle: rng.random_range(0.0..std::f64::consts::PI) },
        2 => Pattern::Checker { period: rng.random_range(2.0..(size / 8.0).max(3.0)) },
        _ => Pattern::Dots { period: rng.random_range(3.0..(size / 6.0).max(4.0)) },
    }
}

/// Deterministic `3×size×size` image for `seed`.
pub fn synth_image<T: Scalar>(size: usize, seed: u64) -> RgbImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1A6E);
    let s = size as f64;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let g_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let bg_pattern = pattern(&mut rng, s);
    let bg_amp = rng.random_range(0.0..0.08);
    let n_shapes = rng.random_range(2..=5);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cy = rng.random_range(0.1 * s..0.9 * s);
        let cx = rng.random_range(0.1 * s..0.9 * s);
        let r = rng.random_range(0.1 * s..0.3 * s);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Circle { cy, cx, r },
            1 => Shape::Rect { y0: cy - r, x0: cx - r * rng.random_range(0.5..1.5), y1: cy + r, x1: cx + r },
            _ => {
                let mut p = [(0.0, 0.0); 3];
                for (k, v) in p.iter_mut().enumerate() {
                    let a = g_angle + k as f64 * 2.1 + rng.random_range(-0.4..0.4);
                    *v = (cy + r * 1.3 * a.sin(), cx + r * 1.3 * a.cos());
                }
                Shape::Triangle { p }
            }
        };
        shapes.push((shape, color(&mut rng), pattern(&mut rng, s), rng.random_range(0.05..0.2)));
    }
    let (gy, gx) = (g_angle.sin(), g_angle.cos());
    let data = Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i[0], i[1] as f64 + 0.5, i[2] as f64 + 0.5);
        let t = (((y / s - 0.5) * gy + (x / s - 0.5) * gx) + 0.71) / 1.42;
        let mut v = c0[c] * (1.0 - t) + c1[c] * t + bg_amp * bg_pattern.value(y, x);
        for (shape, col, pat, amp) in &shapes {
            if shape.contains(y, x) {
                v = col[c] + amp * pat.value(y, x);
            }
        }
        T::lit(v.clamp(0.0, 1.0))
    });
    RgbImage::new(data).expect("synthetic image is in range")
}
