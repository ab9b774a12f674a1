//! Report artifacts: heatmap and bar-chart PNGs, JSON files, feature dumps.

use std::fs;
use std::path::Path;

use serde::Serialize;
use tsgl_tensor::{Scalar, Tensor};

use crate::container::Container;
use crate::error::{invalid, Error, Result};

pub const FEATURE_KIND: &[u8; 4] = b"FEAT";

const STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 0.02]),
    (0.25, [0.34, 0.06, 0.43]),
    (0.5, [0.73, 0.21, 0.33]),
    (0.75, [0.98, 0.55, 0.04]),
    (1.0, [0.99, 1.0, 0.64]),
];

const SERIES_COLORS: [[u8; 3]; 6] =
    [[70, 110, 200], [220, 90, 50], [60, 160, 90], [150, 80, 170], [200, 170, 40], [90, 90, 90]];

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps `t ∈ [0,1]` onto a dark-to-bright colour ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let i = STOPS.iter().position(|s| s.0 >= t).unwrap_or(STOPS.len() - 1).max(1);
    let ((t0, c0), (t1, c1)) = (STOPS[i - 1], STOPS[i]);
    let a = (t - t0) / (t1 - t0);
    [0, 1, 2].map(|k| to_u8(c0[k] + a * (c1[k] - c0[k])))
}

fn write_rgb(path: &Path, w: usize, h: usize, buf: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    image::save_buffer(path, buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Min-max normalised colour heatmap of an `[H,W]` (or `[1,H,W]`) map,
/// upscaled by an integer factor so small maps stay visible.
pub fn save_heatmap(map: &Tensor<f64>, path: &Path, min_side: usize) -> Result<()> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(invalid(format!("heatmap wants HxW, got {s:?}"))),
    };
    let (lo, hi) = map.data().iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let s = min_side.div_ceil(h.min(w).max(1)).max(1);
    let (oh, ow) = (h * s, w * s);
    let mut buf = vec![0u8; oh * ow * 3];
    for y in 0..oh {
        for x in 0..ow {
            let c = colormap((map.data()[(y / s) * w + x / s] - lo) / span);
            buf[(y * ow + x) * 3..][..3].copy_from_slice(&c);
        }
    }
    write_rgb(path, ow, oh, &buf)
}

/// `[3,H,W]` or `[1,3,H,W]` tensor in `[0,1]` as an RGB PNG.
pub fn save_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(invalid(format!("expected a 3-channel image, got {s:?}"))),
    };
    let d = t.data();
    let mut buf = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for c in 0..3 {
            buf[i * 3 + c] = to_u8(d[c * h * w + i].as_f64());
        }
    }
    write_rgb(path, w, h, &buf)
}

/// Grouped bar chart: one group per level, one bar per series. Missing
/// values leave a gap. Values are drawn on a shared linear axis from zero.
pub fn save_bar_chart(series: &[(String, Vec<Option<f64>>)], path: &Path) -> Result<()> {
    let groups = series.iter().map(|s| s.1.len()).max().unwrap_or(0);
    if series.is_empty() || groups == 0 {
        return Err(invalid("bar chart needs at least one value"));
    }
    let vmax = series.iter().flat_map(|s| s.1.iter().flatten()).fold(0.0f64, |a, &v| if v.is_finite() { a.max(v) } else { a });
    let vmax = if vmax > 0.0 { vmax } else { 1.0 };
    let (bar, gap, pad) = (14usize, 18usize, 20usize);
    let (w, h) = (pad * 2 + groups * (series.len() * bar + gap), 240usize);
    let plot_h = h - 2 * pad;
    let mut buf = vec![255u8; w * h * 3];
    let mut fill = |x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]| {
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                buf[(y * w + x) * 3..][..3].copy_from_slice(&c);
            }
        }
    };
    for (g, x0) in (0..groups).map(|g| (g, pad + gap / 2 + g * (series.len() * bar + gap))) {
        for (si, (_, vals)) in series.iter().enumerate() {
            if let Some(v) = vals.get(g).copied().flatten().filter(|v| v.is_finite()) {
                let bh = ((v.max(0.0) / vmax) * plot_h as f64).round() as usize;
                let x = x0 + si * bar;
                fill(x + 1, x + bar - 1, h - pad - bh, h - pad, SERIES_COLORS[si % SERIES_COLORS.len()]);
            }
        }
    }
    fill(pad, w - pad, h - pad, h - pad + 1, [0, 0, 0]);
    fill(pad, pad + 1, pad, h - pad, [0, 0, 0]);
    write_rgb(path, w, h, &buf)
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Named tensors in a versioned container, for offline inspection.
pub fn save_features<T: Scalar>(named: &[(String, Tensor<T>)], meta: serde_json::Value, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut c = Container::new(FEATURE_KIND, meta);
    for (n, t) in named {
        c.push(n.clone(), t.clone());
    }
    c.save(path)
}

pub fn load_features<T: Scalar>(path: &Path) -> Result<Container<T>> {
    Container::load(path, FEATURE_KIND)
}
