//! Feature-map measurements and image quality metrics.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use tsgl_tensor::{Scalar, Tensor};

use crate::error::{invalid, Result};

pub const KL_FLOOR: f64 = 1e-10;
pub const PSNR_CAP: f64 = 99.0;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `Σ p ln(p / q)` with `q` floored; zero-probability terms of `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(invalid(format!("KL needs equal non-empty lengths, got {} and {}", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b.max(KL_FLOOR)).ln()).sum::<f64>().max(0.0))
}

pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(0.5 * (kl_divergence(p, q)? + kl_divergence(q, p)?))
}

/// How structure is pulled out of a feature map before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Identity,
    Highpass,
    Residual,
}

impl Extractor {
    pub const ALL: [Extractor; 3] = [Extractor::Identity, Extractor::Highpass, Extractor::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Extractor::Identity => "identity",
            Extractor::Highpass => "highpass",
            Extractor::Residual => "residual",
        }
    }
}

fn plane<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match t.rank() {
        4 => Ok(t.dims4()?),
        3 => Ok((1, t.shape()[0], t.shape()[1], t.shape()[2])),
        _ => Err(invalid(format!("expected a [C,H,W] or [B,C,H,W] map, got {:?}", t.shape()))),
    }
}

/// Per-channel 3×3 Laplacian (centre 8, neighbours −1) with edge replication.
pub fn highpass<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = plane(f)?;
    if h < 3 || w < 3 {
        return Err(invalid(format!("high-pass filter needs at least 3x3, got {h}x{w}")));
    }
    let src = f.data();
    let mut out = vec![T::zero(); src.len()];
    for p in 0..b * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc -= s[yy * w + xx].as_f64();
                    }
                }
                out[p * h * w + y * w + x] = T::lit(acc + 8.0 * s[y * w + x].as_f64());
            }
        }
    }
    Ok(Tensor::new(f.shape(), out)?)
}

/// The map minus its 2×-downsampled-then-upsampled copy.
pub fn residual_structure<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = plane(f)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(format!("residual structure needs even sides, got {h}x{w}")));
    }
    let src = f.data();
    let mut out = vec![T::zero(); src.len()];
    for p in 0..b * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (y0, x0) = (y & !1, x & !1);
                let avg = (s[y0 * w + x0] + s[y0 * w + x0 + 1] + s[(y0 + 1) * w + x0] + s[(y0 + 1) * w + x0 + 1]).as_f64() / 4.0;
                out[p * h * w + y * w + x] = T::lit(s[y * w + x].as_f64() - avg);
            }
        }
    }
    Ok(Tensor::new(f.shape(), out)?)
}

/// Per-sample channel vectors: spatial means of the extracted map. Signed
/// extractors are rectified first since their spatial mean is near zero.
pub fn channel_vectors<T: Scalar>(f: &Tensor<T>, ex: Extractor) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = plane(f)?;
    if b * c * h * w == 0 {
        return Err(invalid("empty feature map"));
    }
    let (m, rectify) = match ex {
        Extractor::Identity => (f.clone(), false),
        Extractor::Highpass => (highpass(f)?, true),
        Extractor::Residual => (residual_structure(f)?, true),
    };
    let hw = h * w;
    Ok((0..b)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let s = &m.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    s.iter().map(|v| if rectify { v.as_f64().abs() } else { v.as_f64() }).sum::<f64>() / hw as f64
                })
                .collect()
        })
        .collect())
}

fn batch_divergence<T: Scalar>(
    f_k: &Tensor<T>,
    f_prev: &Tensor<T>,
    ex: Extractor,
    div: fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<f64> {
    let (a, b) = (channel_vectors(f_k, ex)?, channel_vectors(f_prev, ex)?);
    if a.len() != b.len() || a[0].len() != b[0].len() {
        return Err(invalid("feature maps differ in batch or channel count"));
    }
    let mut total = 0.0;
    for (u, v) in a.iter().zip(&b) {
        total += div(&softmax(u), &softmax(v))?;
    }
    Ok(total / a.len() as f64)
}

/// Batch-mean KL from the level-`k` distribution to the level-`k−1` one.
pub fn feature_kl<T: Scalar>(f_k: &Tensor<T>, f_prev: &Tensor<T>, ex: Extractor) -> Result<f64> {
    batch_divergence(f_k, f_prev, ex, kl_divergence)
}

pub fn feature_symmetric_kl<T: Scalar>(f_k: &Tensor<T>, f_prev: &Tensor<T>, ex: Extractor) -> Result<f64> {
    batch_divergence(f_k, f_prev, ex, symmetric_kl)
}

/// KL between consecutive levels; entry `i` compares level `i+2` with level `i+1`.
/// Levels too small for the extractor give `None`.
pub fn level_kls<T: Scalar>(levels: &[Tensor<T>], ex: Extractor) -> Vec<Option<f64>> {
    levels.windows(2).map(|p| feature_kl(&p[1], &p[0], ex).ok()).collect()
}

pub fn level_symmetric_kls<T: Scalar>(levels: &[Tensor<T>], ex: Extractor) -> Vec<Option<f64>> {
    levels.windows(2).map(|p| feature_symmetric_kl(&p[1], &p[0], ex).ok()).collect()
}

/// Per-position Shannon entropy (nats) of the softmax across channels, `[H,W]`.
pub fn channel_entropy<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<f64>> {
    let (b, c, h, w) = plane(f)?;
    if b != 1 || c < 2 {
        return Err(invalid(format!("entropy map needs one sample with at least 2 channels, got {:?}", f.shape())));
    }
    let hw = h * w;
    let mut out = vec![0.0; hw];
    let mut logits = vec![0.0; c];
    for (i, o) in out.iter_mut().enumerate() {
        for (ch, l) in logits.iter_mut().enumerate() {
            *l = f.data()[ch * hw + i].as_f64();
        }
        *o = softmax(&logits).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    }
    Ok(Tensor::new(&[h, w], out)?)
}

fn channel_mean<T: Scalar>(f: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (b, c, h, w) = plane(f)?;
    if b != 1 {
        return Err(invalid("spectrogram takes one sample"));
    }
    let hw = h * w;
    let mut m = vec![0.0; hw];
    for ch in 0..c {
        for (i, v) in m.iter_mut().enumerate() {
            *v += f.data()[ch * hw + i].as_f64() / c as f64;
        }
    }
    Ok((h, w, m))
}

/// Unshifted 2-D DFT of a row-major `h×w` field.
pub fn dft2(h: usize, w: usize, data: &[f64]) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let (row, col) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    buf
}

/// Channel-mean map → DFT magnitude → `ln(1+|F|)`, with the DC bin moved to
/// `(h/2, w/2)`.
pub fn spectrogram<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<f64>> {
    let (h, w, m) = channel_mean(f)?;
    if h < 4 || w < 4 {
        return Err(invalid(format!("spectrogram needs at least 4x4, got {h}x{w}")));
    }
    let spec = dft2(h, w, &m);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[((y + h / 2) % h) * w + (x + w / 2) % w] = spec[y * w + x].norm().ln_1p();
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak 1.0; identical inputs give the 99 dB cap.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.numel().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// PSNR over hole pixels only (`mask == 0`); `a`,`b` are `[C,H,W]`, mask `[1,H,W]`.
pub fn masked_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    let (_, c, h, w) = plane(a)?;
    if mask.numel() != h * w {
        return Err(invalid("mask does not match the image"));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for i in 0..h * w {
            if mask.data()[i] == T::zero() {
                se += (a.data()[ch * h * w + i].as_f64() - b.data()[ch * h * w + i].as_f64()).powi(2);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { PSNR_CAP } else { psnr_from_mse(se / n as f64) })
}

fn luminance<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (_, c, h, w) = plane(img)?;
    let d = img.data();
    let hw = h * w;
    let y = match c {
        1 => d.iter().map(|v| v.as_f64()).collect(),
        3 => (0..hw).map(|i| 0.299 * d[i].as_f64() + 0.587 * d[hw + i].as_f64() + 0.114 * d[2 * hw + i].as_f64()).collect(),
        _ => return Err(invalid(format!("SSIM takes 1 or 3 channels, got {c}"))),
    };
    Ok((h, w, y))
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn filter_valid(h: usize, w: usize, src: &[f64], g: &[f64]) -> (usize, usize, Vec<f64>) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    (ho, wo, out)
}

/// Mean local SSIM of the luminance with a Gaussian window (σ = 1.5) over
/// fully-contained windows.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, window: usize) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, x) = luminance(a)?;
    let (_, _, y) = luminance(b)?;
    if window % 2 == 0 || window > h || window > w {
        return Err(invalid(format!("SSIM window {window} must be odd and fit a {h}x{w} image")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window(window, 1.5);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (_, _, mx) = filter_valid(h, w, &x, &g);
    let (_, _, my) = filter_valid(h, w, &y, &g);
    let (_, _, sxx) = filter_valid(h, w, &prod(&x, &x), &g);
    let (_, _, syy) = filter_valid(h, w, &prod(&y, &y), &g);
    let (_, _, sxy) = filter_valid(h, w, &prod(&x, &y), &g);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((kl - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((kl - 0.1438).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn highpass_cases() {
        let c = Tensor::full(&[2, 5, 5], 3.0f64);
        assert!(highpass(&c).unwrap().max_abs() == 0.0);
        let mut imp = Tensor::zeros(&[1, 5, 5]);
        imp.set(&[0, 2, 2], 1.0f64);
        let y = highpass(&imp).unwrap();
        assert_eq!(y.get(&[0, 2, 2]), 8.0);
        assert_eq!(y.get(&[0, 1, 1]), -1.0);
        assert_eq!(y.get(&[0, 3, 2]), -1.0);
        assert_eq!(y.get(&[0, 0, 0]), 0.0);
        let ramp = Tensor::from_fn(&[1, 6, 6], |i| 0.3 * i[1] as f64 - 0.7 * i[2] as f64);
        let y = highpass(&ramp).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert!(y.get(&[0, r, c]).abs() < 1e-12);
            }
        }
        assert!(highpass(&Tensor::<f64>::zeros(&[1, 2, 5])).is_err());
    }

    #[test]
    fn entropy_cases() {
        let u = Tensor::full(&[4, 2, 2], 0.7f64);
        let e = channel_entropy(&u).unwrap();
        assert!(e.data().iter().all(|v| (v - 4f64.ln()).abs() < 1e-12));
        let d = Tensor::from_fn(&[4, 1, 1], |i| if i[0] == 2 { 30.0f64 } else { 0.0 });
        assert!(channel_entropy(&d).unwrap().data()[0] < 1e-10);
    }

    #[test]
    fn spectrogram_peaks() {
        let c = Tensor::full(&[1, 8, 8], 2.0f64);
        let s = spectrogram(&c).unwrap();
        let (imax, _) = s.data().iter().enumerate().fold((0, f64::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
        assert_eq!(imax, 4 * 8 + 4);
        assert!(s.data().iter().enumerate().all(|(i, &v)| i == imax || v == 0.0));
        let w = 32;
        let sin = Tensor::from_fn(&[1, 16, w], |i| (2.0 * std::f64::consts::PI * i[2] as f64 / 8.0).sin());
        let s = spectrogram(&sin).unwrap();
        let row = &s.data()[8 * w..9 * w];
        let mut peaks: Vec<usize> = (0..w).filter(|&x| row[x] > 1.0).collect();
        peaks.sort();
        assert_eq!(peaks, vec![w / 2 - w / 8, w / 2 + w / 8]);
    }

    #[test]
    fn parseval() {
        let (h, w) = (6, 10);
        let d: Vec<f64> = (0..h * w).map(|i| ((i * 7 % 13) as f64 * 0.31).sin()).collect();
        let spec = dft2(h, w, &d);
        let e1: f64 = d.iter().map(|v| v * v).sum();
        let e2: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / (h * w) as f64;
        assert!((e1 - e2).abs() / e1 < 1e-6);
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::from_fn(&[3, 4, 4], |i| (i[0] + i[1] + i[2]) as f64 * 0.05);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let mask = Tensor::from_fn(&[1, 4, 4], |i| if i[2] < 2 { 1.0 } else { 0.0 });
        let mut c = a.clone();
        for ch in 0..3 {
            for y in 0..4 {
                for x in 2..4 {
                    c.set(&[ch, y, x], a.get(&[ch, y, x]) + 0.1);
                }
                c.set(&[ch, y, 0], 0.9);
            }
        }
        assert!((masked_psnr(&a, &c, &mask).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_cases() {
        let a = Tensor::from_fn(&[3, 16, 16], |i| ((i[1] * 3 + i[2] * 5 + i[0]) % 7) as f64 / 7.0);
        assert!((ssim(&a, &a, 11).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg, 11).unwrap() < 1.0);
        assert!(ssim(&a, &a, 17).is_err());
    }
}
