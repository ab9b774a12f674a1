//! Raw compute kernels on dense buffers: convolution, matmul, pooling, resampling.

use crate::error::{invalid, Result, TensorError};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(invalid("conv2d", format!("input must be rank 4, got {x:?}"))),
        };
        let (o, ci, kh, kw) = match *wt {
            [o, ci, kh, kw] => (o, ci, kh, kw),
            _ => return Err(invalid("conv2d", format!("weight must be rank 4, got {wt:?}"))),
        };
        if ci != c {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: wt.to_vec() });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(invalid("conv2d", format!("kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Conv2dGeom { n, c, h, w, o, kh, kw, stride, pad, ho, wo })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose tap `kx` lands inside the input row.
fn valid_cols(g: &Conv2dGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &Conv2dGeom, x: &[T], cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(g, kx);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[(ox + lo) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Conv2dGeom, cols: &[T], x: &mut [T]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(g, kx);
                    for (ox, &v) in line[lo..hi].iter().enumerate() {
                        let ix = (ox + lo) * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` `[N,C,H,W]` with `w` `[O,C,kh,kw]`, no bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = Conv2dGeom::new(x.shape(), w.shape(), stride, pad)?;
    let mut out = vec![T::zero(); g.n * g.o * g.col_cols()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.col_cols();
    for n in 0..g.n {
        let xs = &x.data()[n * in_sz..(n + 1) * in_sz];
        let colref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            MatRef::new(w.data(), g.o, g.col_rows()),
            MatRef::new(colref, g.col_rows(), g.col_cols()),
            T::zero(),
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
    Tensor::new(&[g.n, g.o, g.ho, g.wo], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    grad: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeom::new(x_shape, w.shape(), stride, pad)?;
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.col_cols();
    let mut dx = vec![T::zero(); g.n * in_sz];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.n {
        let gs = &grad.data()[n * out_sz..(n + 1) * out_sz];
        let dxs = &mut dx[n * in_sz..(n + 1) * in_sz];
        if g.is_pointwise() {
            gemm(
                T::one(),
                MatRef::new(w.data(), g.o, g.col_rows()).t(),
                MatRef::new(gs, g.o, g.col_cols()),
                T::zero(),
                dxs,
            );
        } else {
            gemm(
                T::one(),
                MatRef::new(w.data(), g.o, g.col_rows()).t(),
                MatRef::new(gs, g.o, g.col_cols()),
                T::zero(),
                &mut cols,
            );
            col2im(&g, &cols, dxs);
        }
    }
    Tensor::new(x_shape, dx)
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_grad_weight<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeom::new(x.shape(), w_shape, stride, pad)?;
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.col_cols();
    let mut dw = vec![T::zero(); g.o * g.col_rows()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    for n in 0..g.n {
        let xs = &x.data()[n * in_sz..(n + 1) * in_sz];
        let colref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            MatRef::new(&grad.data()[n * out_sz..(n + 1) * out_sz], g.o, g.col_cols()),
            MatRef::new(colref, g.col_rows(), g.col_cols()).t(),
            T::one(),
            &mut dw,
        );
    }
    Tensor::new(w_shape, dw)
}

/// Matrix dimensions of a (batched) matmul: `(batch, m, k, n, shared_rhs)`.
pub fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("matmul", format!("operands must be rank >= 2: {a:?} {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
    }
    let batch_a: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        return Ok((batch_a, m, k, n, true));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok((batch_a, m, k, n, false))
}

/// `a @ b` over trailing two dims; `b` may be rank 2 and shared over the batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    if shared {
        gemm(T::one(), MatRef::new(a.data(), batch * m, k), MatRef::new(b.data(), k, n), T::zero(), &mut out);
    } else {
        for i in 0..batch {
            gemm(
                T::one(),
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }
    Tensor::new(&out_shape, out)
}

/// Gradients of `a @ b` given the output gradient.
pub fn matmul_grads<T: Scalar>(grad: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    if shared {
        gemm(T::one(), MatRef::new(grad.data(), batch * m, n), MatRef::new(b.data(), k, n).t(), T::zero(), &mut da);
        gemm(T::one(), MatRef::new(a.data(), batch * m, k).t(), MatRef::new(grad.data(), batch * m, n), T::zero(), &mut db);
    } else {
        for i in 0..batch {
            let gs = &grad.data()[i * m * n..(i + 1) * m * n];
            gemm(
                T::one(),
                MatRef::new(gs, m, n),
                MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                T::zero(),
                &mut da[i * m * k..(i + 1) * m * k],
            );
            gemm(
                T::one(),
                MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                MatRef::new(gs, m, n),
                T::zero(),
                &mut db[i * k * n..(i + 1) * k * n],
            );
        }
    }
    Ok((Tensor::new(a.shape(), da)?, Tensor::new(b.shape(), db)?))
}

fn check_factor(op: &'static str, shape: &[usize], f: usize, down: bool) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = match *shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(invalid(op, format!("expected rank 4, got {shape:?}"))),
    };
    if f == 0 || (down && (h % f != 0 || w % f != 0)) {
        return Err(invalid(op, format!("factor {f} incompatible with {h}x{w}")));
    }
    Ok((n, c, h, w))
}

/// Mean over non-overlapping `f x f` blocks.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_factor("avg_pool", x.shape(), f, true)?;
    let (ho, wo) = (h / f, w / f);
    let scale = T::one() / T::from_usize(f * f).unwrap();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                let o = (y / f) * wo + xx / f;
                dst[o] = dst[o] + src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v = *v * scale;
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Maximum over non-overlapping `f x f` blocks (used for validity masks).
pub fn max_pool<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_factor("max_pool", x.shape(), f, true)?;
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![T::neg_infinity(); n * c * ho * wo];
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let o = p * ho * wo + (y / f) * wo + xx / f;
                out[o] = out[o].max(x.data()[p * h * w + y * w + xx]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_factor("upsample_nearest", x.shape(), f, false)?;
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                out[p * ho * wo + y * wo + xx] = x.data()[p * h * w + (y / f) * w + xx / f];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Adjoint of [`upsample_nearest`]: block sums.
pub fn upsample_nearest_grad<T: Scalar>(g: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let pooled = avg_pool(g, f)?;
    let s = T::from_usize(f * f).unwrap();
    Ok(pooled.map(|v| v * s))
}

/// Adjoint of [`avg_pool`].
pub fn avg_pool_grad<T: Scalar>(g: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let up = upsample_nearest(g, f)?;
    let s = T::one() / T::from_usize(f * f).unwrap();
    Ok(up.map(|v| v * s))
}

/// Source taps for half-pixel-centred linear interpolation along one axis.
fn linear_taps(src: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..src * f)
        .map(|d| {
            let pos = ((d as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edge clamped).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_factor("upsample_bilinear", x.shape(), f, false)?;
    let (ty, tx) = (linear_taps(h, f), linear_taps(w, f));
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                out[p * ho * wo + y * wo + xx] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_grad<T: Scalar>(g: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = check_factor("upsample_bilinear_grad", g.shape(), f, true)?;
    let (h, w) = (ho / f, wo / f);
    let (ty, tx) = (linear_taps(h, f), linear_taps(w, f));
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::lit(ly);
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::lit(lx);
                let v = g.data()[p * ho * wo + y * wo + xx];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - lx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * lx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - lx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * lx;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        Tensor::from_fn(&[n, o, ho, wo], |i| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (i[2] * s + ky) as isize - p as isize;
                        let ix = (i[3] * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.get(&[i[0], ci, iy as usize, ix as usize]) * w.get(&[i[1], ci, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let mut k = seed;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 12.9898).sin() * 0.5
        })
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (1, 0, 2)] {
            let x = pseudo(&[2, 3, 7, 6], 1.0);
            let w = pseudo(&[4, 3, k, k], 7.0);
            let got = conv2d(&x, &w, s, p).unwrap();
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_grads_are_adjoint() {
        // <conv(x), g> must equal <x, dconv_dx(g)> and <w, dconv_dw(g)>.
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (1, 3, 7)] {
            let x = pseudo(&[2, 3, 6, 6], 3.0);
            let w = pseudo(&[2, 3, k, k], 5.0);
            let y = conv2d(&x, &w, s, p).unwrap();
            let g = pseudo(y.shape(), 11.0);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let dx = conv2d_grad_input(&g, &w, x.shape(), s, p).unwrap();
            let dw = conv2d_grad_weight(&g, &x, w.shape(), s, p).unwrap();
            let rx: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let rw: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rx).abs() < 1e-10);
            assert!((lhs - rw).abs() < 1e-10);
        }
    }

    #[test]
    fn resampling_adjoints() {
        let x = pseudo(&[1, 2, 3, 4], 2.0);
        for f in [2, 4] {
            let y = upsample_bilinear(&x, f).unwrap();
            let g = pseudo(y.shape(), 9.0);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let back = upsample_bilinear_grad(&g, f).unwrap();
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
        let big = pseudo(&[1, 1, 4, 4], 4.0);
        let pooled = avg_pool(&big, 2).unwrap();
        let g = pseudo(pooled.shape(), 1.0);
        let lhs: f64 = pooled.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = big.data().iter().zip(avg_pool_grad(&g, 2).unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 0.7);
        let y = upsample_bilinear(&x, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn matmul_batched_and_shared() {
        let a = pseudo(&[2, 3, 4], 1.0);
        let b = pseudo(&[2, 4, 5], 2.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let want: f64 = (0..4).map(|p| a.get(&[1, 2, p]) * b.get(&[1, p, 3])).sum();
        assert!((c.get(&[1, 2, 3]) - want).abs() < 1e-12);
        let w = pseudo(&[4, 5], 3.0);
        let c2 = matmul(&a, &w).unwrap();
        let want2: f64 = (0..4).map(|p| a.get(&[0, 1, p]) * w.get(&[p, 2])).sum();
        assert!((c2.get(&[0, 1, 2]) - want2).abs() < 1e-12);
    }
}
