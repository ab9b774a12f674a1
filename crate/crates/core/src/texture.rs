//! Texture encoder: partial-convolution head, then stages of masked window
//! attention blocks separated by strided partial convolutions.

use rand::Rng;
use tsgl_tensor::{instance_norm, Linear, ParamStore, Scalar, Tensor, Var};

use crate::config::TextureConfig;
use crate::error::{invalid, Result};
use crate::pconv::PartialConv2d;
use crate::structure::{Level, IN_EPS, LRELU_SLOPE};

/// `[B,H,W,C]` → `[B·nW, w·w, C]` with windows in row-major order.
pub fn window_partition<T: Scalar>(x: &Var<T>, w: usize) -> Result<Var<T>> {
    let (b, h, wd, c) = dims_nhwc(x.shape())?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(invalid(format!("window {w} does not tile a {h}x{wd} grid")));
    }
    Ok(x.reshape(&[b, h / w, w, wd / w, w, c])?.permute(&[0, 1, 3, 2, 4, 5])?.reshape(&[b * (h / w) * (wd / w), w * w, c])?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(x: &Var<T>, w: usize, b: usize, h: usize, wd: usize) -> Result<Var<T>> {
    let c = x.shape()[2];
    Ok(x.reshape(&[b, h / w, wd / w, w, w, c])?.permute(&[0, 1, 3, 2, 4, 5])?.reshape(&[b, h, wd, c])?)
}

fn dims_nhwc(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(invalid(format!("expected [B,H,W,C], got {s:?}"))),
    }
}

/// Softmax of `(q kᵀ − τ·invalid) / √dh` per row; `q`,`k` are `[N,T,dh]`, `invalid` is `[N,1,T]`.
pub fn attention_weights<T: Scalar>(q: &Var<T>, k: &Var<T>, invalid_keys: &Tensor<T>, tau: f64) -> Result<Var<T>> {
    let dh = *q.shape().last().ok_or_else(|| invalid("attention on rank-0 input"))?;
    let logits = q.matmul(&k.permute(&[0, 2, 1])?)?;
    let logits = if tau != 0.0 { logits.sub(&Var::constant(invalid_keys.map(|v| v * T::lit(tau))))? } else { logits };
    Ok(logits.mul_scalar(T::lit(1.0 / (dh as f64).sqrt())).softmax_last()?)
}

/// Window rule: a window with at least one valid token becomes fully valid.
/// `validity` is `[B,1,H,W]`; windows start at `shift` (cyclically).
pub fn update_token_mask<T: Scalar>(validity: &Tensor<T>, window: usize, shift: usize) -> Result<Tensor<T>> {
    let (b, _, h, w) = validity.dims4()?;
    let win = window.min(h).min(w);
    if h % win != 0 || w % win != 0 {
        return Err(invalid(format!("window {win} does not tile a {h}x{w} grid")));
    }
    let mut out = validity.clone();
    let half = T::lit(0.5);
    for bi in 0..b {
        for wy in 0..h / win {
            for wx in 0..w / win {
                let cells = (0..win * win).map(|i| {
                    let y = (wy * win + i / win + shift) % h;
                    let x = (wx * win + i % win + shift) % w;
                    [bi, 0, y, x]
                });
                if cells.clone().any(|c| validity.get(&c) > half) {
                    for c in cells {
                        out.set(&c, T::one());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Multi-head contextual attention over windows.
#[derive(Debug, Clone)]
pub struct ContextualAttention {
    pub qkv: Linear,
    pub heads: usize,
    pub tau: f64,
}

impl ContextualAttention {
    /// `tokens` `[N,T,d]`, `validity` `[N,T]` (1 = valid).
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, tokens: &Var<T>, validity: &Tensor<T>) -> Result<Var<T>> {
        let (n, t, d) = match *tokens.shape() {
            [n, t, d] => (n, t, d),
            ref s => return Err(invalid(format!("attention tokens must be [N,T,d], got {s:?}"))),
        };
        let (hn, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(ps, tokens)?.reshape(&[n, t, 3, hn, dh])?.permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<T>> { Ok(qkv.narrow(0, i, 1)?.reshape(&[n * hn, t, dh])?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let inv = Tensor::from_fn(&[n * hn, 1, t], |i| T::one() - validity.get(&[i[0] / hn, i[2]]));
        let a = attention_weights(&q, &k, &inv, self.tau)?;
        Ok(a.matmul(&v)?.reshape(&[n, hn, t, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?)
    }
}

/// `MLP(FC(concat(MCA(x), x)))` on tokens.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: ContextualAttention,
    pub fc: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub window: usize,
    pub shifted: bool,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: &TextureConfig,
        shifted: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(TransformerBlock {
            attn: ContextualAttention {
                qkv: Linear::new(ps, &format!("{name}.qkv"), d, 3 * d, true, rng)?,
                heads: cfg.heads,
                tau: cfg.tau,
            },
            fc: Linear::new(ps, &format!("{name}.fc"), 2 * d, d, true, rng)?,
            mlp_in: Linear::new(ps, &format!("{name}.mlp_in"), d, cfg.mlp_ratio * d, true, rng)?,
            mlp_out: Linear::new(ps, &format!("{name}.mlp_out"), cfg.mlp_ratio * d, d, true, rng)?,
            window: cfg.window,
            shifted,
        })
    }

    fn geometry(&self, h: usize) -> (usize, usize) {
        let w = self.window.min(h);
        let shift = if self.shifted && w < h { w / 2 } else { 0 };
        (w, shift)
    }

    /// `x` `[B,H,W,d]`, `validity` `[B,1,H,W]`; returns the new features and validity.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Var<T>, validity: &Tensor<T>) -> Result<(Var<T>, Tensor<T>)> {
        let (b, h, wd, _) = dims_nhwc(x.shape())?;
        let (w, shift) = self.geometry(h.min(wd));
        let s = shift as isize;
        let (xs, vs) = if shift > 0 {
            (x.roll(1, -s)?.roll(2, -s)?, validity.roll(2, -s)?.roll(3, -s)?)
        } else {
            (x.clone(), validity.clone())
        };
        let tokens = window_partition(&xs, w)?;
        let vt = window_partition(&Var::constant(vs.reshape(&[b, h, wd, 1])?), w)?;
        let nt = tokens.shape()[0];
        let vt = vt.value().reshape(&[nt, w * w])?;
        let attn = self.attn.forward(ps, &tokens, &vt)?;
        let h1 = self.fc.forward(ps, &Var::concat(&[attn, tokens], 2)?)?;
        let y = self.mlp_out.forward(ps, &self.mlp_in.forward(ps, &h1)?.leaky_relu(T::lit(LRELU_SLOPE)))?;
        let y = window_reverse(&y, w, b, h, wd)?;
        let y = if shift > 0 { y.roll(1, s)?.roll(2, s)? } else { y };
        Ok((y, update_token_mask(validity, w, shift)?))
    }
}

#[derive(Debug, Clone)]
pub struct TextureEncoder {
    pub head_in: PartialConv2d,
    pub head_down: PartialConv2d,
    /// One downsampling layer and block stack per level `2..=N`.
    pub downs: Vec<PartialConv2d>,
    pub stages: Vec<Vec<TransformerBlock>>,
}

impl TextureEncoder {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, in_ch: usize, cfg: &TextureConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let head_in = PartialConv2d::new(ps, "texture.head.0", in_ch, d, 3, 1, rng)?;
        let head_down = PartialConv2d::new(ps, "texture.head.1", d, d, 3, 2, rng)?;
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        for (s, &nb) in cfg.blocks.iter().enumerate() {
            downs.push(PartialConv2d::new(ps, &format!("texture.down.{}", s + 2), d, d, 3, 2, rng)?);
            let blocks = (0..nb)
                .map(|i| TransformerBlock::new(ps, &format!("texture.stage.{}.{i}", s + 2), cfg, cfg.shift && i % 2 == 1, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(TextureEncoder { head_in, head_down, downs, stages })
    }

    pub fn levels(&self) -> usize {
        self.stages.len() + 1
    }

    /// Level 1: half-resolution head features and mask.
    pub fn head<T: Scalar>(&self, ps: &ParamStore<T>, input: &Var<T>, mask: &Tensor<T>) -> Result<Level<T>> {
        let (x, m) = self.head_in.forward(ps, input, mask)?;
        let x = instance_norm(&x, T::lit(IN_EPS))?.leaky_relu(T::lit(LRELU_SLOPE));
        let (x, m) = self.head_down.forward(ps, &x, &m)?;
        let x = instance_norm(&x, T::lit(IN_EPS))?.leaky_relu(T::lit(LRELU_SLOPE));
        Ok(Level { features: x, mask: m })
    }

    /// Level `k ≥ 2` from the (reconstructed) level `k−1` map and its validity.
    pub fn stage<T: Scalar>(&self, ps: &ParamStore<T>, k: usize, prev: &Var<T>, prev_mask: &Tensor<T>) -> Result<Level<T>> {
        if k < 2 || k > self.levels() {
            return Err(invalid(format!("texture stage {k} outside 2..={}", self.levels())));
        }
        let (x, mut m) = self.downs[k - 2].forward(ps, prev, prev_mask)?;
        let mut t = x.permute(&[0, 2, 3, 1])?;
        for block in &self.stages[k - 2] {
            let (nt, nm) = block.forward(ps, &t, &m)?;
            t = nt;
            m = nm;
        }
        Ok(Level { features: t.permute(&[0, 3, 1, 2])?, mask: m })
    }

    /// All levels with no reconstruction between them.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, input: &Var<T>, mask: &Tensor<T>) -> Result<Vec<Level<T>>> {
        let mut levels = vec![self.head(ps, input, mask)?];
        for k in 2..=self.levels() {
            let prev = levels.last().unwrap();
            let next = self.stage(ps, k, &prev.features, &prev.mask)?;
            levels.push(next);
        }
        Ok(levels)
    }
}
