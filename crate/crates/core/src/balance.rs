//! Cross-layer balance: early/late/final streams of partial convolutions,
//! followed by channel and spatial feature equalization.

use rand::Rng;
use tsgl_tensor::{kernels, Conv2d, Linear, ParamStore, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::pconv::PartialConv2d;
use crate::recon::ReconstructedSet;
use crate::structure::LRELU_SLOPE;

const RANGE_EPS: f64 = 1e-6;

/// Resizes a `[B,1,H,W]` validity mask; a coarse cell is valid if any fine cell is.
pub fn resize_mask<T: Scalar>(m: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, _, mh, mw) = m.dims4()?;
    if (mh, mw) == (h, w) {
        Ok(m.clone())
    } else if mh > h {
        Ok(kernels::avg_pool(m, mh / h)?.map(|v| if v > T::zero() { T::one() } else { T::zero() }))
    } else {
        Ok(kernels::upsample_nearest(m, h / mh)?)
    }
}

fn shifted<T: Scalar>(x: &Var<T>, dy: isize, dx: isize) -> Result<Var<T>> {
    // out[i] = x[i + (dy, dx)], zero outside
    Ok(x.shift_zero(2, -dy)?.shift_zero(3, -dx)?)
}

fn check_radius(h: usize, w: usize, r: usize) -> Result<()> {
    if r == 0 || r >= h.min(w) {
        return Err(invalid(format!("equalization radius {r} does not fit a {h}x{w} map")));
    }
    Ok(())
}

/// Normalized Gaussian-weighted neighbourhood average; weights of in-bounds
/// neighbours sum to one at every position.
pub fn spatial_average<T: Scalar>(x: &Var<T>, radius: usize, bandwidth: f64) -> Result<Var<T>> {
    let (b, _, h, w) = x.value().dims4()?;
    check_radius(h, w, radius)?;
    let r = radius as isize;
    let ones = Var::constant(Tensor::ones(&[b, 1, h, w]));
    let mut num: Option<Var<T>> = None;
    let mut den: Option<Var<T>> = None;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = T::lit((-((dy * dy + dx * dx) as f64) / (2.0 * bandwidth * bandwidth)).exp());
            let xs = shifted(x, dy, dx)?.mul_scalar(g);
            let os = shifted(&ones, dy, dx)?.mul_scalar(g);
            num = Some(match num {
                Some(a) => a.add(&xs)?,
                None => xs,
            });
            den = Some(match den {
                Some(a) => a.add(&os)?,
                None => os,
            });
        }
    }
    Ok(num.unwrap().div(&den.unwrap())?)
}

/// Neighbourhood combination weighted by feature inner products, normalized
/// by the summed absolute weights.
pub fn range_average<T: Scalar>(x: &Var<T>, radius: usize) -> Result<Var<T>> {
    let (_, _, h, w) = x.value().dims4()?;
    check_radius(h, w, radius)?;
    let r = radius as isize;
    let mut num: Option<Var<T>> = None;
    let mut den: Option<Var<T>> = None;
    for dy in -r..=r {
        for dx in -r..=r {
            let xj = shifted(x, dy, dx)?;
            let wgt = x.mul(&xj)?.sum_axes(&[1])?;
            let term = xj.mul(&wgt)?;
            num = Some(match num {
                Some(a) => a.add(&term)?,
                None => term,
            });
            let aw = wgt.abs();
            den = Some(match den {
                Some(a) => a.add(&aw)?,
                None => aw,
            });
        }
    }
    Ok(num.unwrap().div(&den.unwrap().add_scalar(T::lit(RANGE_EPS)))?)
}

/// `sigmoid(W_g · avgpool(x)) ⊙ x` with one gate per channel.
pub fn channel_equalize<T: Scalar>(ps: &ParamStore<T>, gate: &Linear, x: &Var<T>) -> Result<Var<T>> {
    let (b, c, _, _) = x.value().dims4()?;
    let pooled = x.mean_axes(&[2, 3])?.reshape(&[b, c])?;
    let g = gate.forward(ps, &pooled)?.sigmoid().reshape(&[b, c, 1, 1])?;
    Ok(x.mul(&g)?)
}

#[derive(Debug, Clone)]
pub struct BalanceModule {
    pub streams: Vec<Vec<PartialConv2d>>,
    pub gate: Linear,
    pub fuse: Conv2d,
    /// 1×1 maps to texture width for decoder levels `1..=N`.
    pub outputs: Vec<Conv2d>,
    pub early: usize,
    pub resolution_level: usize,
    pub spatial_radius: usize,
    pub range_radius: usize,
    pub bandwidth: f64,
    pub equalize: bool,
}

impl BalanceModule {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let b = &cfg.balance;
        let d = cfg.texture.dim;
        let n = cfg.levels;
        let sizes = [b.early, n - b.early, 1];
        let mut streams = Vec::new();
        for (si, (&g, &k)) in sizes.iter().zip(&b.kernels).enumerate() {
            let convs = (0..b.convs_per_stream)
                .map(|i| {
                    let cin = if i == 0 { g * d } else { d };
                    PartialConv2d::new(ps, &format!("balance.stream.{si}.{i}"), cin, d, k, 1, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            streams.push(convs);
        }
        let gate = Linear::new(ps, "balance.gate", 3 * d, 3 * d, true, rng)?;
        let fuse = Conv2d::new(ps, "balance.fuse", 6 * d, 3 * d, 1, 1, true, rng)?;
        let outputs = (1..=n)
            .map(|k| Ok(Conv2d::new(ps, &format!("balance.out.{k}"), 3 * d, d, 1, 1, true, rng)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(BalanceModule {
            streams,
            gate,
            fuse,
            outputs,
            early: b.early,
            resolution_level: b.resolution_level,
            spatial_radius: b.spatial_radius,
            range_radius: b.range_radius,
            bandwidth: b.bandwidth,
            equalize: b.equalize,
        })
    }

    fn stream<T: Scalar>(&self, ps: &ParamStore<T>, i: usize, members: &[Var<T>], mask: &Tensor<T>) -> Result<Var<T>> {
        if members.is_empty() {
            return Err(invalid("balance stream has no members"));
        }
        let (mut x, mut m) = (Var::concat(members, 1)?, mask.clone());
        for conv in &self.streams[i] {
            let (y, nm) = conv.forward(ps, &x, &m)?;
            x = y.leaky_relu(T::lit(LRELU_SLOPE));
            m = nm;
        }
        Ok(x)
    }

    /// Concatenated stream outputs at the balance resolution, before equalization.
    pub fn streams_forward<T: Scalar>(&self, ps: &ParamStore<T>, set: &ReconstructedSet<T>) -> Result<Var<T>> {
        let n = set.texture.len();
        if set.levels.len() != n + 1 || self.outputs.len() != n {
            return Err(invalid(format!("balance expects {} levels plus aggregation, got {}", self.outputs.len(), set.levels.len())));
        }
        let (b, _, rh, rw) = set.texture[self.resolution_level - 1].features.value().dims4()?;
        let mut groups: Vec<(Vec<Var<T>>, Tensor<T>)> = Vec::new();
        for range in [0..self.early, self.early..n] {
            let mut members = Vec::new();
            let mut mask = Tensor::zeros(&[b, 1, rh, rw]);
            for k in range {
                members.push(set.levels[k].resize(rh, rw, false)?);
                let mk = resize_mask(&set.texture[k].mask, rh, rw)?;
                mask = mask.zip_map(&mk, |a, c| a.max(c))?;
            }
            groups.push((members, mask));
        }
        groups.push((vec![set.levels[n].resize(rh, rw, false)?], Tensor::ones(&[b, 1, rh, rw])));
        let outs = groups
            .iter()
            .enumerate()
            .map(|(i, (m, mask))| self.stream(ps, i, m, mask))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::concat(&outs, 1)?)
    }

    pub fn equalize_forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        if !self.equalize {
            return Ok(x.clone());
        }
        let xc = channel_equalize(ps, &self.gate, x)?;
        let ys = spatial_average(&xc, self.spatial_radius, self.bandwidth)?;
        let yr = range_average(&xc, self.range_radius)?;
        Ok(self.fuse.forward(ps, &Var::concat(&[ys, yr], 1)?)?)
    }

    /// Balanced maps for decoder levels `1..=N`, each at that level's size.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, set: &ReconstructedSet<T>) -> Result<Vec<Var<T>>> {
        let eq = self.equalize_forward(ps, &self.streams_forward(ps, set)?)?;
        set.texture
            .iter()
            .zip(&self.outputs)
            .map(|(lvl, conv)| {
                let (_, _, h, w) = lvl.features.value().dims4()?;
                Ok(conv.forward(ps, &eq.resize(h, w, false)?)?)
            })
            .collect()
    }
}
