//! Texture feature reconstruction: global/local normalization, spatially
//! adaptive denormalization from a guidance source, and the per-level fusion
//! of guidance branches.

use rand::Rng;
use tsgl_tensor::{Conv2d, ParamStore, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::structure::{Level, LRELU_SLOPE};
use crate::texture::TextureEncoder;
use crate::variant::{Branch, GuideSource, NormMode, ReconVariant};

/// Mean and standard deviation removed by a normalization.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mode: NormMode,
    /// `[B,C,1,1]` for global, `[B,1,H,W]` for local.
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
    pub eps: f64,
}

fn normalize_over<T: Scalar>(f: &Var<T>, axes: &[usize], eps: f64, mode: NormMode) -> Result<(Var<T>, NormStats<T>)> {
    f.value().dims4()?;
    let mean = f.mean_axes(axes)?;
    let centered = f.sub(&mean)?;
    let std = centered.square().mean_axes(axes)?.clamp_min(T::lit(eps * eps)).sqrt();
    let out = centered.div(&std)?;
    let stats = NormStats { mode, mean: mean.value().clone(), std: std.value().clone(), eps };
    Ok((out, stats))
}

/// Per-sample, per-channel standardization over all spatial positions.
pub fn global_normalize<T: Scalar>(f: &Var<T>, eps: f64) -> Result<(Var<T>, NormStats<T>)> {
    let (_, _, h, w) = f.value().dims4()?;
    if h * w < 2 {
        return Err(invalid("global normalization needs at least two positions"));
    }
    normalize_over(f, &[2, 3], eps, NormMode::Global)
}

/// Per-position standardization across channels.
pub fn local_normalize<T: Scalar>(f: &Var<T>, eps: f64) -> Result<(Var<T>, NormStats<T>)> {
    let (_, c, _, _) = f.value().dims4()?;
    if c < 2 {
        return Err(invalid("local normalization needs at least two channels"));
    }
    normalize_over(f, &[1], eps, NormMode::Local)
}

pub fn normalize<T: Scalar>(f: &Var<T>, mode: NormMode, eps: f64) -> Result<(Var<T>, NormStats<T>)> {
    match mode {
        NormMode::Global => global_normalize(f, eps),
        NormMode::Local => local_normalize(f, eps),
    }
}

/// `γ ⊙ x̂ + β`; `γ`, `β` must match `x̂` spatially (channels may broadcast).
pub fn denormalize<T: Scalar>(f_norm: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
    let (_, _, h, w) = f_norm.value().dims4()?;
    for t in [gamma, beta] {
        let (_, _, gh, gw) = t.value().dims4()?;
        if (gh, gw) != (h, w) && (gh, gw) != (1, 1) {
            return Err(invalid(format!("denormalization source {gh}x{gw} does not match features {h}x{w}")));
        }
    }
    Ok(f_norm.mul(gamma)?.add(beta)?)
}

/// `prev − upsample(curr)` at the resolution of `prev` (nearest-neighbour).
pub fn residual_full<T: Scalar>(prev: &Var<T>, curr: &Var<T>) -> Result<Var<T>> {
    let (_, _, ph, pw) = prev.value().dims4()?;
    let (_, _, ch, cw) = curr.value().dims4()?;
    if ph != 2 * ch || pw != 2 * cw {
        return Err(invalid(format!("residual needs a 2x size ratio, got {ph}x{pw} vs {ch}x{cw}")));
    }
    Ok(prev.sub(&curr.upsample_nearest(2)?)?)
}

/// Local residual structure at the resolution of `curr`.
pub fn local_residual_structure<T: Scalar>(prev: &Var<T>, curr: &Var<T>) -> Result<Var<T>> {
    Ok(residual_full(prev, curr)?.avg_pool(2)?)
}

/// Level-1 fallback: the map minus its own 2× down/up-sampled copy.
pub fn self_residual<T: Scalar>(f: &Var<T>) -> Result<Var<T>> {
    Ok(f.sub(&f.avg_pool(2)?.upsample_nearest(2)?)?)
}

/// Predicts `γ` and `β` maps from a guidance source.
#[derive(Debug, Clone)]
pub struct DenormProjector {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl DenormProjector {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        src_ch: usize,
        hidden: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shared = Conv2d::new(ps, &format!("{name}.shared"), src_ch, hidden, 3, 1, true, rng)?;
        let gamma = Conv2d::new(ps, &format!("{name}.gamma"), hidden, out_ch, 1, 1, true, rng)?;
        let beta = Conv2d::new(ps, &format!("{name}.beta"), hidden, out_ch, 1, 1, true, rng)?;
        ps.get_mut(gamma.bias.unwrap()).map_inplace(|_| T::one());
        Ok(DenormProjector { shared, gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, src: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let h = self.shared.forward(ps, src)?.relu();
        Ok((self.gamma.forward(ps, &h)?, self.beta.forward(ps, &h)?))
    }
}

/// One branch at one level: a projector per pass.
#[derive(Debug, Clone)]
pub struct BranchLayer {
    pub branch: Branch,
    pub passes: Vec<DenormProjector>,
}

/// Guidance sources available at a level.
pub struct Sources<'a, T: Scalar> {
    pub texture: &'a Var<T>,
    pub structure: Option<&'a Var<T>>,
    pub residual: Option<&'a Var<T>>,
}

impl BranchLayer {
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, src: &Sources<'_, T>, eps: f64) -> Result<Var<T>> {
        let guide = match self.branch.source {
            GuideSource::GlobalStructure => src.structure.ok_or_else(|| invalid("branch needs structure features"))?,
            GuideSource::LocalResidual => src.residual.ok_or_else(|| invalid("branch needs a residual source"))?,
            GuideSource::Texture => src.texture,
        };
        let mut x = src.texture.clone();
        for proj in &self.passes {
            let (xn, _) = normalize(&x, self.branch.norm, eps)?;
            let (g, b) = proj.forward(ps, guide)?;
            x = denormalize(&xn, &g, &b)?;
        }
        Ok(x)
    }
}

/// Per-level branch projectors, structure adapters and the aggregation layer.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub variant: ReconVariant,
    pub eps: f64,
    /// `levels[k-1]` holds the branches of level `k`.
    pub levels: Vec<Vec<BranchLayer>>,
    /// 1×1 maps from structure channels to texture width, per level.
    pub adapters: Vec<Option<Conv2d>>,
    pub aggregate: Conv2d,
}

/// Reconstructed texture maps `F̃_1..F̃_{N+1}` plus the raw encoder maps they came from.
#[derive(Debug, Clone)]
pub struct ReconstructedSet<T: Scalar> {
    pub levels: Vec<Var<T>>,
    pub texture: Vec<Level<T>>,
}

impl Reconstructor {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.texture.dim;
        let variant = cfg.recon.variant;
        let mut levels = Vec::new();
        let mut adapters = Vec::new();
        for k in 1..=cfg.levels {
            let branches = variant
                .branches()
                .iter()
                .enumerate()
                .map(|(bi, br)| {
                    let n = if br.passes > 1 && cfg.recon.twice_levels.contains(&k) { br.passes } else { 1 };
                    let passes = (0..n)
                        .map(|p| DenormProjector::new(ps, &format!("recon.{k}.{bi}.{p}"), d, cfg.recon.hidden, d, rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(BranchLayer { branch: *br, passes })
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(branches);
            adapters.push(if variant.uses_structure() {
                Some(Conv2d::new(ps, &format!("recon.{k}.adapter"), cfg.structure.channels[k - 1], d, 1, 1, true, rng)?)
            } else {
                None
            });
        }
        let aggregate = Conv2d::new(ps, "recon.aggregate", cfg.levels * d, d, 3, 1, true, rng)?;
        Ok(Reconstructor { variant, eps: cfg.recon.eps, levels, adapters, aggregate })
    }

    /// Fused reconstruction of level `k` (1-based).
    pub fn reconstruct_layer<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        k: usize,
        f_t: &Var<T>,
        f_s: Option<&Var<T>>,
        prev_recon: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let branches = self.levels.get(k - 1).ok_or_else(|| invalid(format!("no reconstruction level {k}")))?;
        if branches.is_empty() {
            return Ok(f_t.clone());
        }
        let structure = match (&self.adapters[k - 1], f_s) {
            (Some(a), Some(s)) => Some(a.forward(ps, s)?),
            (Some(_), None) => return Err(invalid("variant needs structure features")),
            _ => None,
        };
        let residual = if branches.iter().any(|b| b.branch.source == GuideSource::LocalResidual) {
            Some(match prev_recon {
                Some(p) => local_residual_structure(p, f_t)?,
                None if k == 1 => self_residual(f_t)?,
                None => return Err(invalid(format!("level {k} needs the previous reconstruction"))),
            })
        } else {
            None
        };
        let src = Sources { texture: f_t, structure: structure.as_ref(), residual: residual.as_ref() };
        let mut out: Option<Var<T>> = None;
        for b in branches {
            let y = b.forward(ps, &src, self.eps)?;
            out = Some(match out {
                Some(acc) => acc.add(&y)?,
                None => y,
            });
        }
        Ok(out.unwrap())
    }

    /// Aggregation level: all reconstructed levels pooled to the coarsest size.
    pub fn aggregate_levels<T: Scalar>(&self, ps: &ParamStore<T>, levels: &[Var<T>]) -> Result<Var<T>> {
        let last = levels.last().ok_or_else(|| invalid("no levels to aggregate"))?;
        let (_, _, h, w) = last.value().dims4()?;
        let pooled = levels.iter().map(|l| Ok(l.resize(h, w, true)?)).collect::<Result<Vec<_>>>()?;
        Ok(self.aggregate.forward(ps, &Var::concat(&pooled, 1)?)?.leaky_relu(T::lit(LRELU_SLOPE)))
    }

    /// Runs the texture encoder with reconstruction between its stages.
    pub fn reconstruction_pass<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        encoder: &TextureEncoder,
        texture_input: &Var<T>,
        mask: &Tensor<T>,
        structure: &[Level<T>],
    ) -> Result<ReconstructedSet<T>> {
        let n = encoder.levels();
        if self.levels.len() != n || (self.variant.uses_structure() && structure.len() != n) {
            return Err(invalid(format!(
                "pyramid misalignment: {n} texture levels, {} reconstruction levels, {} structure levels",
                self.levels.len(),
                structure.len()
            )));
        }
        let mut recon: Vec<Var<T>> = Vec::with_capacity(n + 1);
        let mut texture = Vec::with_capacity(n);
        for k in 1..=n {
            let lvl = if k == 1 {
                encoder.head(ps, texture_input, mask)?
            } else {
                let prev: &Level<T> = &texture[k - 2];
                encoder.stage(ps, k, &recon[k - 2], &prev.mask)?
            };
            let f_s = structure.get(k - 1).map(|l| &l.features);
            let r = self.reconstruct_layer(ps, k, &lvl.features, f_s, recon.last())?;
            recon.push(r);
            texture.push(lvl);
        }
        let agg = self.aggregate_levels(ps, &recon)?;
        recon.push(agg);
        Ok(ReconstructedSet { levels: recon, texture })
    }
}
