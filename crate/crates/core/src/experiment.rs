//! Evaluation, ablation sweeps and feature diagnosis built on trained models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tsgl_tensor::{Scalar, Tensor};

use crate::config::Config;
use crate::data::{generate_irregular_mask, Batch, Dataset, Mask, MaskBucket, Sample, Source};
use crate::diagnostics::{
    channel_entropy, highpass, level_kls, level_symmetric_kls, masked_psnr, psnr, residual_structure, spectrogram, ssim,
    Extractor,
};
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::report::{save_bar_chart, save_features, save_heatmap, save_rgb, write_json};
use crate::train::{train, validation_batch, EpochStats, RunDir};
use crate::variant::ReconVariant;

const EVAL_CHUNK: usize = 8;
const EVAL_STREAM: u64 = 1 << 32;
const HEATMAP_SIDE: usize = 128;

/// Training and held-out splits described by the data config.
pub fn splits<T: Scalar>(cfg: &Config) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = &cfg.data;
    let prep = d.prep();
    let mut train_src = vec![Source::Synthetic { count: d.train_count, first_seed: 0 }];
    if let Some(m) = &d.manifest {
        train_src.push(Source::Manifest(m.clone()));
    }
    let val_src = [Source::Synthetic { count: d.val_count, first_seed: d.val_first_seed }];
    Ok((Dataset::build(&train_src, d.image_size, &prep)?, Dataset::build(&val_src, d.image_size, &prep)?))
}

fn slice<T: Scalar>(t: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    Ok(t.narrow(0, i, 1)?.into_reshape(&s[1..])?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub index: usize,
    pub bucket: String,
    pub hole_ratio: f64,
    pub psnr: f64,
    pub masked_psnr: f64,
    pub ssim: f64,
}

/// Full-image PSNR, hole-region PSNR and SSIM of one `[3,H,W]` prediction.
pub fn score<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>, window: usize) -> Result<(f64, f64, f64)> {
    Ok((psnr(pred, target)?, masked_psnr(pred, target, mask)?, ssim(pred, target, window)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketSummary {
    pub bucket: String,
    pub images: usize,
    pub psnr: f64,
    pub masked_psnr: f64,
    pub ssim: f64,
}

/// Level-wise KL between adjacent reconstructed maps for every extractor.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KlReport {
    pub extractors: Vec<ExtractorKl>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractorKl {
    pub extractor: String,
    pub raw: Vec<Option<f64>>,
    pub symmetric: Vec<Option<f64>>,
}

impl KlReport {
    pub fn of_levels<T: Scalar>(levels: &[Tensor<T>]) -> Self {
        KlReport {
            extractors: Extractor::ALL
                .iter()
                .map(|&ex| ExtractorKl {
                    extractor: ex.name().to_string(),
                    raw: level_kls(levels, ex),
                    symmetric: level_symmetric_kls(levels, ex),
                })
                .collect(),
        }
    }

    pub fn get(&self, ex: Extractor) -> Option<&ExtractorKl> {
        self.extractors.iter().find(|e| e.extractor == ex.name())
    }

    /// Weighted mean of several reports over the same levels.
    pub fn mean(parts: &[(KlReport, usize)]) -> Self {
        let Some((first, _)) = parts.first() else { return KlReport::default() };
        let avg = |pick: &dyn Fn(&KlReport) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
            (0..pick(first).len())
                .map(|i| {
                    let (mut s, mut n) = (0.0, 0usize);
                    for (r, w) in parts {
                        if let Some(Some(v)) = pick(r).get(i) {
                            s += v * *w as f64;
                            n += w;
                        }
                    }
                    (n > 0).then(|| s / n as f64)
                })
                .collect()
        };
        KlReport {
            extractors: (0..first.extractors.len())
                .map(|e| ExtractorKl {
                    extractor: first.extractors[e].extractor.clone(),
                    raw: avg(&|r: &KlReport| &r.extractors[e].raw),
                    symmetric: avg(&|r: &KlReport| &r.extractors[e].symmetric),
                })
                .collect(),
        }
    }
}

fn level_tensors<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<Vec<Tensor<T>>> {
    let was = model.gen_params.is_trainable();
    model.gen_params.set_trainable(false);
    let out = model.generate(batch);
    model.gen_params.set_trainable(was);
    Ok(out?.recon.levels.iter().map(|v| v.value().clone()).collect())
}

/// KL report over the reconstructed maps of `batch`.
pub fn batch_kl<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<KlReport> {
    Ok(KlReport::of_levels(&level_tensors(model, batch)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub tau: f64,
    pub seed: u64,
    pub images: Vec<ImageScore>,
    pub buckets: Vec<BucketSummary>,
    pub mean_psnr: f64,
    pub mean_masked_psnr: f64,
    pub mean_ssim: f64,
    pub kl: KlReport,
}

/// Deterministic mask for image `index` in `bucket`, independent of the other images.
pub fn eval_mask<T: Scalar>(cfg: &Config, index: usize, bucket: MaskBucket) -> Result<Mask<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM + (bucket.index() as u64) * (1 << 24) + index as u64);
    let s = cfg.data.image_size;
    generate_irregular_mask(s, s, bucket, cfg.data.border, rng.next_u64())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores the first `cfg.eval.images` held-out images in each bucket
/// (`cfg.eval.bucket`, or every configured training bucket). With `out`,
/// writes `report.json`, inpainted PNGs and real/fake pairs for external scorers.
pub fn evaluate<T: Scalar>(model: &Model<T>, cfg: &Config, val: &Dataset<T>, out: Option<&Path>) -> Result<EvalReport> {
    let n = cfg.eval.images.min(val.len());
    if n == 0 {
        return Err(invalid("nothing to evaluate"));
    }
    let buckets: Vec<MaskBucket> = match cfg.eval.bucket {
        Some(b) => vec![b],
        None => cfg.data.mask_buckets.clone(),
    };
    let mut images = Vec::new();
    let mut kls = Vec::new();
    for &bucket in &buckets {
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let masks = idx.iter().map(|&i| eval_mask(cfg, i, bucket)).collect::<Result<Vec<Mask<T>>>>()?;
            let samples: Vec<&Sample<T>> = idx.iter().map(|&i| val.get(i)).collect();
            let batch = Batch::collate(&samples, &masks)?;
            let gen = {
                let was = model.gen_params.is_trainable();
                model.gen_params.set_trainable(false);
                let g = model.generate(&batch);
                model.gen_params.set_trainable(was);
                g?
            };
            let levels: Vec<Tensor<T>> = gen.recon.levels.iter().map(|v| v.value().clone()).collect();
            kls.push((KlReport::of_levels(&levels), idx.len()));
            let pred = gen.output.value();
            for (j, &i) in idx.iter().enumerate() {
                let (p, g, m) = (slice(pred, j)?, slice(&batch.image, j)?, slice(&batch.mask, j)?);
                let (ps, mp, ss) = score(&p, &g, &m, cfg.eval.ssim_window)?;
                images.push(ImageScore {
                    index: i,
                    bucket: bucket.to_string(),
                    hole_ratio: masks[j].hole_ratio(),
                    psnr: ps,
                    masked_psnr: mp,
                    ssim: ss,
                });
                if let (Some(dir), true) = (out, cfg.eval.save_images) {
                    let stem = format!("b{}_{i:04}", bucket.index());
                    let masked = g.zip_map(&Tensor::concat(&[&m, &m, &m], 0)?, |a, k| a * k)?;
                    save_rgb(&masked, &dir.join("images").join(format!("{stem}_input.png")))?;
                    save_rgb(&p, &dir.join("images").join(format!("{stem}_output.png")))?;
                    save_rgb(&p, &dir.join("pairs/fake").join(format!("{stem}.png")))?;
                    save_rgb(&g, &dir.join("pairs/real").join(format!("{stem}.png")))?;
                }
            }
        }
    }
    let summaries = buckets
        .iter()
        .map(|b| {
            let rows: Vec<&ImageScore> = images.iter().filter(|r| r.bucket == b.to_string()).collect();
            BucketSummary {
                bucket: b.to_string(),
                images: rows.len(),
                psnr: mean(rows.iter().map(|r| r.psnr)),
                masked_psnr: mean(rows.iter().map(|r| r.masked_psnr)),
                ssim: mean(rows.iter().map(|r| r.ssim)),
            }
        })
        .collect();
    let report = EvalReport {
        variant: cfg.model.recon.variant.tag().to_string(),
        tau: cfg.model.texture.tau,
        seed: cfg.seed,
        mean_psnr: mean(images.iter().map(|r| r.psnr)),
        mean_masked_psnr: mean(images.iter().map(|r| r.masked_psnr)),
        mean_ssim: mean(images.iter().map(|r| r.ssim)),
        images,
        buckets: summaries,
        kl: KlReport::mean(&kls),
    };
    if let Some(dir) = out {
        write_json(&report, &dir.join("report.json"))?;
    }
    Ok(report)
}

/// One configuration of an ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub variant: ReconVariant,
    pub tau: Option<f64>,
}

impl Leg {
    pub fn name(&self) -> String {
        match self.tau {
            Some(t) => format!("{}_tau{t}", self.variant.tag()),
            None => self.variant.tag().to_string(),
        }
    }

    fn order(&self) -> (usize, f64) {
        let i = ReconVariant::ALL.iter().position(|v| *v == self.variant).unwrap_or(usize::MAX);
        (i, self.tau.unwrap_or(f64::NEG_INFINITY))
    }

    pub fn apply(&self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        c.model.recon.variant = self.variant;
        if let Some(t) = self.tau {
            c.model.texture.tau = t;
        }
        c
    }
}

/// Variant legs followed by τ legs on the configured variant.
pub fn legs(cfg: &Config, variants: &[ReconVariant], taus: &[f64]) -> Result<Vec<Leg>> {
    if variants.is_empty() && taus.is_empty() {
        return Err(invalid("ablation needs at least one variant or tau"));
    }
    let mut v: Vec<Leg> = variants.iter().map(|&variant| Leg { variant, tau: None }).collect();
    v.extend(taus.iter().map(|&t| Leg { variant: cfg.model.recon.variant, tau: Some(t) }));
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub tag: String,
    pub tau: f64,
    pub epochs: usize,
    pub first_g_total: f64,
    pub last_g_total: f64,
    pub psnr: f64,
    pub masked_psnr: f64,
    pub ssim: f64,
    /// Level-mean symmetric KL of the identity extractor.
    pub mean_kl: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "label,tag,tau,epochs,first_g_total,last_g_total,psnr,masked_psnr,ssim,mean_kl,status";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let status = r.error.as_deref().map(|e| format!("\"error: {}\"", e.replace('"', "'"))).unwrap_or("ok".into());
            let _ = writeln!(
                s,
                "\"{}\",{},{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.6},{}",
                r.label, r.tag, r.tau, r.epochs, r.first_g_total, r.last_g_total, r.psnr, r.masked_psnr, r.ssim, r.mean_kl, status
            );
        }
        s
    }

    pub fn render(&self) -> String {
        let lw = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<lw$}  {:>6}  {:>8}  {:>8}  {:>7}  {:>9}  status\n", "label", "tau", "PSNR", "hole", "SSIM", "KL");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<lw$}  {:>6}  {:>8.3}  {:>8.3}  {:>7.4}  {:>9.5}  {}",
                r.label,
                r.tau,
                r.psnr,
                r.masked_psnr,
                r.ssim,
                r.mean_kl,
                r.error.as_deref().unwrap_or("ok")
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), self.to_csv())?;
        fs::write(dir.join("ablation.txt"), self.render())?;
        write_json(self, &dir.join("ablation.json"))
    }
}

fn leg_row<T: Scalar>(
    leg: &Leg,
    cfg: &Config,
    train_data: &Dataset<T>,
    val: &Dataset<T>,
    out: Option<&Path>,
) -> Result<AblationRow> {
    let c = leg.apply(cfg);
    let dir = out.map(|o| o.join("legs").join(leg.name()));
    let run = dir.as_ref().map(RunDir::new).transpose()?;
    let vb = validation_batch(&c, val, c.train.log_val_images)?;
    let mut history: Vec<EpochStats> = Vec::new();
    let state = train(&c, train_data, Some(&vb), None, run.as_ref(), |s| history.push(*s))?;
    let report = evaluate(&state.model, &c, val, dir.as_deref())?;
    let kl = report.kl.get(Extractor::Identity).map(|e| mean(e.symmetric.iter().flatten().copied())).unwrap_or(f64::NAN);
    Ok(AblationRow {
        label: c.model.recon.variant.label().to_string(),
        tag: c.model.recon.variant.tag().to_string(),
        tau: c.model.texture.tau,
        epochs: state.epoch,
        first_g_total: history.first().map_or(f64::NAN, |s| s.g_total),
        last_g_total: history.last().map_or(f64::NAN, |s| s.g_total),
        psnr: report.mean_psnr,
        masked_psnr: report.mean_masked_psnr,
        ssim: report.mean_ssim,
        mean_kl: kl,
        error: None,
    })
}

/// Trains and evaluates every leg from the same seed and budget. A failing
/// leg is recorded in its row and the sweep continues. Rows follow the
/// ablation-table order, then ascending τ.
pub fn ablate<T: Scalar>(
    cfg: &Config,
    legs: &[Leg],
    train_data: &Dataset<T>,
    val: &Dataset<T>,
    out: Option<&Path>,
    mut progress: impl FnMut(&Leg, &AblationRow),
) -> Result<AblationTable> {
    let mut sorted = legs.to_vec();
    sorted.sort_by(|a, b| a.order().partial_cmp(&b.order()).unwrap_or(std::cmp::Ordering::Equal));
    let mut rows = Vec::new();
    for leg in &sorted {
        let row = leg_row(leg, cfg, train_data, val, out).unwrap_or_else(|e| {
            let c = leg.apply(cfg);
            AblationRow {
                label: c.model.recon.variant.label().to_string(),
                tag: c.model.recon.variant.tag().to_string(),
                tau: c.model.texture.tau,
                epochs: 0,
                first_g_total: f64::NAN,
                last_g_total: f64::NAN,
                psnr: f64::NAN,
                masked_psnr: f64::NAN,
                ssim: f64::NAN,
                mean_kl: f64::NAN,
                error: Some(e.to_string()),
            }
        });
        progress(leg, &row);
        rows.push(row);
    }
    let table = AblationTable { rows };
    if let Some(dir) = out {
        table.write(dir)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelArtifacts {
    pub level: usize,
    pub shape: Vec<usize>,
    pub entropy: PathBuf,
    pub spectrogram: Option<PathBuf>,
    pub highpass: Option<PathBuf>,
    pub residual: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseReport {
    pub variant: String,
    pub levels: Vec<LevelArtifacts>,
    pub kl: KlReport,
    pub reference: Option<(String, KlReport)>,
    pub features: PathBuf,
    pub kl_charts: Vec<PathBuf>,
}

fn abs_channel_mean<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<f64>> {
    let (c, h, w) = match f.shape() {
        [1, c, h, w] => (*c, *h, *w),
        s => return Err(invalid(format!("expected one sample, got {s:?}"))),
    };
    let hw = h * w;
    Ok(Tensor::from_fn(&[h, w], |i| {
        (0..c).map(|ch| f.data()[ch * hw + i[0] * w + i[1]].as_f64().abs()).sum::<f64>() / c as f64
    }))
}

/// Per-level entropy, spectrum, high-pass and residual pictures of the
/// reconstructed maps for one image, a feature dump and KL-by-level charts.
/// `reference` adds a second model (usually the baseline) to the charts.
pub fn diagnose<T: Scalar>(
    model: &Model<T>,
    sample: &Sample<T>,
    mask: &Mask<T>,
    out: &Path,
    reference: Option<(&str, &Model<T>)>,
) -> Result<DiagnoseReport> {
    fs::create_dir_all(out)?;
    let batch = Batch::collate(&[sample], std::slice::from_ref(mask))?;
    let was = model.gen_params.is_trainable();
    model.gen_params.set_trainable(false);
    let gen = model.generate(&batch);
    model.gen_params.set_trainable(was);
    let gen = gen?;

    let mut named = Vec::new();
    for (k, l) in gen.structure.iter().enumerate() {
        named.push((format!("structure.{}", k + 1), l.features.value().clone()));
    }
    for (k, l) in gen.recon.texture.iter().enumerate() {
        named.push((format!("texture.{}", k + 1), l.features.value().clone()));
    }
    for (k, v) in gen.recon.levels.iter().enumerate() {
        named.push((format!("recon.{}", k + 1), v.value().clone()));
    }
    for (k, v) in gen.balanced.iter().enumerate() {
        named.push((format!("balanced.{}", k + 1), v.value().clone()));
    }
    named.push(("output".into(), gen.output.value().clone()));
    let features = out.join("features.bin");
    let variant = model.config.recon.variant.tag().to_string();
    save_features(&named, serde_json::json!({ "variant": variant }), &features)?;
    save_rgb(gen.output.value(), &out.join("output.png"))?;

    let levels: Vec<Tensor<T>> = gen.recon.levels.iter().map(|v| v.value().clone()).collect();
    let mut arts = Vec::new();
    for (k, f) in levels.iter().enumerate() {
        let level = k + 1;
        let entropy = out.join(format!("entropy_level{level}.png"));
        save_heatmap(&channel_entropy(f)?, &entropy, HEATMAP_SIDE)?;
        let spec = out.join(format!("spectrogram_level{level}.png"));
        let spectrogram = match spectrogram(f) {
            Ok(s) => save_heatmap(&s, &spec, HEATMAP_SIDE).map(|_| spec)?.into(),
            Err(_) => None,
        };
        let hp = out.join(format!("highpass_level{level}.png"));
        let highpass = match highpass(f) {
            Ok(m) => save_heatmap(&abs_channel_mean(&m)?, &hp, HEATMAP_SIDE).map(|_| hp)?.into(),
            Err(_) => None,
        };
        let rp = out.join(format!("residual_level{level}.png"));
        let residual = match residual_structure(f) {
            Ok(m) => save_heatmap(&abs_channel_mean(&m)?, &rp, HEATMAP_SIDE).map(|_| rp)?.into(),
            Err(_) => None,
        };
        arts.push(LevelArtifacts { level, shape: f.shape().to_vec(), entropy, spectrogram, highpass, residual });
    }

    let kl = KlReport::of_levels(&levels);
    let reference = match reference {
        Some((name, m)) => Some((name.to_string(), batch_kl(m, &batch)?)),
        None => None,
    };
    let mut kl_charts = Vec::new();
    for ex in Extractor::ALL {
        let mut series = vec![(variant.clone(), kl.get(ex).map(|e| e.symmetric.clone()).unwrap_or_default())];
        if let Some((name, r)) = &reference {
            series.push((name.clone(), r.get(ex).map(|e| e.symmetric.clone()).unwrap_or_default()));
        }
        if series.iter().any(|s| s.1.iter().any(Option::is_some)) {
            let p = out.join(format!("kl_{}.png", ex.name()));
            save_bar_chart(&series, &p)?;
            kl_charts.push(p);
        }
    }
    let report = DiagnoseReport { variant, levels: arts, kl, reference, features, kl_charts };
    write_json(&report, &out.join("report.json"))?;
    Ok(report)
}
