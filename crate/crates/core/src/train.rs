//! Alternating discriminator/generator optimisation, epoch scheduling and resumable runs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tsgl_tensor::{Adam, Scalar, Tensor, Var};

use crate::checkpoint::{self, adam_configs};
use crate::config::Config;
use crate::data::{generate_irregular_mask, Batch, Dataset, Mask};
use crate::diagnostics::masked_psnr;
use crate::error::{invalid, Error, Result};
use crate::losses::{
    auxiliary_loss, discriminator_loss, generator_adv_loss, reconstruction_loss, total_loss, LossParts, LossWeights,
};
use crate::model::{GeneratorOutput, Model};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
const METRICS_HEADER: &str = "epoch,step,d_loss,g_total,rec,adv,aux,skipped,val_psnr";
const VAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Consecutive skipped steps.
    pub skipped: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = Model::new(cfg)?;
        let (ag, ad) = adam_configs(cfg);
        let opt_g = Adam::new(ag, &model.gen_params);
        let opt_d = Adam::new(ad, &model.disc_params);
        Ok(TrainState { model, opt_g, opt_d, epoch: 0, step: 0, skipped: 0 })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub d_loss: f64,
    pub g_total: f64,
    pub rec: f64,
    pub adv: f64,
    pub aux: f64,
    pub skipped: bool,
}

fn scalar<T: Scalar>(v: &Var<T>) -> f64 {
    v.value().item().as_f64()
}

/// Generator loss terms for a forward pass, scored by the frozen discriminator.
pub fn generator_parts<T: Scalar>(model: &Model<T>, out: &GeneratorOutput<T>, batch: &Batch<T>) -> Result<LossParts<T>> {
    let was = model.disc_params.is_trainable();
    model.disc_params.set_trainable(false);
    let d_gen = model.discriminator.forward(&model.disc_params, &out.output);
    model.disc_params.set_trainable(was);
    Ok(LossParts {
        rec: reconstruction_loss(&out.output, &batch.image)?,
        adv: generator_adv_loss(&d_gen?),
        aux: auxiliary_loss(&out.aux, &batch.edges)?,
    })
}

/// One discriminator update on the detached output, then one generator update
/// through the frozen discriminator.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, weights: LossWeights) -> Result<StepStats> {
    let m = &mut state.model;
    m.gen_params.set_trainable(true);
    let out = m.generate(batch)?;
    let fake = out.output.detach();

    m.disc_params.set_trainable(true);
    let d_real = m.discriminator.forward(&m.disc_params, &Var::constant(batch.image.clone()))?;
    let d_fake = m.discriminator.forward(&m.disc_params, &fake)?;
    let d_loss = discriminator_loss(&d_real, &d_fake)?;
    let d_val = scalar(&d_loss);
    let mut skipped = false;
    if d_val.is_finite() {
        let g = d_loss.backward()?;
        if g.all_finite() {
            state.opt_d.step(&mut m.disc_params, &g);
        } else {
            skipped = true;
        }
    } else {
        skipped = true;
    }

    let parts = generator_parts(m, &out, batch)?;
    let [rec, adv, aux] = parts.values();
    let g_total = match total_loss(&parts, weights) {
        Ok(total) => {
            let g = total.backward()?;
            if g.all_finite() {
                state.opt_g.step(&mut m.gen_params, &g);
            } else {
                skipped = true;
            }
            scalar(&total)
        }
        Err(Error::NonFinite(_)) => {
            skipped = true;
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    state.step += 1;
    state.skipped = if skipped { state.skipped + 1 } else { 0 };
    Ok(StepStats { d_loss: d_val, g_total, rec, adv, aux, skipped })
}

/// Fresh masks for `indices`, drawn from the configured buckets.
pub fn draw_masks<T: Scalar, R: Rng>(cfg: &Config, n: usize, rng: &mut R) -> Result<Vec<Mask<T>>> {
    let d = &cfg.data;
    (0..n)
        .map(|_| {
            let bucket = d.mask_buckets[rng.random_range(0..d.mask_buckets.len())];
            generate_irregular_mask(d.image_size, d.image_size, bucket, d.border, rng.next_u64())
        })
        .collect()
}

/// Per-epoch generator, independent of how many epochs ran before.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffled batches for one epoch, each paired with its masks.
pub fn epoch_batches<T: Scalar>(cfg: &Config, data: &Dataset<T>, epoch: usize) -> Result<Vec<Batch<T>>> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks(cfg.train.batch)
        .map(|idx| {
            let masks = draw_masks(cfg, idx.len(), &mut rng)?;
            let samples: Vec<_> = idx.iter().map(|&i| data.get(i)).collect();
            Batch::collate(&samples, &masks)
        })
        .collect()
}

/// Fixed validation batch: the first `n` images with seed-determined masks.
pub fn validation_batch<T: Scalar>(cfg: &Config, val: &Dataset<T>, n: usize) -> Result<Batch<T>> {
    let n = n.min(val.len());
    if n == 0 {
        return Err(invalid("validation set is empty"));
    }
    let mut rng = epoch_rng(cfg.seed, 0);
    rng.set_stream(VAL_STREAM);
    let masks = draw_masks(cfg, n, &mut rng)?;
    let samples: Vec<_> = (0..n).map(|i| val.get(i)).collect();
    Batch::collate(&samples, &masks)
}

/// Per-image hole-region PSNR of the inpainted batch.
pub fn batch_masked_psnr<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<Vec<f64>> {
    let out = model.inpaint(batch)?;
    (0..batch.len())
        .map(|i| {
            let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
                let s = t.shape();
                Ok(t.narrow(0, i, 1)?.into_reshape(&s[1..])?)
            };
            masked_psnr(&pick(&out)?, &pick(&batch.image)?, &pick(&batch.mask)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    pub d_loss: f64,
    pub g_total: f64,
    pub rec: f64,
    pub adv: f64,
    pub aux: f64,
    pub skipped: usize,
    pub val_psnr: Option<f64>,
}

impl EpochStats {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.step,
            self.d_loss,
            self.g_total,
            self.rec,
            self.adv,
            self.aux,
            self.skipped,
            self.val_psnr.map(|v| format!("{v:.4}")).unwrap_or_default()
        )
    }
}

/// Runs epoch `state.epoch + 1`; the averages cover non-skipped steps.
pub fn train_epoch<T: Scalar>(state: &mut TrainState<T>, cfg: &Config, data: &Dataset<T>) -> Result<EpochStats> {
    let epoch = state.epoch + 1;
    let weights = LossWeights::from(&cfg.train);
    let mut acc = [0.0; 5];
    let (mut n, mut skipped) = (0usize, 0usize);
    for batch in epoch_batches(cfg, data, epoch)? {
        let s = train_step(state, &batch, weights)?;
        if s.skipped {
            skipped += 1;
            if state.skipped >= cfg.train.max_skipped_steps {
                return Err(Error::NonFinite(format!(
                    "aborting after {} consecutive non-finite steps (epoch {epoch}, step {})",
                    state.skipped, state.step
                )));
            }
            continue;
        }
        for (a, v) in acc.iter_mut().zip([s.d_loss, s.g_total, s.rec, s.adv, s.aux]) {
            *a += v;
        }
        n += 1;
    }
    state.epoch = epoch;
    let k = n.max(1) as f64;
    Ok(EpochStats {
        epoch,
        step: state.step,
        d_loss: acc[0] / k,
        g_total: acc[1] / k,
        rec: acc[2] / k,
        adv: acc[3] / k,
        aux: acc[4] / k,
        skipped,
        val_psnr: None,
    })
}

/// Where a run keeps its metrics and checkpoints.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn latest(&self) -> PathBuf {
        self.root.join(LATEST_CHECKPOINT)
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
    }

    /// Drops log rows newer than `epoch` so a resumed run rewrites them identically.
    pub fn truncate_metrics(&self, epoch: usize) -> Result<()> {
        let path = self.metrics();
        let mut lines = vec![METRICS_HEADER.to_string()];
        if path.exists() {
            for line in fs::read_to_string(&path)?.lines().skip(1) {
                let e: usize = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
                if e <= epoch {
                    lines.push(line.to_string());
                }
            }
        }
        fs::write(&path, lines.join("\n") + "\n")?;
        Ok(())
    }

    pub fn append_metrics(&self, s: &EpochStats) -> Result<()> {
        let mut f = OpenOptions::new().append(true).create(true).open(self.metrics())?;
        writeln!(f, "{}", s.csv_row())?;
        Ok(())
    }
}

/// Trains from `state` (or a fresh initialisation) up to `cfg.train.epochs`.
/// With a run directory, logs every epoch and checkpoints every
/// `checkpoint_every` epochs and at the end.
pub fn train<T: Scalar>(
    cfg: &Config,
    data: &Dataset<T>,
    val: Option<&Batch<T>>,
    state: Option<TrainState<T>>,
    run: Option<&RunDir>,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainState<T>> {
    cfg.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    if let Some(r) = run {
        r.truncate_metrics(state.epoch)?;
    }
    while state.epoch < cfg.train.epochs {
        let mut stats = train_epoch(&mut state, cfg, data)?;
        if let Some(v) = val {
            let p = batch_masked_psnr(&state.model, v)?;
            stats.val_psnr = Some(p.iter().sum::<f64>() / p.len() as f64);
        }
        if let Some(r) = run {
            r.append_metrics(&stats)?;
            let every = cfg.train.checkpoint_every.max(1);
            if state.epoch % every == 0 || state.epoch == cfg.train.epochs {
                checkpoint::save(&state, cfg, &r.epoch_checkpoint(state.epoch))?;
                checkpoint::save(&state, cfg, &r.latest())?;
            }
        }
        progress(&stats);
    }
    Ok(state)
}

/// Resumes from the run's latest checkpoint when one exists.
pub fn resume_or_start<T: Scalar>(cfg: &Config, run: &RunDir, force: bool) -> Result<Option<TrainState<T>>> {
    let p = run.latest();
    if p.exists() {
        Ok(Some(checkpoint::load(&p, cfg, force)?))
    } else {
        Ok(None)
    }
}

/// Exclusive marker that one process is writing to `dir`.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(invalid(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
