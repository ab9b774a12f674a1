//! Training-state checkpoints: parameters, Adam moments, counters and the config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tsgl_tensor::{Adam, AdamConfig, ParamStore, Scalar};

use crate::config::Config;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::TrainState;

pub const KIND: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config_hash: String,
    pub variant: String,
    pub epoch: usize,
    pub step: u64,
    pub skipped: usize,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
}

fn push_store<T: Scalar>(c: &mut Container<T>, prefix: &str, ps: &ParamStore<T>, opt: &Adam<T>) {
    for (i, e) in ps.entries().iter().enumerate() {
        c.push(format!("{prefix}/param/{}", e.name), e.value.clone());
        c.push(format!("{prefix}/m/{}", e.name), opt.m[i].clone());
        c.push(format!("{prefix}/v/{}", e.name), opt.v[i].clone());
    }
}

fn restore_store<T: Scalar>(c: &mut Container<T>, prefix: &str, ps: &mut ParamStore<T>, opt: &mut Adam<T>) -> Result<()> {
    for id in ps.ids().collect::<Vec<_>>() {
        let name = ps.name(id).to_string();
        let mut load = |kind: &str, shape: &[usize]| -> Result<_> {
            let t = c.take(&format!("{prefix}/{kind}/{name}"))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("{prefix}/{kind}/{name} has shape {:?}, model wants {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let shape = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = load("param", &shape)?;
        opt.m[id.index()] = load("m", &shape)?;
        opt.v[id.index()] = load("v", &shape)?;
    }
    Ok(())
}

pub fn to_container<T: Scalar>(state: &TrainState<T>, cfg: &Config) -> Result<Container<T>> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        config_hash: cfg.model_hash(),
        variant: cfg.model.recon.variant.tag().to_string(),
        epoch: state.epoch,
        step: state.step,
        skipped: state.skipped,
        adam_g_step: state.opt_g.step,
        adam_d_step: state.opt_d.step,
    };
    let mut c = Container::new(KIND, serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?);
    push_store(&mut c, "g", &state.model.gen_params, &state.opt_g);
    push_store(&mut c, "d", &state.model.disc_params, &state.opt_d);
    Ok(c)
}

pub fn save<T: Scalar>(state: &TrainState<T>, cfg: &Config, path: &Path) -> Result<()> {
    to_container(state, cfg)?.save(path)
}

pub fn read_meta(c: &Container<impl Scalar>) -> Result<CheckpointMeta> {
    serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))
}

/// Rebuilds the training state; version or config mismatches are errors unless `force`.
pub fn from_container<T: Scalar>(mut c: Container<T>, cfg: &Config, force: bool) -> Result<TrainState<T>> {
    let meta = read_meta(&c)?;
    if meta.version != CHECKPOINT_VERSION && !force {
        return Err(Error::Checkpoint(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", meta.version)));
    }
    let hash = cfg.model_hash();
    if meta.config_hash != hash && !force {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written for model config {} (variant {}), current config is {hash}",
            &meta.config_hash[..12.min(meta.config_hash.len())],
            meta.variant
        )));
    }
    let mut state = TrainState::new(cfg)?;
    let Model { gen_params, disc_params, .. } = &mut state.model;
    restore_store(&mut c, "g", gen_params, &mut state.opt_g)?;
    restore_store(&mut c, "d", disc_params, &mut state.opt_d)?;
    state.epoch = meta.epoch;
    state.step = meta.step;
    state.skipped = meta.skipped;
    state.opt_g.step = meta.adam_g_step;
    state.opt_d.step = meta.adam_d_step;
    Ok(state)
}

pub fn load<T: Scalar>(path: &Path, cfg: &Config, force: bool) -> Result<TrainState<T>> {
    from_container(Container::load(path, KIND)?, cfg, force)
}

/// Adam settings for the generator and discriminator.
pub fn adam_configs(cfg: &Config) -> (AdamConfig, AdamConfig) {
    let t = &cfg.train;
    let base = AdamConfig { beta1: t.beta1, beta2: t.beta2, ..AdamConfig::default() };
    (AdamConfig { lr: t.lr_g, ..base }, AdamConfig { lr: t.lr_d, ..base })
}
