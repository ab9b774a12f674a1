//! Run configuration, presets, validation and hashing.
//!
//! A TOML file may name a `preset` ("desk", "full" or "tiny"); its remaining
//! keys are merged over that preset. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BorderMode, CannyParams, MaskBucket, PrepParams, PriorKind, SmoothParams};
use crate::error::{Error, Result};
use crate::variant::ReconVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// First synthetic seed of the validation split; training uses `0..train_count`.
    pub val_first_seed: u64,
    /// Extra training images listed one path per line.
    pub manifest: Option<PathBuf>,
    pub mask_buckets: Vec<MaskBucket>,
    pub border: BorderMode,
    pub prior: PriorKind,
    pub canny: CannyParams,
    pub smooth: SmoothParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 64,
            train_count: 500,
            val_count: 50,
            val_first_seed: 1_000_000,
            manifest: None,
            mask_buckets: MaskBucket::ALL.to_vec(),
            border: BorderMode::Near,
            prior: PriorKind::EdgeGray,
            canny: CannyParams::default(),
            smooth: SmoothParams::default(),
        }
    }
}

impl DataConfig {
    pub fn prep(&self) -> PrepParams {
        PrepParams { prior: self.prior, canny: self.canny, smooth: self.smooth }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    pub dim: usize,
    pub heads: usize,
    /// Transformer blocks per stage after the head, one entry per level 2..=N.
    pub blocks: Vec<usize>,
    pub window: usize,
    pub tau: f64,
    pub shift: bool,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub variant: ReconVariant,
    pub eps: f64,
    pub hidden: usize,
    /// Levels (1-based) where two-pass branches run their second pass.
    pub twice_levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    /// Levels `1..=early` form the early stream; the rest up to N the late one.
    pub early: usize,
    /// Kernel sizes of the early, late and final streams.
    pub kernels: [usize; 3],
    pub convs_per_stream: usize,
    pub spatial_radius: usize,
    pub range_radius: usize,
    pub bandwidth: f64,
    pub equalize: bool,
    /// Level whose resolution all streams are resized to.
    pub resolution_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub composite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub structure: StructureConfig,
    pub texture: TextureConfig,
    pub recon: ReconConfig,
    pub balance: BalanceConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_aux: f64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub max_skipped_steps: usize,
    /// Size of the fixed validation batch logged to the metrics CSV.
    pub log_val_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub images: usize,
    pub bucket: Option<MaskBucket>,
    pub ssim_window: usize,
    pub save_images: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig { channels: vec![16, 32, 32, 64, 64], kernel: 3 }
    }
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig { dim: 16, heads: 2, blocks: vec![1, 1, 1, 1], window: 8, tau: 100.0, shift: true, mlp_ratio: 2 }
    }
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig { variant: ReconVariant::default(), eps: 1e-5, hidden: 16, twice_levels: vec![3, 4, 5] }
    }
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            early: 3,
            kernels: [7, 5, 3],
            convs_per_stream: 5,
            spatial_radius: 2,
            range_radius: 2,
            bandwidth: 1.0,
            equalize: true,
            resolution_level: 3,
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { composite: true }
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { channels: vec![16, 32, 64] }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 5,
            structure: StructureConfig::default(),
            texture: TextureConfig::default(),
            recon: ReconConfig::default(),
            balance: BalanceConfig::default(),
            decoder: DecoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 4,
            lr_g: 5e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            lambda_rec: 1.0,
            lambda_adv: 0.1,
            lambda_aux: 1.0,
            checkpoint_every: 5,
            max_skipped_steps: 3,
            log_val_images: 8,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { images: 50, bucket: None, ssim_window: 11, save_images: true }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["desk", "full", "tiny"];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    /// Laptop-scale defaults: 64×64 images and a narrow network.
    pub fn desk() -> Self {
        Config::default()
    }

    /// Full-width architecture and optimisation budget at 256×256.
    pub fn full() -> Self {
        let mut c = Config::default();
        c.out_dir = PathBuf::from("runs/full");
        c.data.image_size = 256;
        c.model.structure.channels = vec![64, 128, 256, 512, 1024];
        c.model.texture = TextureConfig { dim: 180, heads: 6, blocks: vec![2, 2, 6, 2], ..TextureConfig::default() };
        c.model.recon.hidden = 128;
        c.model.discriminator.channels = vec![64, 128, 256];
        c.train.epochs = 150;
        c.train.batch = 8;
        c
    }

    /// Three-level model small enough for finite-difference gradient checks at 16×16.
    pub fn tiny() -> Self {
        let mut c = Config::default();
        c.out_dir = PathBuf::from("runs/tiny");
        c.data.image_size = 16;
        c.data.train_count = 8;
        c.data.val_count = 2;
        c.data.mask_buckets = vec![MaskBucket::ALL[1], MaskBucket::ALL[2]];
        c.model.levels = 3;
        c.model.structure.channels = vec![3, 3, 3];
        c.model.texture = TextureConfig { dim: 3, heads: 3, blocks: vec![1, 1], window: 2, mlp_ratio: 1, ..TextureConfig::default() };
        c.model.recon.hidden = 2;
        c.model.recon.twice_levels = vec![2, 3];
        c.model.balance.early = 2;
        c.model.balance.kernels = [3, 3, 3];
        c.model.balance.convs_per_stream = 1;
        c.model.balance.spatial_radius = 1;
        c.model.balance.range_radius = 1;
        c.model.balance.resolution_level = 2;
        c.model.discriminator.channels = vec![4, 4, 4];
        c.train.epochs = 2;
        c.train.batch = 2;
        c.train.log_val_images = 2;
        c.eval.images = 2;
        c.eval.ssim_window = 7;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(cfg_err(format!("unknown preset {name:?}; valid: {}", PRESETS.join(", ")))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut over: toml::Value = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        let preset = match over.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(cfg_err(format!("preset must be a string, got {v}"))),
            None => "desk".to_string(),
        };
        let mut base = toml::Value::try_from(Self::preset(&preset)?).map_err(|e| cfg_err(e.to_string()))?;
        merge(&mut base, over);
        let cfg: Config = base.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let n = m.levels;
        if n < 2 {
            return Err(cfg_err("model.levels must be at least 2"));
        }
        if d.image_size == 0 || d.image_size % (1 << n) != 0 {
            return Err(cfg_err(format!("data.image_size {} must be a positive multiple of 2^{n}", d.image_size)));
        }
        if d.train_count == 0 && d.manifest.is_none() {
            return Err(cfg_err("training set is empty"));
        }
        if d.mask_buckets.is_empty() {
            return Err(cfg_err("data.mask_buckets is empty"));
        }
        d.canny.validate()?;
        if !(d.smooth.strength > 0.0) || d.smooth.iterations == 0 {
            return Err(cfg_err("data.smooth needs strength > 0 and iterations >= 1"));
        }
        if m.structure.channels.len() != n || m.structure.channels.contains(&0) {
            return Err(cfg_err(format!("model.structure.channels needs {n} positive entries")));
        }
        if m.structure.kernel % 2 == 0 {
            return Err(cfg_err("model.structure.kernel must be odd"));
        }
        let tx = &m.texture;
        if tx.dim == 0 || tx.heads == 0 || tx.dim % tx.heads != 0 {
            return Err(cfg_err(format!("model.texture.dim {} must be a positive multiple of heads {}", tx.dim, tx.heads)));
        }
        if tx.blocks.len() != n - 1 {
            return Err(cfg_err(format!("model.texture.blocks needs {} entries", n - 1)));
        }
        if tx.window == 0 || !(tx.tau >= 0.0) || tx.mlp_ratio == 0 {
            return Err(cfg_err("model.texture needs window >= 1, tau >= 0, mlp_ratio >= 1"));
        }
        for side in (1..=n).map(|k| d.image_size >> k) {
            let w = tx.window.min(side);
            if side % w != 0 {
                return Err(cfg_err(format!("window {} does not tile a {side}-token grid", tx.window)));
            }
        }
        let r = &m.recon;
        if !(r.eps > 0.0) || r.hidden == 0 {
            return Err(cfg_err("model.recon needs eps > 0 and hidden >= 1"));
        }
        if r.twice_levels.iter().any(|&l| l == 0 || l > n) {
            return Err(cfg_err(format!("model.recon.twice_levels must lie in 1..={n}")));
        }
        let b = &m.balance;
        if b.early == 0 || b.early >= n {
            return Err(cfg_err(format!("model.balance.early must lie in 1..{n}")));
        }
        if b.kernels.iter().any(|k| k % 2 == 0) || b.convs_per_stream == 0 {
            return Err(cfg_err("model.balance needs odd kernels and convs_per_stream >= 1"));
        }
        if b.spatial_radius == 0 || b.range_radius == 0 || !(b.bandwidth > 0.0) {
            return Err(cfg_err("model.balance needs radii >= 1 and bandwidth > 0"));
        }
        if b.resolution_level == 0 || b.resolution_level > n {
            return Err(cfg_err(format!("model.balance.resolution_level must lie in 1..={n}")));
        }
        let side = d.image_size >> b.resolution_level;
        if b.spatial_radius.max(b.range_radius) >= side {
            return Err(cfg_err(format!("balance radius exceeds the {side}x{side} balance map")));
        }
        if m.discriminator.channels.is_empty() || m.discriminator.channels.contains(&0) {
            return Err(cfg_err("model.discriminator.channels needs positive entries"));
        }
        if t.batch == 0 || !(t.lr_g >= 0.0) || !(t.lr_d >= 0.0) {
            return Err(cfg_err("train needs batch >= 1 and non-negative learning rates"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(cfg_err("train betas must lie in [0,1)"));
        }
        if [t.lambda_rec, t.lambda_adv, t.lambda_aux].iter().any(|l| !(*l >= 0.0)) {
            return Err(cfg_err("loss weights must be non-negative"));
        }
        if self.eval.ssim_window % 2 == 0 || self.eval.ssim_window > d.image_size {
            return Err(cfg_err("eval.ssim_window must be odd and fit the image"));
        }
        Ok(())
    }

    /// SHA-256 of everything that fixes the parameter layout; checkpoints carry it.
    pub fn model_hash(&self) -> String {
        let desc = serde_json::json!({ "model": self.model, "prior": self.data.prior, "size": self.data.image_size });
        Sha256::digest(desc.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            Config::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip_and_preset_merge() {
        let c = Config::from_toml_str("preset = \"tiny\"\nseed = 9\n[model.recon]\nvariant = \"Global->Local\"\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.levels, 3);
        assert_eq!(c.model.recon.variant, ReconVariant::GlobalToLocal);
        let back = Config::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back.model, c.model);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(Config::from_toml_str("sede = 1").is_err());
        assert!(Config::from_toml_str("[model.texture]\nheadz = 3").is_err());
        assert!(Config::from_toml_str("[model.recon]\nvariant = \"nope\"").is_err());
        assert!(Config::from_toml_str("[data]\nimage_size = 48").is_err());
    }

    #[test]
    fn hash_tracks_model_only() {
        let a = Config::desk();
        let mut b = a.clone();
        b.seed = 5;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.texture.tau = 50.0;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
