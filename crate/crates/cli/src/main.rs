use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use tsgl_core::checkpoint;
use tsgl_core::data::{load_resized, Mask, MaskBucket, Sample};
use tsgl_core::experiment::{ablate, diagnose, eval_mask, evaluate, legs, splits};
use tsgl_core::model::Model;
use tsgl_core::train::{resume_or_start, train, validation_batch, RunDir, RunLock};
use tsgl_core::{Config, Error, ReconVariant};

type S = f32;

#[derive(Parser, Debug)]
#[command(name = "tsgl", version, about = "Structure-guided texture reconstruction inpainting")]
struct Cli {
    /// TOML config; keys override the preset named by its `preset` key (default desk).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given: desk, full or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reconstruction variant; `ablate` takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<String>,
    /// Attention penalty; `ablate` takes a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    tau: Vec<f64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Load checkpoints whose config hash or version differs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train, resuming from the output directory's latest checkpoint if present.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        /// Mask bucket: index 0-5 or an interval like (0.1,0.2].
        #[arg(long)]
        bucket: Option<String>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Train and score each variant or tau with the same seed and budget.
    Ablate {
        /// Every variant in table order.
        #[arg(long)]
        all: bool,
    },
    /// Feature-map diagnostics for one image.
    Diagnose {
        /// Image file; defaults to held-out image `index`.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Mask PNG (white = known); defaults to a generated mask.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "1")]
        bucket: String,
        /// Second checkpoint drawn alongside in the KL charts.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Print the resolved config and parameter count.
    Params,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Run(e),
        }
    }
}

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

fn parse_variants(names: &[String]) -> Result<Vec<ReconVariant>, Failure> {
    names.iter().map(|n| n.parse::<ReconVariant>().map_err(Failure::from)).collect()
}

fn resolve(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) => Config::preset(p)?,
        (None, None) => Config::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if !matches!(cli.cmd, Cmd::Ablate { .. }) {
        match parse_variants(&cli.variant)?[..] {
            [] => {}
            [v] => cfg.model.recon.variant = v,
            _ => return Err(usage("only `ablate` takes several variants")),
        }
        match cli.tau[..] {
            [] => {}
            [t] => cfg.model.texture.tau = t,
            _ => return Err(usage("only `ablate` takes several tau values")),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cli: &Cli, cfg: &Config, path: Option<&Path>) -> Result<Model<S>, Failure> {
    let p = match path {
        Some(p) => p.to_path_buf(),
        None => RunDir::new(&cfg.out_dir)?.latest(),
    };
    if !p.exists() {
        return Err(usage(format!("checkpoint {} not found", p.display())));
    }
    Ok(checkpoint::load::<S>(&p, cfg, cli.force)?.model)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = resolve(cli)?;
    match &cli.cmd {
        Cmd::Params => {
            let m = Model::<S>::new(&cfg)?;
            print!("{}", cfg.to_toml_string()?);
            println!("# generator {} parameters, discriminator {}", m.gen_params.num_scalars(), m.disc_params.num_scalars());
            println!("# model hash {}", cfg.model_hash());
        }
        Cmd::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let _lock = RunLock::acquire(&cfg.out_dir)?;
            let run = RunDir::new(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml_string()?).map_err(Error::from)?;
            let state = match &cli.checkpoint {
                Some(p) => Some(checkpoint::load::<S>(p, &cfg, cli.force)?),
                None => resume_or_start::<S>(&cfg, &run, cli.force)?,
            };
            if let Some(s) = &state {
                eprintln!("resuming at epoch {} (step {})", s.epoch, s.step);
            }
            let t0 = Instant::now();
            let (train_data, val) = splits::<S>(&cfg)?;
            eprintln!("prepared {} training and {} held-out images in {:.1}s", train_data.len(), val.len(), t0.elapsed().as_secs_f64());
            let vb = validation_batch(&cfg, &val, cfg.train.log_val_images)?;
            train(&cfg, &train_data, Some(&vb), state, Some(&run), |s| {
                eprintln!(
                    "epoch {:>3}  step {:>6}  D {:.4}  G {:.4}  rec {:.4}  adv {:.4}  aux {:.4}  skipped {}  val {:.2} dB  [{:.0}s]",
                    s.epoch,
                    s.step,
                    s.d_loss,
                    s.g_total,
                    s.rec,
                    s.adv,
                    s.aux,
                    s.skipped,
                    s.val_psnr.unwrap_or(f64::NAN),
                    t0.elapsed().as_secs_f64()
                )
            })?;
            println!("{}", run.latest().display());
        }
        Cmd::Eval { bucket, images } => {
            if let Some(b) = bucket {
                cfg.eval.bucket = Some(b.parse::<MaskBucket>()?);
            }
            if let Some(n) = images {
                cfg.eval.images = *n;
            }
            let model = load_model(cli, &cfg, cli.checkpoint.as_deref())?;
            let (_, val) = splits::<S>(&cfg)?;
            let out = cfg.out_dir.join("eval");
            let r = evaluate(&model, &cfg, &val, Some(&out))?;
            for b in &r.buckets {
                println!("{:<12} n={:<4} PSNR {:.3}  hole PSNR {:.3}  SSIM {:.4}", b.bucket, b.images, b.psnr, b.masked_psnr, b.ssim);
            }
            println!("mean         PSNR {:.3}  hole PSNR {:.3}  SSIM {:.4}", r.mean_psnr, r.mean_masked_psnr, r.mean_ssim);
            println!("{}", out.join("report.json").display());
        }
        Cmd::Ablate { all } => {
            let variants = if *all { ReconVariant::ALL.to_vec() } else { parse_variants(&cli.variant)? };
            let legs = legs(&cfg, &variants, &cli.tau).map_err(|e| usage(e.to_string()))?;
            let _lock = RunLock::acquire(&cfg.out_dir)?;
            let (train_data, val) = splits::<S>(&cfg)?;
            let t0 = Instant::now();
            let table = ablate(&cfg, &legs, &train_data, &val, Some(&cfg.out_dir), |leg, row| {
                eprintln!("{:<16} {}  [{:.0}s]", leg.name(), row.error.as_deref().unwrap_or("ok"), t0.elapsed().as_secs_f64())
            })?;
            print!("{}", table.render());
        }
        Cmd::Diagnose { image, index, mask, bucket, baseline } => {
            let model = load_model(cli, &cfg, cli.checkpoint.as_deref())?;
            let reference = match baseline {
                Some(p) => {
                    let mut bc = cfg.clone();
                    bc.model.recon.variant = checkpoint_variant(p)?;
                    Some(checkpoint::load::<S>(p, &bc, cli.force)?.model)
                }
                None => None,
            };
            let prep = cfg.data.prep();
            let sample = match image {
                Some(p) => Sample::prepare(load_resized(p, cfg.data.image_size)?, &prep)?,
                None => {
                    let (_, val) = splits::<S>(&cfg)?;
                    if *index >= val.len() {
                        return Err(usage(format!("index {index} beyond the {} held-out images", val.len())));
                    }
                    val.get(*index).clone()
                }
            };
            let m: Mask<S> = match mask {
                Some(p) => Mask::load_png(p)?,
                None => eval_mask(&cfg, *index, bucket.parse()?)?,
            };
            let out = cfg.out_dir.join("diagnose");
            let r = diagnose(&model, &sample, &m, &out, reference.as_ref().map(|m| (m.config.recon.variant.tag(), m)))?;
            for l in &r.levels {
                println!("level {} {:?}  {}", l.level, l.shape, l.entropy.display());
            }
            println!("{}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn checkpoint_variant(p: &Path) -> Result<ReconVariant, Failure> {
    let c = tsgl_core::container::Container::<S>::load(p, checkpoint::KIND)?;
    Ok(checkpoint::read_meta(&c)?.variant.parse()?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
