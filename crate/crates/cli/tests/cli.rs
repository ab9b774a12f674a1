use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn tsgl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsgl")).current_dir(dir).args(args).output().unwrap()
}

fn smoke(dir: &Path, epochs: usize) {
    let cfg = format!(
        "preset = \"desk\"\nout_dir = \"run\"\n[data]\ntrain_count = 32\nval_count = 4\n[train]\nepochs = {epochs}\ncheckpoint_every = 1\nlog_val_images = 2\n[eval]\nimages = 2\n"
    );
    std::fs::write(dir.join("smoke.toml"), cfg).unwrap();
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn bad_variant_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = tsgl(d.path(), &["--variant", "Nope", "params"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("baseline") && err.contains("TwoGL_GL"), "{err}");
}

#[test]
fn empty_ablation_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&tsgl(d.path(), &["--out", "x", "ablate"])), 2);
    assert!(!d.path().join("x").join(".lock").exists());
}

#[test]
fn several_variants_outside_ablate_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&tsgl(d.path(), &["--variant", "baseline,TwoGL_GL", "params"])), 2);
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&tsgl(d.path(), &["--out", "empty", "eval"])), 2);
}

#[test]
fn smoke_train_resume_eval_diagnose() {
    let d = tempfile::tempdir().unwrap();
    smoke(d.path(), 1);
    let t0 = Instant::now();
    let o = tsgl(d.path(), &["--config", "smoke.toml", "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = d.path().join("run");
    assert!(run.join("latest.ckpt").exists() && run.join("checkpoints/epoch_0001.ckpt").exists());

    let o = tsgl(d.path(), &["--config", "smoke.toml", "train", "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("resuming at epoch 1"));
    assert!(t0.elapsed() < Duration::from_secs(600), "smoke training took {:?}", t0.elapsed());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let epochs: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);

    let o = tsgl(d.path(), &["--config", "smoke.toml", "eval", "--bucket", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 2);
    assert!(report["mean_masked_psnr"].as_f64().unwrap().is_finite());

    let o = tsgl(d.path(), &["--config", "smoke.toml", "diagnose", "--index", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let diag = run.join("diagnose");
    let entropy = std::fs::read_dir(&diag)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.starts_with("entropy") && n.ends_with(".png")
        })
        .count();
    assert_eq!(entropy, 6);
    assert!(diag.join("report.json").exists());
}

#[test]
fn second_trainer_is_locked_out() {
    let d = tempfile::tempdir().unwrap();
    smoke(d.path(), 1);
    std::fs::create_dir_all(d.path().join("run")).unwrap();
    std::fs::write(d.path().join("run/.lock"), "").unwrap();
    let o = tsgl(d.path(), &["--config", "smoke.toml", "train"]);
    assert_ne!(code(&o), 0);
}
