use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgl_core::checkpoint;
use tsgl_core::config::Config;
use tsgl_core::data::{generate_irregular_mask, synth_image, Batch, BorderMode, Mask, MaskBucket, Sample};
use tsgl_core::diagnostics::{channel_entropy, highpass, kl_divergence, ssim};
use tsgl_core::losses::{auxiliary_loss, reconstruction_loss, total_loss, LossParts, LossWeights};
use tsgl_core::model::Model;
use tsgl_core::pconv::partial_conv;
use tsgl_core::train::TrainState;
use tsgl_tensor::{Tensor, Var};

/// Values from scikit-image's `structural_similarity` (Gaussian σ=1.5,
/// population covariance, data range 1) on the pairs built by `ssim_pair`.
const SKIMAGE_SSIM: [f64; 20] = [
    1.0000000000, 0.9382115148, 0.7110829116, 0.3651486507, -0.0068707523, 1.0000000000, 0.9371183182, 0.7168083776,
    0.3516592538, 0.0020201797, 1.0000000000, 0.9377201573, 0.7071175783, 0.3602698067, -0.0140245645, 1.0000000000,
    0.9368256031, 0.7181909721, 0.3501277512, 0.0124634862,
];

fn hashed(seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[1, 24, 24], |i| ((i[1] as u64 * 7919 + i[2] as u64 * 104729 + seed * 15485863) % 1000) as f64 / 999.0)
}

fn ssim_pair(s: u64) -> (Tensor<f64>, Tensor<f64>) {
    let (a, n) = (hashed(s), hashed(s + 100));
    let t = (s % 5) as f64 / 5.0;
    let b = a.zip_map(&n, |x, y| ((1.0 - t) * x + t * y).clamp(0.0, 1.0)).unwrap();
    (a, b)
}

#[test]
fn ssim_matches_reference_implementation() {
    for (s, want) in SKIMAGE_SSIM.iter().enumerate() {
        let (a, b) = ssim_pair(s as u64);
        let got = ssim(&a, &b, 11).unwrap();
        assert!((got - want).abs() <= 1e-3, "pair {s}: {got} vs {want}");
    }
}

#[test]
fn entropy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = Tensor::from_fn(&[1, 6, 5, 7], |_| rng.random_range(-4.0..4.0));
    let e = channel_entropy(&f).unwrap();
    for y in 0..5 {
        for x in 0..7 {
            let logits: Vec<f64> = (0..6).map(|c| f.get(&[0, c, y, x])).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let h: f64 = logits.iter().map(|l| l.exp() / z).map(|p| -p * p.ln()).sum();
            assert!((e.get(&[y, x]) - h).abs() <= 1e-7);
        }
    }
}

#[test]
fn l1_losses_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = Tensor::from_fn(&[2, 3, 5, 4], |_| rng.random::<f64>());
    let b = Tensor::from_fn(&[2, 3, 5, 4], |_| rng.random::<f64>());
    let mut s = 0.0;
    for i in 0..a.numel() {
        s += (a.data()[i] - b.data()[i]).abs();
    }
    let rec = reconstruction_loss(&Var::constant(a.clone()), &b).unwrap().value().item();
    assert!((rec - s / a.numel() as f64).abs() <= 1e-7);
    let (p, t) = (a.narrow(1, 0, 1).unwrap(), b.narrow(1, 2, 1).unwrap());
    let mut s = 0.0;
    for n in 0..2 {
        for y in 0..5 {
            for x in 0..4 {
                s += (p.get(&[n, 0, y, x]) - t.get(&[n, 0, y, x])).abs();
            }
        }
    }
    assert!((auxiliary_loss(&Var::constant(p), &t).unwrap().value().item() - s / 40.0).abs() <= 1e-7);
}

#[test]
fn gibbs_inequality_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let n = rng.random_range(2..10);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);
        assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
    }
}

#[test]
fn total_loss_is_linear_in_each_part() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = |v: f64| Var::constant(Tensor::scalar(v));
    for _ in 0..100 {
        let (r, a, x) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let w = LossWeights { rec: rng.random::<f64>() * 3.0, adv: rng.random::<f64>(), aux: rng.random::<f64>() * 2.0 };
        let got = total_loss(&LossParts { rec: s(r), adv: s(a), aux: s(x) }, w).unwrap().value().item();
        assert!((got - (w.rec * r + w.adv * a + w.aux * x)).abs() <= 1e-12);
    }
    let zero = total_loss(&LossParts { rec: s(0.0), adv: s(0.0), aux: s(0.0) }, LossWeights::default()).unwrap();
    assert_eq!(zero.value().item(), 0.0);
}

#[test]
fn partial_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
    let m = Tensor::from_fn(&[1, 1, 6, 6], |_| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 });
    let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[1, 3, 1, 1], |_| rng.random_range(-1.0..1.0));
    let target = Tensor::from_fn(&[1, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
    let loss = |w: &Tensor<f64>, b: &Tensor<f64>| -> Var<f64> {
        let (wv, bv) = (Var::leaf(w.clone()), Var::leaf(b.clone()));
        let (y, _) = partial_conv(&Var::constant(x.clone()), &m, &wv, Some(&bv), 1, 1).unwrap();
        y.sub(&Var::constant(target.clone())).unwrap().square().mean_all()
    };
    let (wv, bv) = (Var::leaf(w.clone()), Var::leaf(b.clone()));
    let (y, _) = partial_conv(&Var::constant(x.clone()), &m, &wv, Some(&bv), 1, 1).unwrap();
    let g = y.sub(&Var::constant(target.clone())).unwrap().square().mean_all().backward_watch(&[&wv, &bv]).unwrap();
    let h = 1e-4;
    for (which, base, grad) in [(0, &w, g.wrt(&wv).unwrap().clone()), (1, &b, g.wrt(&bv).unwrap().clone())] {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..base.numel() {
            let mut up = base.clone();
            up.data_mut()[i] += h;
            let mut dn = base.clone();
            dn.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| if which == 0 { loss(t, &b) } else { loss(&w, t) }.value().item();
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            num += (grad.data()[i] - fd).powi(2);
            den += fd * fd;
        }
        assert!(num.sqrt() / den.sqrt() <= 1e-3);
    }
}

#[test]
fn highpass_of_ramp_vanishes_inside() {
    let f = Tensor::from_fn(&[1, 2, 7, 9], |i| 0.3 * i[2] as f64 - 1.7 * i[3] as f64 + i[1] as f64);
    let hp = highpass(&f).unwrap();
    for c in 0..2 {
        for y in 1..6 {
            for x in 1..8 {
                assert!(hp.get(&[0, c, y, x]).abs() <= 1e-12);
            }
        }
    }
}

fn batch_at(size: usize, n: usize) -> Batch<f32> {
    let cfg = Config::desk();
    let prep = cfg.data.prep();
    let samples: Vec<Sample<f32>> = (0..n).map(|i| Sample::prepare(synth_image(size, i as u64), &prep).unwrap()).collect();
    let masks: Vec<Mask<f32>> =
        (0..n).map(|i| generate_irregular_mask(size, size, MaskBucket::ALL[2], BorderMode::Near, i as u64).unwrap()).collect();
    Batch::collate(&samples.iter().collect::<Vec<_>>(), &masks).unwrap()
}

#[test]
fn desk_model_runs_at_several_resolutions() {
    for size in [64, 128, 256] {
        let mut cfg = Config::desk();
        cfg.data.image_size = size;
        let m = Model::<f32>::new(&cfg).unwrap();
        let b = batch_at(size, 1);
        let out = m.inpaint(&b).unwrap();
        assert_eq!(out.shape(), &[1, 3, size, size]);
        let known = b.mask.data();
        for c in 0..3 {
            for p in 0..size * size {
                if known[p] == 1.0 {
                    assert_eq!(out.data()[c * size * size + p], b.image.data()[c * size * size + p]);
                }
            }
        }
    }
}

#[test]
fn checkpoint_reload_gives_identical_forward() {
    let cfg = Config::desk();
    let mut st = TrainState::<f32>::new(&cfg).unwrap();
    let b = batch_at(64, 2);
    tsgl_core::train::train_step(&mut st, &b, LossWeights::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    checkpoint::save(&st, &cfg, &p).unwrap();
    let back = checkpoint::load::<f32>(&p, &cfg, false).unwrap();
    let (x, y) = (st.model.inpaint(&b).unwrap(), back.model.inpaint(&b).unwrap());
    assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    let mut other = cfg.clone();
    other.model.texture.dim = 8;
    assert!(checkpoint::load::<f32>(&p, &other, false).is_err());
    assert!(checkpoint::load::<f32>(&p, &other, true).is_err(), "forcing cannot fix shape mismatches");
}

#[test]
fn tiny_model_gradients_match_small_step_differences() {
    use tsgl_core::data::Dataset;
    use tsgl_core::train::{epoch_batches, generator_parts};
    let cfg = Config::tiny();
    let mut model = Model::<f64>::new(&cfg).unwrap();
    let prep = cfg.data.prep();
    let data = Dataset::from_samples((0..2).map(|i| Sample::prepare(synth_image(16, i), &prep).unwrap()).collect());
    let batch = epoch_batches(&cfg, &data, 1).unwrap().remove(0);
    let w = LossWeights::from(&cfg.train);
    let loss = |m: &Model<f64>| total_loss(&generator_parts(m, &m.generate(&batch).unwrap(), &batch).unwrap(), w).unwrap().value().item();
    let g = total_loss(&generator_parts(&model, &model.generate(&batch).unwrap(), &batch).unwrap(), w).unwrap().backward().unwrap();
    model.gen_params.set_trainable(false);
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for id in model.gen_params.ids().collect::<Vec<_>>() {
        let analytic = g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(model.gen_params.get(id).shape()));
        for i in 0..analytic.numel() {
            let orig = model.gen_params.get(id).data()[i];
            model.gen_params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&model);
            model.gen_params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&model);
            model.gen_params.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            num += (analytic.data()[i] - fd).powi(2);
            den += fd * fd;
        }
    }
    assert!(num.sqrt() / den.sqrt() <= 1e-6, "relative error {:.2e}", num.sqrt() / den.sqrt());
}
