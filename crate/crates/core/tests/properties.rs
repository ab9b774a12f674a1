use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsgl_core::balance::{channel_equalize, spatial_average};
use tsgl_core::data::{
    assemble_inputs, canny_edge, far_margin, edge_preserving_smooth, generate_irregular_mask, synth_image, to_gray, total_variation,
    BorderMode, CannyParams, GrayImage, Mask, MaskBucket, PrepParams, RgbImage, Sample, SmoothParams,
};
use tsgl_core::decoder::composite;
use tsgl_core::diagnostics::{channel_entropy, feature_kl, Extractor};
use tsgl_core::losses::{auxiliary_loss, discriminator_loss, generator_adv_loss, reconstruction_loss};
use tsgl_core::pconv::{partial_conv_step, update_mask};
use tsgl_core::recon::global_normalize;
use tsgl_core::texture::{attention_weights, update_token_mask, window_partition, window_reverse};
use tsgl_tensor::{Linear, ParamStore, Tensor, Var};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn binary(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(prop::bool::weighted(0.6), n)
        .prop_map(move |v| Tensor::new(shape, v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()).unwrap())
}

fn avg_pool2(f: &Tensor<f64>) -> Tensor<f64> {
    let s = f.shape();
    Tensor::from_fn(&[s[0], s[1], s[2] / 2, s[3] / 2], |i| {
        let mut t = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                t += f.get(&[i[0], i[1], i[2] * 2 + dy, i[3] * 2 + dx]);
            }
        }
        t / 4.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_inputs_twice_changes_nothing(seed in 0u64..1000, bucket in 0usize..6) {
        let prep = PrepParams { prior: Default::default(), canny: CannyParams::default(), smooth: SmoothParams::default() };
        let s = Sample::prepare(synth_image::<f64>(32, seed), &prep).unwrap();
        let m: Mask<f64> = generate_irregular_mask(32, 32, MaskBucket::new(bucket).unwrap(), BorderMode::Near, seed).unwrap();
        let inp = assemble_inputs(&s, &m).unwrap();
        for t in [&inp.structure_input, &inp.texture_input] {
            let c = t.shape()[0];
            let again = Tensor::from_fn(t.shape(), |i| t.get(i) * m.tensor().get(&[0, i[1], i[2]]));
            prop_assert_eq!(again.data(), t.data());
            prop_assert_eq!(t.shape(), &[c, 32, 32]);
        }
    }

    #[test]
    fn generated_masks_stay_in_bucket(seed in any::<u64>(), bucket in 0usize..6, far in any::<bool>()) {
        let b = MaskBucket::new(bucket).unwrap();
        let mode = if far { BorderMode::Far } else { BorderMode::Near };
        let room = if far { (64 - 2 * far_margin(64, 64)).pow(2) as f64 / 4096.0 } else { 1.0 };
        match generate_irregular_mask::<f32>(64, 64, b, mode, seed) {
            Ok(m) => prop_assert!(b.contains(m.hole_ratio()), "ratio {} outside {}", m.hole_ratio(), b),
            Err(_) => prop_assert!(room <= b.lo(), "feasible bucket {} rejected", b),
        }
    }

    #[test]
    fn canny_ignores_brightness_offsets(seed in 0u64..500, offset in -0.2f64..0.2) {
        let g = to_gray(&synth_image::<f64>(32, seed));
        let squeezed = GrayImage::new(g.tensor().map(|v| 0.3 + 0.4 * v)).unwrap();
        let shifted = GrayImage::new(squeezed.tensor().map(|v| v + offset)).unwrap();
        let p = CannyParams::default();
        let (a, b) = (canny_edge(&squeezed, &p).unwrap(), canny_edge(&shifted, &p).unwrap());
        prop_assert_eq!(a.tensor().data(), b.tensor().data());
    }

    #[test]
    fn smoothing_never_increases_total_variation(seed in 0u64..500) {
        let img = synth_image::<f64>(24, seed);
        let s = edge_preserving_smooth(&img, &SmoothParams::default()).unwrap();
        prop_assert!(total_variation(s.tensor()) <= total_variation(img.tensor()) + 1e-9);
    }

    #[test]
    fn partial_conv_masks_grow_and_holes_are_zero(
        x in tensor(&[1, 2, 8, 8], -2.0, 2.0),
        m in binary(&[1, 1, 8, 8]),
        w in tensor(&[3, 2, 3, 3], -1.0, 1.0),
    ) {
        let next = update_mask(&m, 3, 1, 1).unwrap();
        prop_assert!(next.data().iter().zip(m.data()).all(|(a, b)| a >= b));
        let (y, mm) = partial_conv_step(&x, &m, &w, &[0.3, -0.2, 0.1], 1, 1).unwrap();
        for c in 0..3 {
            for p in 0..64 {
                if mm.data()[p] == 0.0 {
                    prop_assert!(y.data()[c * 64 + p] == 0.0);
                }
            }
        }
    }

    #[test]
    fn window_partition_round_trips_exactly(x in tensor(&[2, 8, 8, 3], -5.0, 5.0), w in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let v = Var::constant(x.clone());
        let back = window_reverse(&window_partition(&v, w).unwrap(), w, 2, 8, 8).unwrap();
        prop_assert_eq!(back.value().data(), x.data());
    }

    #[test]
    fn token_validity_never_decreases(v in binary(&[1, 1, 8, 8]), shift in 0usize..4) {
        let out = update_token_mask(&v, 4, shift).unwrap();
        prop_assert!(out.data().iter().zip(v.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn attention_rows_are_distributions(
        q in tensor(&[2, 9, 4], -3.0, 3.0),
        k in tensor(&[2, 9, 4], -3.0, 3.0),
        inv in binary(&[2, 1, 9]),
        tau in 0.0f64..200.0,
    ) {
        let a = attention_weights(&Var::constant(q), &Var::constant(k), &inv, tau).unwrap();
        for row in a.value().data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn global_normalization_ignores_channel_affine(
        x in tensor(&[1, 3, 5, 5], -2.0, 2.0),
        scale in prop::collection::vec(0.2f64..5.0, 3),
        shift in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let y = Tensor::from_fn(&[1, 3, 5, 5], |i| x.get(i) * scale[i[1]] + shift[i[1]]);
        let (a, _) = global_normalize(&Var::constant(x), 1e-5).unwrap();
        let (b, _) = global_normalize(&Var::constant(y), 1e-5).unwrap();
        for (u, v) in a.value().data().iter().zip(b.value().data()) {
            prop_assert!((u - v).abs() <= 1e-9, "{} vs {}", u, v);
        }
    }

    #[test]
    fn spatial_weights_are_normalised(h in 3usize..9, w in 3usize..9, radius in 1usize..3, bw in 0.3f64..3.0) {
        prop_assume!(radius < h.min(w));
        let ones = Var::constant(Tensor::<f64>::ones(&[1, 2, h, w]));
        let y = spatial_average(&ones, radius, bw).unwrap();
        prop_assert!(y.value().data().iter().all(|v| (v - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn channel_gate_keeps_signs(x in tensor(&[1, 4, 3, 3], -3.0, 3.0), seed in any::<u64>()) {
        let mut ps = ParamStore::<f64>::new();
        let gate = Linear::new(&mut ps, "gate", 4, 4, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let y = channel_equalize(&ps, &gate, &Var::constant(x.clone())).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            prop_assert!(a.signum() == b.signum() || *b == 0.0);
        }
    }

    #[test]
    fn compositing_passes_known_pixels_bit_exactly(out in tensor(&[1, 3, 6, 6], 0.0, 1.0), img in tensor(&[1, 3, 6, 6], 0.0, 1.0), m in binary(&[1, 1, 6, 6])) {
        let y = composite(&Var::constant(out), &img, &m).unwrap();
        for c in 0..3 {
            for p in 0..36 {
                if m.data()[p] == 1.0 {
                    prop_assert_eq!(y.value().data()[c * 36 + p].to_bits(), img.data()[c * 36 + p].to_bits());
                }
            }
        }
    }

    #[test]
    fn losses_are_non_negative(a in tensor(&[1, 3, 4, 4], 0.0, 1.0), b in tensor(&[1, 3, 4, 4], 0.0, 1.0), d in tensor(&[1, 1, 2, 2], 0.0, 1.0), e in tensor(&[1, 1, 2, 2], 0.0, 1.0)) {
        prop_assert!(reconstruction_loss(&Var::constant(a.clone()), &b).unwrap().value().item() >= 0.0);
        let p = Var::constant(a.narrow(1, 0, 1).unwrap());
        prop_assert!(auxiliary_loss(&p, &b.narrow(1, 0, 1).unwrap()).unwrap().value().item() >= 0.0);
        prop_assert!(generator_adv_loss(&Var::constant(d.clone())).value().item() >= 0.0);
        prop_assert!(discriminator_loss(&Var::constant(d), &Var::constant(e)).unwrap().value().item() >= 0.0);
    }

    #[test]
    fn pooled_map_has_zero_identity_kl(f in tensor(&[2, 4, 8, 8], -3.0, 3.0)) {
        prop_assert!(feature_kl(&avg_pool2(&f), &f, Extractor::Identity).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn pooled_map_has_zero_kl_for_every_extractor_when_channels_share_structure(
        g in tensor(&[1, 1, 8, 8], -3.0, 3.0),
        offsets in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let f = Tensor::from_fn(&[1, 4, 8, 8], |i| g.get(&[0, 0, i[2], i[3]]) + offsets[i[1]]);
        for ex in Extractor::ALL {
            prop_assert!(feature_kl(&avg_pool2(&f), &f, ex).unwrap().abs() <= 1e-12, "{}", ex.name());
        }
    }

    #[test]
    fn entropy_is_bounded(f in tensor(&[1, 5, 4, 4], -20.0, 20.0)) {
        let e = channel_entropy(&f).unwrap();
        prop_assert!(e.data().iter().all(|&v| v >= 0.0 && v <= 5f64.ln() + 1e-12));
    }
}

#[test]
fn rgb_constructor_range_checked() {
    assert!(RgbImage::<f64>::from_fn(4, 4, |_, _, _| 0.5).is_ok());
    assert!(RgbImage::<f64>::from_fn(4, 4, |_, _, _| 1.5).is_err());
}
