use hybridseg::data::{augment, make_splits, save_sample, synth_vessels, AugmentConfig, DatasetKind};
use hybridseg::dcn::dcn_forward;
use hybridseg::layer::Mode;
use hybridseg::loss::{combined_loss, mixed_loss};
use hybridseg::metrics::{auc, metrics, Confusion};
use hybridseg::network::{build_model, count_macs, EncoderSpec, Model};
use hybridseg::par;
use hybridseg::tensor::{bilinear_sample, bilinear_upsample, conv2d, ConvWeights};
use hybridseg::train::AdamW;
use hybridseg::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn weights(seed: u64, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> ConvWeights<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ConvWeights::new(cin, cout, k, stride, pad, groups, true).unwrap();
    w.kernel.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    w.bias.as_mut().unwrap().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    w
}

fn naive_conv(x: &Tensor<f64>, w: &ConvWeights<f64>) -> Tensor<f64> {
    let [n, _, h, wd] = x.shape();
    let [oc, icg, k, _] = w.kernel.shape();
    let (s, p) = (w.stride as i64, w.padding as i64);
    let oh = ((h as i64 + 2 * p - k as i64) / s + 1) as usize;
    let ow = ((wd as i64 + 2 * p - k as i64) / s + 1) as usize;
    let ocg = oc / w.groups;
    Tensor::from_fn([n, oc, oh, ow], |b, o, y, xx| {
        let g = o / ocg;
        let mut acc = w.bias.as_ref().unwrap()[o];
        for ci in 0..icg {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = y as i64 * s + ky as i64 - p;
                    let ix = xx as i64 * s + kx as i64 - p;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.kernel.at(o, ci, ky, kx) * x.at(b, g * icg + ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn random_confusion() -> impl Strategy<Value = Confusion> {
    (0u64..5000, 0u64..5000, 0u64..5000, 0u64..5000).prop_map(|(tp, tn, fp, fn_)| Confusion { tp, tn, fp, fn_ })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn conv2d_matches_naive_loop(
        seed in any::<u64>(), n in 1usize..3, g in 1usize..3, cin_g in 1usize..3, cout_g in 1usize..3,
        h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, pad in 0usize..3,
    ) {
        let pad = pad.max(k.saturating_sub(h.min(w)).div_ceil(2));
        let x = tensor(seed, [n, g * cin_g, h, w]);
        let wt = weights(seed ^ 1, g * cin_g, g * cout_g, k, stride, pad, g);
        let got = conv2d(&x, &wt).unwrap();
        let want = naive_conv(&x, &wt);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn parallel_and_sequential_paths_agree_bitwise(seed in any::<u64>(), c in 1usize..6, h in 4usize..20) {
        let x = tensor(seed, [2, c, h, h]).cast::<f32>();
        let wt = weights(seed ^ 2, c, 4, 3, 1, 1, 1).cast::<f32>();
        let a = par::with_parallel(true, || conv2d(&x, &wt).unwrap());
        let b = par::with_parallel(false, || conv2d(&x, &wt).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn bilinear_sample_is_exact_on_lattice_and_linear_between(
        seed in any::<u64>(), h in 2usize..8, w in 2usize..8, t in prop::sample::select(vec![0.25f64, 0.5, 0.75]),
    ) {
        let map = tensor(seed, [1, 2, h, w]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, j) = (rng.random_range(0..h - 1), rng.random_range(0..w - 1));
        for c in 0..2 {
            prop_assert_eq!(bilinear_sample(&map, 0, i as f64, j as f64)[c], map.at(0, c, i, j));
            let down = bilinear_sample(&map, 0, i as f64 + t, j as f64)[c];
            let lerp = (1.0 - t) * map.at(0, c, i, j) + t * map.at(0, c, i + 1, j);
            prop_assert!((down - lerp).abs() < 1e-12);
            let right = bilinear_sample(&map, 0, i as f64, j as f64 + t)[c];
            let lerp = (1.0 - t) * map.at(0, c, i, j) + t * map.at(0, c, i, j + 1);
            prop_assert!((right - lerp).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_sample_is_linear_in_the_map(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, row in -1.5f64..6.5, col in -1.5f64..6.5) {
        let (p, q) = (tensor(seed, [1, 1, 5, 5]), tensor(seed ^ 3, [1, 1, 5, 5]));
        let mix = Tensor::from_fn([1, 1, 5, 5], |n, c, y, x| a * p.at(n, c, y, x) + b * q.at(n, c, y, x));
        let lhs = bilinear_sample(&mix, 0, row, col)[0];
        let rhs = a * bilinear_sample(&p, 0, row, col)[0] + b * bilinear_sample(&q, 0, row, col)[0];
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_bounds(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, sy in 1usize..4, sx in 1usize..4) {
        let x = tensor(seed, [1, 2, h, w]);
        let y = bilinear_upsample(&x, h * sy, w * sx).unwrap();
        let (lo, hi) = x.min_max();
        prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn dcn_is_linear_in_modulation(seed in any::<u64>(), c in 1usize..4, h in 3usize..7) {
        let x = tensor(seed, [1, c, h, h]);
        let wt = weights(seed ^ 4, c, 2, 3, 1, 1, 1);
        let offsets = tensor(seed ^ 5, [1, 18, h, h]).map(|v| 1.7 * v);
        let m1 = tensor(seed ^ 6, [1, 9, h, h]).map(|v| 0.5 + 0.5 * v);
        let m2 = tensor(seed ^ 7, [1, 9, h, h]).map(|v| 0.5 - 0.5 * v);
        let mut sum = m1.clone();
        sum.add_assign(&m2).unwrap();
        let y12 = dcn_forward(&wt, &x, &offsets, &sum).unwrap();
        let y1 = dcn_forward(&wt, &x, &offsets, &m1).unwrap();
        let y2 = dcn_forward(&wt, &x, &offsets, &m2).unwrap();
        for (idx, v) in y12.data().iter().enumerate() {
            let o = (idx / (h * h)) % 2;
            let bias = wt.bias.as_ref().unwrap()[o];
            prop_assert!((v - (y1.data()[idx] + y2.data()[idx] - bias)).abs() < 1e-5);
        }
    }

    #[test]
    fn iou_is_a_function_of_f1(c in random_confusion()) {
        let s = metrics(&c);
        prop_assert!((s.iou - s.f1 / (2.0 - s.f1)).abs() <= 1e-12);
    }

    #[test]
    fn class_swap_exchanges_sensitivity_and_specificity(c in random_confusion()) {
        let s = metrics(&c);
        let swapped = metrics(&Confusion { tp: c.tn, tn: c.tp, fp: c.fn_, fn_: c.fp });
        prop_assert_eq!(s.sen, swapped.sp);
        prop_assert_eq!(s.sp, swapped.sen);
        prop_assert_eq!(s.acc, swapped.acc);
    }

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>(), n in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..50) as f64 / 50.0 + 0.01).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 7.0).collect();
        let cube: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(base, auc(&affine, &labels).unwrap());
        prop_assert_eq!(base, auc(&cube, &labels).unwrap());
    }

    #[test]
    fn combined_loss_is_non_negative(seed in any::<u64>(), w in 0.0f64..=1.0, fg in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Tensor::from_fn([2, 1, 6, 6], |_, _, _, _| f64::from(rng.random_bool(fg)));
        let yhat = Tensor::from_fn([2, 1, 6, 6], |_, _, _, _| rng.random_range(0.0..=1.0));
        prop_assert!(combined_loss(&yhat, &y, w).unwrap().value >= 0.0);
    }

    #[test]
    fn mixed_loss_ignores_stage_order(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Tensor::from_fn([1, 1, 6, 6], |_, _, _, _| f64::from(rng.random_bool(0.3)));
        let stages: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_fn([1, 1, 6, 6], |_, _, _, _| rng.random_range(0.01..0.99)))
            .collect();
        let permuted: Vec<Tensor<f64>> = perm.iter().map(|&i| stages[i].clone()).collect();
        let a = mixed_loss(&stages, &y, 0.5).unwrap().value;
        let b = mixed_loss(&permuted, &y, 0.5).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn augmentation_keeps_dims_and_binary_masks(seed in any::<u64>(), size in prop::sample::select(vec![16usize, 32, 48])) {
        let sample = &synth_vessels(seed % 1000, size, 1).unwrap()[0];
        let out = augment(sample, seed, &AugmentConfig::default());
        prop_assert_eq!(out.image.shape(), sample.image.shape());
        prop_assert_eq!(out.mask.shape(), sample.mask.shape());
        prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn encoder_reaches_one_sixteenth(hm in 1usize..5, wm in 1usize..5) {
        let mut model = Model::<f32>::new(&EncoderSpec::hybridnetseg().scaled(8)).unwrap();
        let x = Tensor::zeros([1, 3, 16 * hm, 16 * wm]);
        let (deep, _) = model.encode(&x, Mode::Infer).unwrap();
        prop_assert_eq!((deep.height(), deep.width()), (hm, wm));
    }

    #[test]
    fn conv_macs_scale_quadratically(hm in 1usize..6, wm in 1usize..6, k in 2u64..4) {
        let model = Model::<f32>::new(&EncoderSpec::hybridnetseg()).unwrap();
        let (h, w) = (16 * hm, 16 * wm);
        let base = count_macs(&model, [3, h, w]).unwrap();
        let big = count_macs(&model, [3, h * k as usize, w * k as usize]).unwrap();
        prop_assert_eq!(big.conv, k * k * base.conv);
        prop_assert_eq!(big.sampling, k * k * base.sampling);
    }
}

#[test]
fn splits_are_stable_across_calls() {
    let dir = tempfile::tempdir().unwrap();
    for s in synth_vessels(4, 16, 6).unwrap() {
        save_sample(&s, dir.path()).unwrap();
    }
    let a = make_splits(dir.path(), DatasetKind::Synth).unwrap();
    let b = make_splits(dir.path(), DatasetKind::Synth).unwrap();
    assert_eq!(a, b);
    assert!(a.train.iter().all(|t| !a.test.contains(t)));
    assert_eq!(a.train.len() + a.test.len(), 6);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut model = build_model(&EncoderSpec::hybridnetseg().scaled(8), 3).unwrap();
    let x = tensor(1, [2, 3, 32, 32]).cast::<f32>();
    let out = model.forward(&x, Mode::Train).unwrap();
    let grads: Vec<Option<Tensor<f32>>> = out.stage_logits.iter().map(|l| Some(l.map(|_| 0.1))).collect();
    model.backward(&grads).unwrap();
    let snapshot = |m: &Model<f32>| {
        let mut ps = Vec::new();
        m.params("", &mut ps);
        ps.into_iter().flat_map(|p| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let before = snapshot(&model);
    let mut ps = Vec::new();
    model.params_mut("", &mut ps);
    AdamW::new().update(ps, 0.0, 5e-4).unwrap();
    assert_eq!(before, snapshot(&model));
}
