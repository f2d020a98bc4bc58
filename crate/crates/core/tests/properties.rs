use kdseg::data::{
    central_crop, normalize_nonzero, regions_from_labels, split_folds, FlipAxes, Modality, ModalityStack,
};
use kdseg::losses::{
    binarize, flatten_normalize, gt_loss, kd_loss, kl_bottleneck_loss, soft_dice, temperature_soften, total_loss,
    LossWeights, ProbabilityMap,
};
use kdseg::network::{Network, NetworkConfig};
use kdseg::training::TrainState;
use kdseg::Tensor;
use proptest::prelude::*;

const SHAPE: [usize; 5] = [1, 3, 2, 2, 2];

fn logits(scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-scale..scale, 24).prop_map(|v| Tensor::new(&SHAPE, v).unwrap())
}

fn mask() -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(prop::bool::ANY, 24)
        .prop_map(|v| Tensor::new(&SHAPE, v.into_iter().map(|b| f64::from(u8::from(b))).collect()).unwrap())
}

fn weights() -> impl Strategy<Value = LossWeights> {
    (0.0..=1.0f64, 0.0..20.0f64, 0.1..10.0f64).prop_map(|(lambda, alpha, temperature)| LossWeights {
        lambda,
        alpha,
        temperature,
        enable_kd: true,
        enable_kl: true,
    })
}

proptest! {
    #[test]
    fn losses_are_finite_and_nonnegative(s in logits(40.0), t in logits(40.0), y in mask(), temperature in 0.1..10.0f64) {
        for v in [kd_loss(&s, &t, temperature).unwrap(), gt_loss(&s, &y).unwrap(), kl_bottleneck_loss(&s, &t).unwrap()] {
            prop_assert!(v.is_finite() && v >= 0.0, "{v}");
        }
    }

    #[test]
    fn kl_is_zero_on_identical_and_gibbs(x in logits(5.0), y in logits(5.0)) {
        prop_assert!(kl_bottleneck_loss(&x, &x).unwrap().abs() < 1e-9);
        prop_assert!(kl_bottleneck_loss(&x, &y).unwrap() >= -1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_each_term(w in weights(), kd in 0.0..3.0f64, gt in 0.0..3.0f64, kl in 0.0..1.0f64, d in 0.0..1.0f64) {
        let base = total_loss(kd, gt, kl, &w).unwrap();
        prop_assert!((base - (w.lambda * kd + (1.0 - w.lambda) * gt + w.alpha * kl)).abs() < 1e-9);
        prop_assert!((total_loss(kd + d, gt, kl, &w).unwrap() - base - w.lambda * d).abs() < 1e-9);
        prop_assert!((total_loss(kd, gt + d, kl, &w).unwrap() - base - (1.0 - w.lambda) * d).abs() < 1e-9);
        prop_assert!((total_loss(kd, gt, kl + d, &w).unwrap() - base - w.alpha * d).abs() < 1e-9);
    }

    #[test]
    fn softening_is_monotone_and_flattens(z in -20.0..20.0f64, dz in 0.01..5.0f64, temperature in 1.0..10.0f64) {
        let at = |z: f64, t: f64| temperature_soften(&Tensor::new(&[1, 1], vec![z]).unwrap(), t).unwrap().tensor().data()[0];
        prop_assert!(at(z + dz, temperature) > at(z, temperature));
        prop_assert!((at(z, 2.0 * temperature) - 0.5).abs() <= (at(z, temperature) - 0.5).abs());
    }

    #[test]
    fn bottleneck_distribution_is_shift_invariant(x in logits(10.0), c in -50.0..50.0f64) {
        let p = flatten_normalize(&x).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let q = flatten_normalize(&x.map(|v| v + c)).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_in_unit_interval_and_binarize_idempotent(a in logits(8.0), b in logits(8.0), threshold in 0.05..0.95f64) {
        let pa = temperature_soften(&a, 1.0).unwrap();
        let pb = temperature_soften(&b, 1.0).unwrap();
        let d = soft_dice(&pa, &pb).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
        let once = binarize(&pa, threshold).unwrap();
        let twice = binarize(&ProbabilityMap::new(once.clone()).unwrap(), threshold).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn regions_always_nest(labels in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4]), 64)) {
        let labels = Tensor::new(&[1, 4, 4, 4], labels).unwrap();
        prop_assert!(regions_from_labels(&labels).unwrap().is_nested());
    }

    #[test]
    fn normalization_standardizes_support(values in prop::collection::vec(0.5..5.0f32, 32), zeros in 0usize..32) {
        let mut v = values;
        for x in v.iter_mut().take(zeros) {
            *x = 0.0;
        }
        prop_assume!(32 - zeros >= 2);
        let stack = ModalityStack::new(Tensor::new(&[1, 2, 4, 4], v.clone()).unwrap(), vec![Modality::Flair], "s").unwrap();
        let Ok(out) = normalize_nonzero(&stack) else { return Ok(()) };
        let support: Vec<f64> = out.voxels.data().iter().zip(&v).filter(|(_, raw)| **raw != 0.0).map(|(n, _)| f64::from(*n)).collect();
        let mean = support.iter().sum::<f64>() / support.len() as f64;
        let var = support.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / support.len() as f64;
        prop_assert!(mean.abs() < 1e-4 && (var.sqrt() - 1.0).abs() < 1e-4, "mean {mean} std {}", var.sqrt());
        prop_assert!(out.voxels.data().iter().zip(&v).all(|(n, raw)| *raw != 0.0 || *n == 0.0));
    }

    #[test]
    fn crop_and_flip_preserve_shapes(d in 4usize..12, h in 4usize..12, w in 4usize..12, flips in prop::array::uniform3(prop::bool::ANY)) {
        let vol = Tensor::from_fn(&[2, d, h, w], |i| i as u8);
        let cropped = central_crop(&vol, [4, 4, 4]).unwrap();
        prop_assert_eq!(cropped.shape(), &[2, 4, 4, 4]);
        let f = FlipAxes(flips);
        let once = f.apply(&vol).unwrap();
        prop_assert_eq!(f.apply(&once).unwrap(), vol);
    }

    #[test]
    fn folds_partition_subjects(n in 3usize..40, k in 2usize..6, seed in 0u64..1000) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let split = split_folds(&ids, k, seed).unwrap();
        let sizes = split.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let (train, val) = (split.training(f), split.validation(f));
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(val.iter().all(|s| !train.contains(s)));
        }
    }

    #[test]
    fn plateau_lr_never_increases(losses in prop::collection::vec(0.0..1.0f64, 1..200), patience in 1usize..20) {
        let mut s = TrainState::new(1e-4);
        let mut last = s.current_lr;
        for l in losses {
            s.lr_step(l, 0.2, patience);
            prop_assert!(s.current_lr <= last);
            prop_assert!((s.current_lr - 1e-4 * 0.2f64.powi(s.reductions as i32)).abs() < 1e-18);
            last = s.current_lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn network_output_matches_input_resolution(depth in 1usize..3, mult in 1usize..3, skips in prop::bool::ANY, channels in 1usize..3, seed in 0u64..100) {
        let size = (1 << depth) * mult;
        let cfg = NetworkConfig {
            in_channels: channels,
            depth,
            base_filters: 2,
            skip_connections: if skips { depth } else { 0 },
            ..NetworkConfig::default()
        };
        let net = Network::init(cfg, seed).unwrap();
        let x = Tensor::from_fn(&[1, channels, size, size, size], |i| (i as f32 * 0.37).sin());
        let out = net.forward(&x).unwrap();
        prop_assert_eq!(out.logits.shape(), &[1, 3, size, size, size]);
        let b = size >> depth;
        prop_assert_eq!(&out.bottleneck.shape()[2..], &[b, b, b]);
        prop_assert_eq!(net.forward(&x).unwrap().logits, out.logits);
    }
}
