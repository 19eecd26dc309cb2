use avih::attack::split_key_share;
use avih::augment::{sample_augmentation, AugmentationPolicy};
use avih::harness::RunConfig;
use avih::losses::{self, PatchSpec};
use avih::metrics;
use avih::models::{EmbeddingNet, ServiceModelSpec};
use avih::rng;
use avih::ImageBatch;
use proptest::prelude::*;
use tch::{Kind, Tensor};

fn batch(values: &[f32], n: usize, side: usize) -> ImageBatch {
    ImageBatch::from_vec(values[..n * 3 * side * side].to_vec(), [n, 3, side, side]).unwrap()
}

fn pixels(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_strictly_decreasing_in_mse(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (p_lo, p_hi) = (metrics::psnr_from_mse(lo), metrics::psnr_from_mse(hi));
        prop_assert!(p_hi < p_lo || p_lo == metrics::PSNR_CAP_DB);
    }

    #[test]
    fn pixel_metrics_symmetric_and_ssim_reflexive(a in pixels(2 * 3 * 12 * 12), b in pixels(2 * 3 * 12 * 12)) {
        let (x, y) = (batch(&a, 2, 12), batch(&b, 2, 12));
        prop_assert_eq!(metrics::mse(&x, &y).unwrap(), metrics::mse(&y, &x).unwrap());
        for (s, t) in metrics::ssim(&x, &y).unwrap().iter().zip(metrics::ssim(&y, &x).unwrap()) {
            prop_assert!((s - t).abs() < 1e-12);
        }
        for s in metrics::ssim(&x, &x).unwrap() {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tpr_monotone_in_far(
        genuine in prop::collection::vec(-1.0f64..1.0, 1..30),
        impostor in prop::collection::vec(-1.0f64..1.0, 1..80),
        f1 in 0.001f64..0.999,
        f2 in 0.001f64..0.999,
    ) {
        let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
        let a = metrics::tpr_at_far(&genuine, &impostor, lo).unwrap().tpr;
        let b = metrics::tpr_at_far(&genuine, &impostor, hi).unwrap().tpr;
        prop_assert!(a <= b);
    }

    #[test]
    fn cmc_ranks_ordered_and_map_bounded(
        q in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
        g in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 3..12),
    ) {
        let qid: Vec<usize> = (0..q.len()).map(|i| i % 3).collect();
        let gid: Vec<usize> = (0..g.len()).map(|i| i % 3).collect();
        let r = metrics::cmc_and_map(&q, &g, &qid, &gid).unwrap();
        prop_assert!(r.rank1 <= r.rank5);
        prop_assert!((0.0..=1.0).contains(&r.map));
    }

    #[test]
    fn key_share_split_contract(pool_half in 1usize..60, fraction in 0.001f64..=1.0, seed in 0u64..1000) {
        let n = 2 * pool_half;
        match split_key_share(n, fraction, seed) {
            Ok(s) => {
                let want = (fraction * s.train_pool.len() as f64).round() as usize;
                prop_assert_eq!(s.train.len(), want);
                prop_assert!(s.train.iter().all(|i| s.train_pool.contains(i) && !s.eval.contains(i)));
                prop_assert_eq!(s.train_pool.len() + s.eval.len(), n);
                prop_assert_eq!(split_key_share(n, fraction, seed).unwrap(), s);
            }
            Err(_) => prop_assert_eq!((fraction * pool_half as f64).round() as usize, 0),
        }
    }

    #[test]
    fn augmentation_keeps_shape(pad in 0usize..8, flip in 0.0f64..=1.0, seed in 0u64..500) {
        let policy = AugmentationPolicy { horizontal_flip_prob: flip, pad_pixels: pad, crop_to_original: true };
        let mut r = rng::stream(seed, "prop-augment");
        let x = Tensor::rand([1, 3, 8, 8], (Kind::Float, tch::Device::Cpu));
        let d = sample_augmentation(&policy, &mut r);
        prop_assert_eq!(d.apply(&x).unwrap().size(), x.size());
    }

    #[test]
    fn vc_nonnegative_and_shift_invariant(v in pixels(3 * 8 * 8), k in 1usize..4, shift in -0.5f64..0.5) {
        let x = Tensor::from_slice(&v).reshape([1, 3, 8, 8]).to_kind(Kind::Double);
        let spec = PatchSpec::new(k, k, 1);
        let a = losses::variance_consistency_loss(&x, &spec).unwrap().double_value(&[]);
        let b = losses::variance_consistency_loss(&(&x + shift), &spec).unwrap().double_value(&[]);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn difference_loss_symmetric(a in pixels(3 * 4 * 4), b in pixels(3 * 4 * 4)) {
        let x = Tensor::from_slice(&a).reshape([1, 3, 4, 4]);
        let y = Tensor::from_slice(&b).reshape([1, 3, 4, 4]);
        let d1 = losses::difference_loss(&x, &y).unwrap().double_value(&[]);
        let d2 = losses::difference_loss(&y, &x).unwrap().double_value(&[]);
        prop_assert!(d1 >= 0.0);
        prop_assert!((d1 - d2).abs() < 1e-6);
    }

    #[test]
    fn config_json_round_trip(seed in 0u64..10_000, steps in 1usize..5000) {
        let mut cfg = RunConfig::default();
        cfg.seeds.attack = seed;
        cfg.attack.steps = steps;
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn perceptual_distance_symmetric(a in pixels(2 * 3 * 16 * 16), b in pixels(2 * 3 * 16 * 16)) {
        let net = EmbeddingNet::new(ServiceModelSpec { width: 4, ..Default::default() }, 3).unwrap();
        let (x, y) = (batch(&a, 2, 16), batch(&b, 2, 16));
        let d1 = metrics::perceptual_distance(&x, &y, &net).unwrap();
        let d2 = metrics::perceptual_distance(&y, &x, &net).unwrap();
        for (p, q) in d1.iter().zip(&d2) {
            prop_assert!((p - q).abs() <= 1e-6);
        }
    }
}
