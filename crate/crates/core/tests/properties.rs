use proptest::prelude::*;

use dprisk::accountant::{epsilon_for, PrivacyParams};
use dprisk::config::{parse_eps_list, ExperimentConfig};
use dprisk::datagen::{generate, stratified_split, DatasetSpec};
use dprisk::evalrecon::{ssim, SsimConfig};
use dprisk::numerics::{Rng, Tensor};
use dprisk::pipeline::Budget;
use dprisk::rero::{bounds_for, ReroParams};
use dprisk::trainer::dp::clip_in_place;
use dprisk::trainer::ParamSet;

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_length_matches_shape(dims in prop::collection::vec(1usize..5, 0..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn rng_replays_from_seed(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::stream(seed, stream);
        let mut b = Rng::stream(seed, stream);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn clipping_lands_in_the_ball(seed in any::<u64>(), scale in 1e-3f64..1e3, clip in 1e-2f64..1e2) {
        let mut rng = Rng::new(seed);
        let mut g = ParamSet { layers: vec![vec![random_tensor(&mut rng, &[3, 4], scale), random_tensor(&mut rng, &[4], scale)]] };
        clip_in_place(&mut g, clip);
        prop_assert!(g.norm() <= clip + 1e-12);
    }

    #[test]
    fn bounds_are_ordered(sigma in 0.3f64..8.0, q in 1e-3f64..1.0, steps in 1u64..2000, prior in 1e-4f64..1.0) {
        let privacy = PrivacyParams { noise_multiplier: sigma, clip_norm: 1.0, sampling_rate: q, steps, delta: 1e-5 };
        let (worst, relaxed) = bounds_for(&ReroParams::new(privacy, prior)).unwrap();
        prop_assert!(prior <= relaxed.gamma + 1e-12);
        prop_assert!(relaxed.gamma <= worst.gamma + 1e-12);
        prop_assert!(worst.gamma <= 1.0);
    }

    #[test]
    fn epsilon_falls_with_more_noise(sigma in 0.5f64..5.0, q in 1e-3f64..0.5, steps in 1u64..5000) {
        let lo = epsilon_for(sigma, q, steps, 1e-5).unwrap().epsilon.value();
        let hi = epsilon_for(sigma * 1.5, q, steps, 1e-5).unwrap().epsilon.value();
        prop_assert!(hi <= lo);
        prop_assert!(lo >= 0.0);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), size in 4usize..14) {
        let mut rng = Rng::new(seed);
        let a = random_tensor(&mut rng, &[size, size], 1.0);
        let b = random_tensor(&mut rng, &[size, size], 1.0);
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ssim(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn budgets_render_and_parse_back(eps in 1e-3f64..1e12) {
        let b = Budget(eps);
        prop_assert_eq!(Budget::parse(&b.render()).unwrap(), b);
    }

    #[test]
    fn ascending_lists_parse(values in prop::collection::btree_set(1u32..100_000, 1..6)) {
        let eps: Vec<f64> = values.iter().map(|v| f64::from(*v) / 100.0).collect();
        let text = eps.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        prop_assert_eq!(parse_eps_list(&text).unwrap(), eps);
    }

    #[test]
    fn config_text_round_trips(lr in 1e-4f64..1.0, epochs in 1usize..50, seeds in 1usize..9) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.learning_rate", &lr.to_string()).unwrap();
        cfg.set("train.epochs", &epochs.to_string()).unwrap();
        cfg.set("run.seeds", &seeds.to_string()).unwrap();
        prop_assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_and_splits_are_pure(seed in any::<u64>(), split_seed in any::<u64>()) {
        let spec = DatasetSpec::binary(120, 8, seed);
        let data = generate(&spec).unwrap();
        prop_assert_eq!(&generate(&spec).unwrap(), &data);
        let (train, test) = stratified_split(&data, 0.25, split_seed).unwrap();
        let (train2, test2) = stratified_split(&data, 0.25, split_seed).unwrap();
        prop_assert_eq!(&train, &train2);
        prop_assert_eq!(&test, &test2);
        prop_assert_eq!(train.len() + test.len(), data.len());
        for s in &test.samples {
            prop_assert!(!train.samples.contains(s));
        }
    }
}
