mod common;

use dprisk::accountant::PrivacyParams;
use dprisk::datagen::{generate, normalize, DatasetSpec};
use dprisk::evalrecon::{match_reconstructions, ssim, Distance, SsimConfig};
use dprisk::imprint::{detect_imprint, run_campaign, AttackScenario};
use dprisk::numerics::Tensor;
use dprisk::trainer::{Model, ModelSpec};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn median_ssim_degrades_with_noise() {
    let raw = generate(&DatasetSpec::binary(32, 16, 77)).unwrap();
    let (norm, stats) = normalize(&raw).unwrap();
    let images: Vec<Tensor> = raw.samples.iter().map(|s| s.image.clone()).collect();
    let downstream = Model::init(&ModelSpec::mlp(&[1, 16, 16], &[16], 2), 3).unwrap();
    let mut medians = Vec::new();
    for sigma in [0.0, 1e-4, 1e-3, 1e-2, 1e-1] {
        let dp = (sigma > 0.0).then_some(PrivacyParams {
            noise_multiplier: sigma,
            clip_norm: 1.0,
            sampling_rate: 1.0 / 32.0,
            steps: 32,
            delta: 1e-5,
        });
        let scenario = AttackScenario {
            dp_on_client: dp,
            seed: 11,
            ..AttackScenario::default()
        };
        let campaign = run_campaign(&norm, &stats, &scenario, &downstream).unwrap();
        let recons: Vec<Tensor> = campaign.sets.iter().flat_map(|s| s.images.iter().cloned()).collect();
        let matches = match_reconstructions(&images, &recons, &SsimConfig::default(), Distance::Ssim).unwrap();
        medians.push(median(matches.iter().map(|m| m.best_ssim).collect()));
    }
    assert!(medians[0] > 0.999, "{medians:?}");
    for w in medians.windows(2) {
        assert!(w[1] <= w[0], "{medians:?}");
    }
}

#[test]
fn ssim_distance_vanishes_only_on_identical_images() {
    let raw = generate(&DatasetSpec::multiclass(24, 4, 16, 5)).unwrap();
    let cfg = SsimConfig::default();
    for (i, a) in raw.samples.iter().enumerate() {
        for (j, b) in raw.samples.iter().enumerate() {
            let d = 1.0 - ssim(&a.image, &b.image, &cfg).unwrap();
            let identical = a.image == b.image;
            assert_eq!(d.abs() < 1e-12, identical, "pair {i}, {j}: distance {d}");
            assert_eq!(identical, i == j);
        }
    }
}

#[test]
fn detection_has_no_false_calls() {
    for m in common::clean_zoo() {
        assert!(!detect_imprint(&m), "{:?}", m.spec.layers);
    }
    for m in common::modified_zoo() {
        assert!(detect_imprint(&m), "{:?}", m.spec.layers);
    }
}
