#![allow(dead_code)]

use dprisk::datagen::Target;
use dprisk::imprint::implant;
use dprisk::numerics::{Rng, Tensor};
use dprisk::trainer::gradcheck::gradient_check;
use dprisk::trainer::{LayerSpec, Loss, Model, ModelSpec};

/// Small networks that between them use every layer type.
pub fn gradient_zoo() -> Vec<(&'static str, Model, Loss)> {
    let mlp = Model::init(&ModelSpec::mlp(&[1, 4, 4], &[5, 4], 3), 11).unwrap();
    let mut imprinted = implant(&Model::init(&ModelSpec::mlp(&[1, 4, 4], &[5], 3), 12).unwrap(), 3).unwrap();
    // Break the constant rows so every probe sees a different mix of pixels.
    let mut rng = Rng::new(5);
    for v in imprinted.params.layers[1][0].data_mut() {
        *v += 0.3 * rng.normal();
    }
    vec![
        ("dense+relu+flatten", mlp, Loss::CrossEntropy),
        (
            "conv+pool+scalenorm",
            Model::init(&ModelSpec::cnn(&[2, 6, 6], 3, 3), 13).unwrap(),
            Loss::CrossEntropy,
        ),
        ("dense_add_mean+reshape", imprinted, Loss::CrossEntropy),
        (
            "unet_lite",
            Model::init(&ModelSpec::unet_lite(&[1, 8, 8], 2, 3), 14).unwrap(),
            Loss::weighted_segmentation(),
        ),
    ]
}

pub fn layer_names(models: &[(&str, Model, Loss)]) -> Vec<&'static str> {
    let mut names: Vec<&'static str> = models.iter().flat_map(|(_, m, _)| m.spec.layers.iter().map(LayerSpec::name)).collect();
    names.sort();
    names.dedup();
    names
}

fn random_input(model: &Model, rng: &mut Rng) -> (Tensor, Target) {
    let shape = model.spec.input_shape.clone();
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.normal()).collect()).unwrap();
    let out = model.spec.output_shape().unwrap();
    let target = if out.len() == 3 {
        let (c, h, w) = (out[0], out[1], out[2]);
        Target::Mask(Tensor::new(vec![h, w], (0..h * w).map(|_| rng.below(c) as f64).collect()).unwrap())
    } else {
        Target::Class(rng.below(out[0]))
    };
    (x, target)
}

/// Worst relative error over a few random inputs, all coordinates.
pub fn max_gradient_error(model: &Model, loss: &Loss, inputs: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let (x, t) = random_input(model, &mut rng);
        let r = gradient_check(model, &x, &t, loss, usize::MAX, 1e-5, &mut rng).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    worst
}

pub fn clean_zoo() -> Vec<Model> {
    let specs = [
        ModelSpec::mlp(&[1, 8, 8], &[6], 2),
        ModelSpec::mlp(&[1, 8, 8], &[16, 8], 3),
        ModelSpec::mlp(&[1, 16, 16], &[32], 2),
        ModelSpec::mlp(&[3, 8, 8], &[10], 4),
        ModelSpec::cnn(&[1, 8, 8], 3, 2),
        ModelSpec::cnn(&[1, 16, 16], 4, 2),
        ModelSpec::cnn(&[3, 8, 8], 2, 5),
        ModelSpec::unet_lite(&[1, 8, 8], 2, 3),
        ModelSpec::unet_lite(&[1, 32, 32], 4, 3),
    ];
    specs.iter().enumerate().map(|(i, s)| Model::init(s, i as u64).unwrap()).collect()
}

/// Every clean model with imprint blocks of several sizes, plus copies whose
/// first-layer rows are permuted.
pub fn modified_zoo() -> Vec<Model> {
    let mut out = Vec::new();
    for m in clean_zoo() {
        let pixels: usize = m.spec.input_shape.iter().product();
        for bins in [1, 4, 10, 16] {
            if 4 * bins > pixels {
                continue;
            }
            let bad = implant(&m, bins).unwrap();
            let mut shuffled = bad.clone();
            let w = &mut shuffled.params.layers[1][0];
            let mut rows: Vec<Vec<f64>> = w.data().chunks(pixels).map(<[f64]>::to_vec).collect();
            rows.rotate_left(1);
            *w = Tensor::new(vec![bins, pixels], rows.concat()).unwrap();
            out.push(bad);
            out.push(shuffled);
        }
    }
    out
}
