use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::model::ParamSet;

/// `min(1, C / ‖g‖)`, exactly 1 inside the ball so unclipped gradients
/// keep their bits.
pub fn clip_factor(norm: f64, clip_norm: f64) -> f64 {
    if norm <= clip_norm {
        1.0
    } else {
        clip_norm / norm
    }
}

/// Clips `g` to global ℓ₂ norm `clip_norm` and returns the factor applied.
pub fn clip_in_place(g: &mut ParamSet, clip_norm: f64) -> f64 {
    let f = clip_factor(g.norm(), clip_norm);
    if f != 1.0 {
        g.scale_in_place(f);
    }
    f
}

fn check(clip_norm: f64, sigma: f64) -> Result<()> {
    if !(clip_norm > 0.0) {
        return Err(Error::param(format!("clip norm must be > 0, got {clip_norm}")));
    }
    if !(sigma >= 0.0) || sigma.is_infinite() {
        return Err(Error::param(format!("noise multiplier must be finite and >= 0, got {sigma}")));
    }
    if sigma > 0.0 && clip_norm.is_infinite() {
        return Err(Error::param("noise needs a finite clip norm"));
    }
    Ok(())
}

/// Clip every per-sample gradient, sum, add `N(0, (σC)²)` per coordinate
/// and divide by the batch size.
pub fn clip_and_noise(grads: &[ParamSet], clip_norm: f64, sigma: f64, rng: &mut Rng) -> Result<ParamSet> {
    let first = grads.first().ok_or_else(|| Error::param("empty batch"))?;
    privatize(grads, first, clip_norm, sigma, grads.len() as f64, rng)
}

/// General form used by training: `layout` supplies the parameter shapes
/// when a Poisson batch comes out empty, and `denominator` is the expected
/// batch size.
pub fn privatize(
    grads: &[ParamSet],
    layout: &ParamSet,
    clip_norm: f64,
    sigma: f64,
    denominator: f64,
    rng: &mut Rng,
) -> Result<ParamSet> {
    check(clip_norm, sigma)?;
    if !(denominator > 0.0) {
        return Err(Error::param(format!("denominator must be > 0, got {denominator}")));
    }
    let mut sum = ParamSet::zeros_like(layout);
    for g in grads {
        let f = clip_factor(g.norm(), clip_norm);
        sum.axpy(f, g)?;
    }
    if sigma > 0.0 {
        add_noise(&mut sum, sigma * clip_norm, rng);
    }
    sum.scale_in_place(1.0 / denominator);
    Ok(sum)
}

/// Adds `N(0, std²)` to every coordinate, layer by layer in storage order.
pub fn add_noise(g: &mut ParamSet, std: f64, rng: &mut Rng) {
    for t in g.tensors_mut() {
        for v in t.data_mut() {
            *v += std * rng.normal();
        }
    }
}
