//! Central finite-difference check of analytic parameter gradients.

use serde::Serialize;

use super::loss::{sample_gradient, sample_loss, Loss};
use super::model::Model;
use crate::datagen::Target;
use crate::error::Result;
use crate::numerics::{Rng, Tensor};

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(layer, tensor, element)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize)>,
}

/// Compares `coords` randomly chosen parameter coordinates (all of them if
/// the model is smaller) against `(L(θ+h) − L(θ−h)) / 2h`. The error is
/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn gradient_check(
    model: &Model,
    x: &Tensor,
    target: &Target,
    loss: &Loss,
    coords: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let (_, analytic) = sample_gradient(model, x, target, loss)?;
    let mut index = Vec::new();
    for (l, layer) in model.params.layers.iter().enumerate() {
        for (t, tensor) in layer.iter().enumerate() {
            index.extend((0..tensor.len()).map(|e| (l, t, e)));
        }
    }
    if index.len() > coords {
        rng.shuffle(&mut index);
        index.truncate(coords);
    }
    let mut probe = model.clone();
    let mut report = GradCheck {
        checked: index.len(),
        max_rel_error: 0.0,
        worst: None,
    };
    for &(l, t, e) in &index {
        let orig = model.params.layers[l][t].data()[e];
        probe.params.layers[l][t].data_mut()[e] = orig + step;
        let up = sample_loss(&probe, x, target, loss)?;
        probe.params.layers[l][t].data_mut()[e] = orig - step;
        let down = sample_loss(&probe, x, target, loss)?;
        probe.params.layers[l][t].data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.layers[l][t].data()[e];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((l, t, e));
        }
    }
    Ok(report)
}
