use serde::{Deserialize, Serialize};

use super::model::{Model, ParamSet};
use crate::datagen::Target;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Class weights for background, organ and tumour pixels.
pub const DEFAULT_SEGMENTATION_WEIGHTS: [f64; 3] = [0.1, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    /// Per-pixel cross-entropy, averaged with the weight of each pixel's
    /// true class.
    PixelCrossEntropy { class_weights: Vec<f64> },
}

impl Loss {
    pub fn weighted_segmentation() -> Self {
        Loss::PixelCrossEntropy {
            class_weights: DEFAULT_SEGMENTATION_WEIGHTS.to_vec(),
        }
    }

    /// Loss value and its gradient with respect to the logits.
    pub fn evaluate(&self, logits: &Tensor, target: &Target) -> Result<(f64, Tensor)> {
        match (self, target) {
            (Loss::CrossEntropy, Target::Class(c)) => {
                if logits.rank() != 1 || *c >= logits.len() {
                    return Err(Error::dim(format!(
                        "class {c} with logits of shape {:?}",
                        logits.shape()
                    )));
                }
                let (lse, p) = softmax(logits.data());
                let loss = lse - logits.data()[*c];
                let mut g = p;
                g[*c] -= 1.0;
                Ok((loss, Tensor::vector(g)))
            }
            (Loss::PixelCrossEntropy { class_weights }, Target::Mask(mask)) => {
                pixel_cross_entropy(logits, mask, class_weights)
            }
            _ => Err(Error::param("loss does not fit the target type")),
        }
    }
}

/// `(log Σ exp z, softmax z)`, shifted by the maximum for stability.
fn softmax(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.into_iter().map(|v| v / s).collect())
}

fn pixel_cross_entropy(logits: &Tensor, mask: &Tensor, weights: &[f64]) -> Result<(f64, Tensor)> {
    let &[k, h, w] = logits.shape() else {
        return Err(Error::dim(format!("segmentation logits must be [K, H, W], got {:?}", logits.shape())));
    };
    if mask.shape() != [h, w] || weights.len() != k {
        return Err(Error::dim(format!(
            "mask {:?} / {} weights do not fit logits {:?}",
            mask.shape(),
            weights.len(),
            logits.shape()
        )));
    }
    let hw = h * w;
    let z = logits.data();
    let mut grad = vec![0.0; k * hw];
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    let mut col = vec![0.0; k];
    for px in 0..hw {
        let c = mask.data()[px] as usize;
        if c >= k {
            return Err(Error::param(format!("mask class {c} outside 0..{k}")));
        }
        for (j, v) in col.iter_mut().enumerate() {
            *v = z[j * hw + px];
        }
        let (lse, p) = softmax(&col);
        let wc = weights[c];
        total += wc * (lse - col[c]);
        weight_sum += wc;
        for j in 0..k {
            grad[j * hw + px] = wc * (p[j] - if j == c { 1.0 } else { 0.0 });
        }
    }
    if !(weight_sum > 0.0) {
        return Err(Error::param("all pixels carry zero class weight"));
    }
    let g = Tensor::new(vec![k, h, w], grad)?.scale(1.0 / weight_sum);
    Ok((total / weight_sum, g))
}

pub fn sample_loss(model: &Model, x: &Tensor, target: &Target, loss: &Loss) -> Result<f64> {
    let logits = model.predict(x)?;
    Ok(loss.evaluate(&logits, target)?.0)
}

/// Loss and parameter gradient for a single example.
pub fn sample_gradient(model: &Model, x: &Tensor, target: &Target, loss: &Loss) -> Result<(f64, ParamSet)> {
    let (logits, cache) = model.forward(x)?;
    let (value, g) = loss.evaluate(&logits, target)?;
    let (grads, _) = model.backward(&cache, &g)?;
    Ok((value, grads))
}

pub fn per_sample_gradients(
    model: &Model,
    batch: &[(&Tensor, &Target)],
    loss: &Loss,
) -> Result<Vec<ParamSet>> {
    batch
        .iter()
        .map(|(x, t)| sample_gradient(model, x, t, loss).map(|(_, g)| g))
        .collect()
}

/// Mean of the per-sample gradients, summed in batch order.
pub fn batch_gradient(model: &Model, batch: &[(&Tensor, &Target)], loss: &Loss) -> Result<ParamSet> {
    let per = per_sample_gradients(model, batch, loss)?;
    mean_of(&per).ok_or_else(|| Error::param("empty batch"))
}

pub(crate) fn mean_of(grads: &[ParamSet]) -> Option<ParamSet> {
    let mut acc = ParamSet::zeros_like(grads.first()?);
    for g in grads {
        acc.add_assign(g).expect("per-sample gradients share a layout");
    }
    acc.scale_in_place(1.0 / grads.len() as f64);
    Some(acc)
}
