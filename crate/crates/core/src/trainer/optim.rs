use serde::{Deserialize, Serialize};

use super::model::ParamSet;
use crate::error::{Error, Result};

pub const NADAM_BETA1: f64 = 0.9;
pub const NADAM_BETA2: f64 = 0.999;
pub const NADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Nadam,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Nadam { m: ParamSet, v: ParamSet, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Nadam => OptimizerState::Nadam {
                m: ParamSet::zeros_like(params),
                v: ParamSet::zeros_like(params),
                t: 0,
            },
        }
    }

    /// Applies one update to `params` in place.
    ///
    /// NAdam uses Dozat's Nesterov form: the first moment is bias-corrected
    /// with the look-ahead factor `1 − β₁^{t+1}` and the raw gradient with
    /// `1 − β₁^t`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::param(format!("learning rate must be > 0, got {lr}")));
        }
        let mut next = params.clone();
        match self {
            OptimizerState::Sgd => next.axpy(-lr, grad)?,
            OptimizerState::Nadam { m, v, t } => {
                *t += 1;
                let tf = *t as i32;
                let (b1, b2) = (NADAM_BETA1, NADAM_BETA2);
                let c_next = 1.0 - b1.powi(tf + 1);
                let c_now = 1.0 - b1.powi(tf);
                let c2 = 1.0 - b2.powi(tf);
                let tensors = next.tensors_mut().zip(grad.tensors()).zip(m.tensors_mut().zip(v.tensors_mut()));
                for ((w, g), (mt, vt)) in tensors {
                    if w.shape() != g.shape() {
                        return Err(Error::dim("gradient layout differs from parameters"));
                    }
                    let (wd, md, vd) = (w.data_mut(), mt.data_mut(), vt.data_mut());
                    for (i, &gi) in g.data().iter().enumerate() {
                        md[i] = b1 * md[i] + (1.0 - b1) * gi;
                        vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                        let m_hat = b1 * md[i] / c_next + (1.0 - b1) * gi / c_now;
                        let v_hat = vd[i] / c2;
                        wd[i] -= lr * m_hat / (v_hat.sqrt() + NADAM_EPS);
                    }
                }
            }
        }
        if next.contains_non_finite() {
            return Err(Error::training("optimizer step", "non-finite parameter update"));
        }
        *params = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar(v: f64) -> ParamSet {
        ParamSet {
            layers: vec![vec![Tensor::vector(vec![v])]],
        }
    }

    #[test]
    fn sgd_step() {
        let mut w = scalar(1.0);
        let mut s = OptimizerState::new(OptimizerKind::Sgd, &w);
        s.step(&mut w, &scalar(1.0), 0.1).unwrap();
        assert!((w.flatten()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nadam_first_step_by_hand() {
        // m1 = 0.1, v1 = 0.001; m̂ = 0.9·0.1/(1−0.81) + 0.1/(1−0.9) = 28/19,
        // v̂ = 1, so the step is lr·(28/19)/(1 + 1e-8).
        let mut w = scalar(0.0);
        let mut s = OptimizerState::new(OptimizerKind::Nadam, &w);
        s.step(&mut w, &scalar(1.0), 2e-3).unwrap();
        let expected = -2e-3 * (28.0 / 19.0) / (1.0 + 1e-8);
        assert!((w.flatten()[0] - expected).abs() < 1e-15, "{}", w.flatten()[0]);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Nadam] {
            let mut w = scalar(0.75);
            let mut s = OptimizerState::new(kind, &w);
            for _ in 0..3 {
                s.step(&mut w, &scalar(0.0), 0.01).unwrap();
            }
            assert!((w.flatten()[0] - 0.75).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let mut w = scalar(0.0);
        let mut s = OptimizerState::new(OptimizerKind::Sgd, &w);
        let err = s.step(&mut w, &scalar(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
        assert_eq!(w, scalar(0.0));
    }
}
