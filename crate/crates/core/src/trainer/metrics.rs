use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mcc {
    pub value: f64,
    /// All predictions or all labels fall into a single class.
    pub degenerate: bool,
}

/// Multi-class MCC (Gorodkin). `matrix[true][pred]` holds counts.
pub fn mcc(matrix: &[Vec<u64>]) -> Result<Mcc> {
    let k = matrix.len();
    if k < 2 || matrix.iter().any(|r| r.len() != k) {
        return Err(Error::dim(format!("confusion matrix must be square with k >= 2, got {k} rows")));
    }
    let mut trace = 0.0;
    let mut total = 0.0;
    let mut t = vec![0.0; k];
    let mut p = vec![0.0; k];
    for (i, row) in matrix.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let c = c as f64;
            total += c;
            t[i] += c;
            p[j] += c;
            if i == j {
                trace += c;
            }
        }
    }
    let cov_tp = trace * total - t.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let cov_pp = total * total - p.iter().map(|v| v * v).sum::<f64>();
    let cov_tt = total * total - t.iter().map(|v| v * v).sum::<f64>();
    if cov_pp <= 0.0 || cov_tt <= 0.0 {
        return Ok(Mcc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Mcc {
        value: (cov_tp / (cov_pp.sqrt() * cov_tt.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::dim("truth and prediction lengths differ"));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&a, &b) in truth.iter().zip(pred) {
        if a >= classes || b >= classes {
            return Err(Error::param(format!("class index outside 0..{classes}")));
        }
        m[a][b] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dice {
    pub value: f64,
    /// Neither mask contains the class.
    pub empty: bool,
}

/// Dice overlap over pooled pixel counts.
pub fn dice_from_counts(intersection: u64, pred: u64, truth: u64) -> Dice {
    if pred + truth == 0 {
        Dice { value: 1.0, empty: true }
    } else {
        Dice {
            value: 2.0 * intersection as f64 / (pred + truth) as f64,
            empty: false,
        }
    }
}

pub fn dice(pred: &Tensor, truth: &Tensor, class_id: usize) -> Result<Dice> {
    let (i, a, b) = dice_counts(pred, truth, class_id)?;
    Ok(dice_from_counts(i, a, b))
}

/// `(|A ∩ B|, |A|, |B|)` for the pixels labelled `class_id`.
pub fn dice_counts(pred: &Tensor, truth: &Tensor, class_id: usize) -> Result<(u64, u64, u64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!("mask shapes {:?} and {:?}", pred.shape(), truth.shape())));
    }
    let c = class_id as f64;
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (in_p, in_t) = (p == c, t == c);
        a += u64::from(in_p);
        b += u64::from(in_t);
        inter += u64::from(in_p && in_t);
    }
    Ok((inter, a, b))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    match xs.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (xs[0], 0.0),
        _ => {
            let (m, v) = mean_var(xs);
            (m, v.sqrt())
        }
    }
}

/// Two-sided Welch t-test p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("each sample needs at least two values"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { f64::MIN_POSITIVE });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::param(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}
