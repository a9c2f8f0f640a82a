//! Scoring reconstructions against the samples they came from.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Fraction of a dynamic range below which a pixel counts as black.
pub const DARK_LEVEL: f64 = 1.0 / 512.0;
/// A sample is kept when strictly more than this fraction of its pixels is lit.
pub const MIN_LIT_FRACTION: f64 = 0.1;
pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 0.8;
/// Best SSIM assigned when there is nothing to match against.
pub const WORST_SSIM: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::param(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0 && self.dynamic_range > 0.0 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::param("SSIM sigma, range and constants must be > 0"));
        }
        Ok(())
    }

    /// Normalized separable Gaussian taps. Images smaller than the window
    /// get the largest odd window that fits.
    fn taps(&self, h: usize, w: usize) -> Vec<f64> {
        let mut side = self.window.min(h).min(w);
        if side.is_multiple_of(2) {
            side -= 1;
        }
        let r = (side / 2) as f64;
        let raw: Vec<f64> = (0..side)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::dim(format!("SSIM expects [H, W] or [C, H, W], got {shape:?}"))),
    }
}

/// Mean SSIM over all valid window positions, averaged across channels.
pub fn ssim(a: &Tensor, b: &Tensor, config: &SsimConfig) -> Result<f64> {
    config.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("SSIM of {:?} and {:?}", a.shape(), b.shape())));
    }
    let (ch, h, w) = plane_dims(a.shape())?;
    if h == 0 || w == 0 {
        return Err(Error::dim("SSIM of an empty image"));
    }
    let taps = config.taps(h, w);
    let c1 = (config.k1 * config.dynamic_range).powi(2);
    let c2 = (config.k2 * config.dynamic_range).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..ch {
        let x = &a.data()[c * plane..(c + 1) * plane];
        let y = &b.data()[c * plane..(c + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let sxx = filter_valid(&xx, h, w, &taps);
        let syy = filter_valid(&yy, h, w, &taps);
        let sxy = filter_valid(&xy, h, w, &taps);
        let n = mx.len() as f64;
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / n;
    }
    Ok(total / ch as f64)
}

/// Separable correlation keeping only positions where the window fits.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(t, c)| c * x[y * w + ox + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(t, c)| c * rows[(oy + t) * ow + ox]).sum();
        }
    }
    out
}

/// Whether enough of the image is lit. A pixel is lit when any channel
/// reaches `DARK_LEVEL · range`.
pub fn is_bright_enough(image: &Tensor, dynamic_range: f64) -> Result<bool> {
    let (ch, h, w) = plane_dims(image.shape())?;
    let plane = h * w;
    let level = DARK_LEVEL * dynamic_range;
    let lit = (0..plane)
        .filter(|&p| (0..ch).any(|c| image.data()[c * plane + p] >= level))
        .count();
    Ok(lit as f64 > MIN_LIT_FRACTION * plane as f64)
}

/// Indices of raw-range images that pass the dark-image rule.
pub fn dark_filter(images: &[Tensor], dynamic_range: f64) -> Result<Vec<usize>> {
    let mut kept = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if is_bright_enough(img, dynamic_range)? {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `1 − SSIM`.
    #[default]
    Ssim,
    /// Euclidean distance between pixel vectors.
    L2,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::Ssim => "1-ssim",
            Distance::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub sample: usize,
    pub best_recon: Option<usize>,
    /// SSIM to the assigned reconstruction, or `WORST_SSIM` without one.
    pub best_ssim: f64,
    #[serde(with = "crate::serde_ext")]
    pub distance: f64,
    /// Passed the dark-image rule.
    pub kept: bool,
}

/// Assigns every sample its nearest reconstruction; the lowest index wins
/// ties and reconstructions may be reused.
pub fn match_reconstructions(
    samples: &[Tensor],
    reconstructions: &[Tensor],
    config: &SsimConfig,
    distance: Distance,
) -> Result<Vec<MatchResult>> {
    config.validate()?;
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let kept = is_bright_enough(s, config.dynamic_range)?;
            let mut best: Option<(usize, f64, f64)> = None;
            for (j, r) in reconstructions.iter().enumerate() {
                let sim = ssim(s, r, config)?;
                let d = match distance {
                    Distance::Ssim => 1.0 - sim,
                    Distance::L2 => s.sub(r)?.norm(),
                };
                if best.is_none_or(|(_, bd, _)| d < bd) {
                    best = Some((j, d, sim));
                }
            }
            Ok(match best {
                Some((j, d, sim)) => MatchResult {
                    sample: i,
                    best_recon: Some(j),
                    best_ssim: sim,
                    distance: d,
                    kept,
                },
                None => MatchResult {
                    sample: i,
                    best_recon: None,
                    best_ssim: WORST_SSIM,
                    distance: f64::INFINITY,
                    kept,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    /// NaN when no sample was kept.
    #[serde(with = "crate::serde_ext")]
    pub fraction: f64,
    pub kept: usize,
    pub successes: usize,
}

/// Share of kept samples whose best SSIM is strictly above `threshold`.
pub fn success_rate(matches: &[MatchResult], threshold: f64) -> Result<SuccessRate> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let kept: Vec<_> = matches.iter().filter(|m| m.kept).collect();
    let successes = kept.iter().filter(|m| m.best_ssim > threshold).count();
    let fraction = if kept.is_empty() {
        f64::NAN
    } else {
        successes as f64 / kept.len() as f64
    };
    Ok(SuccessRate {
        fraction,
        kept: kept.len(),
        successes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub grid: Vec<f64>,
    pub fraction: Vec<f64>,
}

impl CumulativeCurve {
    /// Value at the largest grid point not above `error`.
    pub fn at(&self, error: f64) -> Option<f64> {
        let i = self.grid.partition_point(|&g| g <= error);
        (i > 0).then(|| self.fraction[i - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid,fraction\n");
        for (g, f) in self.grid.iter().zip(&self.fraction) {
            let _ = writeln!(out, "{g},{f}");
        }
        out
    }
}

/// `0, 0.01, …, 1`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Share of kept samples with SSIM error `1 − best SSIM` at or below each
/// grid point. Zero kept samples give an all-zero curve.
pub fn cumulative_curve(matches: &[MatchResult], grid: &[f64]) -> Result<CumulativeCurve> {
    if grid.iter().any(|g| !(0.0..=1.0).contains(g)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("curve grid must be strictly ascending within [0, 1]"));
    }
    let mut errors: Vec<f64> = matches.iter().filter(|m| m.kept).map(|m| 1.0 - m.best_ssim).collect();
    errors.sort_by(f64::total_cmp);
    let n = errors.len();
    let fraction = grid
        .iter()
        .map(|&g| {
            if n == 0 {
                0.0
            } else {
                errors.partition_point(|&e| e <= g) as f64 / n as f64
            }
        })
        .collect();
    Ok(CumulativeCurve {
        grid: grid.to_vec(),
        fraction,
    })
}

pub fn matches_to_csv(matches: &[MatchResult]) -> String {
    let mut out = String::from("sample_id,best_recon_id,best_ssim,kept\n");
    for m in matches {
        let recon = m.best_recon.map_or(String::new(), |j| j.to_string());
        let _ = writeln!(out, "{},{},{},{}", m.sample, recon, m.best_ssim, m.kept);
    }
    out
}
