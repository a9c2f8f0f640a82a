//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step divergences are computed at integer orders with the binomial
//! expansion of `E_{μ0}[(μ/μ0)^α]` in log space. Fractional orders linearly
//! interpolate `log A_α = (α - 1)·ε(α)` between the neighbouring integers;
//! `log A_α` is convex in `α`, so the interpolant never under-reports.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Per-step divergence reported for a mechanism without noise.
pub const OVERFLOW: f64 = f64::INFINITY;

/// ε above this value is reported as [`Epsilon::Overflow`].
pub const DEFAULT_EPSILON_CAP: f64 = 1e15;

/// Noise-multiplier bracket searched by [`calibrate_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (1e-4, 1e3);
/// Bracket used for targets at or above [`EXTREME_EPSILON`].
pub const WIDE_SIGMA_BRACKET: (f64, f64) = (1e-10, 1e4);
pub const EXTREME_EPSILON: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::param(format!(
                "noise multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::param(format!(
                "clip norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::param(format!(
                "sampling rate must lie in (0, 1], got {}",
                self.sampling_rate
            )));
        }
        check_delta(self.delta)
    }

    pub fn curve(&self) -> RdpCurve {
        compose(
            &step_curve(self.noise_multiplier, self.sampling_rate, &default_orders()),
            self.steps,
        )
    }

    pub fn spent(&self) -> Result<PrivacySpent> {
        self.validate()?;
        to_epsilon_delta(&self.curve(), self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Orders `1.25, 1.5, …, 4`, `5, 6, …, 64` and `128, 256, 512`.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (1..=12).map(|k| 1.0 + 0.25 * k as f64).collect();
    orders.extend((5..=64).map(f64::from));
    orders.extend([128.0, 256.0, 512.0]);
    orders
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(Error::param("orders and values differ in length"));
        }
        if orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::param("RDP orders must exceed 1"));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("RDP orders must be strictly ascending"));
        }
        if values.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::param("RDP values must be >= 0"));
        }
        Ok(RdpCurve { orders, values })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// No divergence at any order: the output carries no information.
    pub fn is_zero(&self) -> bool {
        !self.values.is_empty() && self.values.iter().all(|&v| v == 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.orders.iter().copied().zip(self.values.iter().copied())
    }
}

/// ε of an (ε, δ) guarantee, or a marker that it exceeded the cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    Overflow,
}

impl Epsilon {
    pub fn value(self) -> f64 {
        match self {
            Epsilon::Finite(e) => e,
            Epsilon::Overflow => f64::INFINITY,
        }
    }

    pub fn is_overflow(self) -> bool {
        matches!(self, Epsilon::Overflow)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(e) => write!(f, "{e}"),
            Epsilon::Overflow => f.write_str("overflow"),
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Finite(e) => s.serialize_f64(*e),
            Epsilon::Overflow => s.serialize_str("overflow"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(e) if e >= 0.0 => Ok(Epsilon::Finite(e)),
            Repr::Num(e) => Err(de::Error::custom(format!("negative epsilon {e}"))),
            Repr::Str(s) if s == "overflow" => Ok(Epsilon::Overflow),
            Repr::Str(s) => Err(de::Error::custom(format!("unknown epsilon marker {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: Epsilon,
    pub delta: f64,
    /// Order attaining the minimum, when one exists.
    pub order: Option<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log E_{μ0}[(μ/μ0)^α]` for integer `α ≥ 2`, `0 < q < 1`.
fn log_a_integer(sigma: f64, q: f64, alpha: u32) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let a = f64::from(alpha);
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = f64::from(i);
        if i > 0 {
            log_binom += ((a - fi + 1.0) / fi).ln();
        }
        let term = log_binom + fi * log_q + (a - fi) * log_1mq + (fi * fi - fi) * inv_two_var;
        acc = log_add(acc, term);
    }
    // Rounding can leave a tiny negative value where the true one is >= 0.
    acc.max(0.0)
}

/// Per-step Rényi divergence of order `alpha` for noise multiplier `sigma`
/// and Poisson sampling rate `q`. Returns [`OVERFLOW`] when `sigma == 0`.
pub fn rdp_step(sigma: f64, q: f64, alpha: f64) -> f64 {
    assert!(alpha > 1.0, "RDP order must exceed 1, got {alpha}");
    if q <= 0.0 || sigma.is_infinite() {
        return 0.0;
    }
    if sigma <= 0.0 {
        return OVERFLOW;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let lo = alpha.floor();
    let log_a = if lo == alpha {
        log_a_integer(sigma, q, alpha as u32)
    } else {
        let log_lo = if lo <= 1.0 {
            0.0
        } else {
            log_a_integer(sigma, q, lo as u32)
        };
        let log_hi = log_a_integer(sigma, q, lo as u32 + 1);
        let f = alpha - lo;
        (1.0 - f) * log_lo + f * log_hi
    };
    log_a / (alpha - 1.0)
}

pub fn step_curve(sigma: f64, q: f64, orders: &[f64]) -> RdpCurve {
    RdpCurve {
        orders: orders.to_vec(),
        values: orders.iter().map(|&a| rdp_step(sigma, q, a)).collect(),
    }
}

/// Composition over `steps` identical mechanisms.
pub fn compose(step: &RdpCurve, steps: u64) -> RdpCurve {
    let t = steps as f64;
    RdpCurve {
        orders: step.orders.clone(),
        values: step
            .values
            .iter()
            .map(|&v| if steps == 0 { 0.0 } else { v * t })
            .collect(),
    }
}

pub fn to_epsilon_delta(curve: &RdpCurve, delta: f64) -> Result<PrivacySpent> {
    to_epsilon_delta_capped(curve, delta, DEFAULT_EPSILON_CAP)
}

/// `ε = min_α ε(α) + log(1/δ)/(α − 1)`.
pub fn to_epsilon_delta_capped(curve: &RdpCurve, delta: f64, cap: f64) -> Result<PrivacySpent> {
    if curve.is_empty() {
        return Err(Error::param("cannot convert an empty RDP curve"));
    }
    check_delta(delta)?;
    if curve.is_zero() {
        return Ok(PrivacySpent {
            epsilon: Epsilon::Finite(0.0),
            delta,
            order: None,
        });
    }
    let log_inv_delta = -delta.ln();
    let best = curve
        .iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(a, v)| (a, v + log_inv_delta / (a - 1.0)))
        .fold(None, |best: Option<(f64, f64)>, (a, e)| match best {
            Some((_, be)) if be <= e => best,
            _ => Some((a, e)),
        });
    Ok(match best {
        Some((a, e)) if e <= cap => PrivacySpent {
            epsilon: Epsilon::Finite(e),
            delta,
            order: Some(a),
        },
        _ => PrivacySpent {
            epsilon: Epsilon::Overflow,
            delta,
            order: None,
        },
    })
}

/// ε spent by `steps` rounds of the subsampled Gaussian mechanism.
pub fn epsilon_for(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<PrivacySpent> {
    let curve = compose(&step_curve(sigma, q, &default_orders()), steps);
    to_epsilon_delta(&curve, delta)
}

/// Noise multiplier whose ε after `steps` rounds at rate `q` lies in
/// `[0.99·target, target]`.
///
/// The search bisects `log σ` to convergence and returns the upper end of
/// the final bracket, so the result never exceeds the target. Targets of
/// [`EXTREME_EPSILON`] and above use [`WIDE_SIGMA_BRACKET`].
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_epsilon > 0.0) || !target_epsilon.is_finite() {
        return Err(Error::param(format!(
            "target epsilon must be positive and finite, got {target_epsilon}"
        )));
    }
    if target_epsilon >= DEFAULT_EPSILON_CAP {
        return Err(Error::Calibration(format!(
            "target epsilon {target_epsilon:e} is at or above the accountant cap {DEFAULT_EPSILON_CAP:e}"
        )));
    }
    check_delta(delta)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::param(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    let (lo_sigma, hi_sigma) = if target_epsilon >= EXTREME_EPSILON {
        WIDE_SIGMA_BRACKET
    } else {
        SIGMA_BRACKET
    };
    let orders = default_orders();
    let eps_at = |log_sigma: f64| -> Result<f64> {
        let curve = compose(&step_curve(log_sigma.exp(), q, &orders), steps);
        Ok(to_epsilon_delta(&curve, delta)?.epsilon.value())
    };
    let unreachable = |why: &str| {
        Error::Calibration(format!(
            "target epsilon {target_epsilon} unreachable for sigma in [{lo_sigma:e}, {hi_sigma:e}] ({why})"
        ))
    };

    let mut lo = lo_sigma.ln();
    let mut hi = hi_sigma.ln();
    if eps_at(hi)? > target_epsilon {
        return Err(unreachable("even the largest noise spends more"));
    }
    if eps_at(lo)? < 0.99 * target_epsilon {
        return Err(unreachable("even the smallest noise spends less"));
    }
    // ε is nonincreasing in σ: keep ε(lo) > target >= ε(hi).
    for _ in 0..200 {
        if hi - lo < 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let achieved = eps_at(hi)?;
    if achieved < 0.99 * target_epsilon {
        // ε jumps across the band: possible only at order-switch kinks far
        // steeper than anything the subsampled Gaussian produces.
        return Err(unreachable("no noise level lands inside the 1% band"));
    }
    Ok(hi.exp())
}
