//! Hölder (power) mean of token importance ratios and the quantities derived
//! from it: the per-token gradient weights `W_t(p) = r_t^p / Σ_k r_k^p`, their
//! sensitivities in `p`, and the concentration measures (Shannon entropy and
//! Herfindahl-Hirschman index) of the weight distribution.
//!
//! Everything is evaluated on log-ratios. Powers are never formed directly:
//! `Σ r^p` becomes a max-shifted log-sum-exp of `p·Δ`, and the weights are a
//! max-shifted softmax of the same vector. Orders with `|p|` below the zero
//! threshold take the geometric branch, where the mean is `exp(mean Δ)` and
//! the weights are exactly uniform.

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Result};

/// Orders with `|p|` below this are treated as `p = 0`.
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-6;

/// Relative tolerance used to decide argmax/argmin ties in [`limit_weights`].
pub const DEFAULT_TIE_TOLERANCE: f64 = 1e-12;

/// Tolerance on `Σ W = 1` accepted by [`WeightDistribution::new`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-10;

/// The order `p` of a Hölder mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderOrder {
    p: f64,
    zero_threshold: f64,
}

impl HolderOrder {
    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() {
            return Err(DomainError::InvalidOrder(p));
        }
        Ok(Self {
            p,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
        })
    }

    /// Geometric mean order (`p = 0`).
    pub fn geometric() -> Self {
        Self {
            p: 0.0,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
        }
    }

    pub fn with_zero_threshold(mut self, zero_threshold: f64) -> Result<Self> {
        if !(zero_threshold > 0.0 && zero_threshold.is_finite()) {
            return Err(DomainError::InvalidThreshold(zero_threshold));
        }
        self.zero_threshold = zero_threshold;
        Ok(self)
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn zero_threshold(&self) -> f64 {
        self.zero_threshold
    }

    /// True when this order routes to the geometric-mean branch.
    pub fn is_geometric(&self) -> bool {
        self.p.abs() < self.zero_threshold
    }
}

/// Strictly positive, finite importance ratios of one rollout.
///
/// Stored as natural-log ratios since every computation happens in log-space.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSequence {
    log_ratios: Vec<f64>,
}

impl RatioSequence {
    pub fn new(ratios: &[f64]) -> Result<Self> {
        if ratios.is_empty() {
            return Err(DomainError::Empty);
        }
        let mut log_ratios = Vec::with_capacity(ratios.len());
        for (index, &value) in ratios.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DomainError::InvalidRatio { index, value });
            }
            log_ratios.push(value.ln());
        }
        Ok(Self { log_ratios })
    }

    pub fn from_log_ratios(log_ratios: Vec<f64>) -> Result<Self> {
        if log_ratios.is_empty() {
            return Err(DomainError::Empty);
        }
        if let Some((index, &value)) = log_ratios.iter().enumerate().find(|(_, d)| !d.is_finite()) {
            return Err(DomainError::InvalidLogRatio { index, value });
        }
        Ok(Self { log_ratios })
    }

    pub fn len(&self) -> usize {
        self.log_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_ratios.is_empty()
    }

    pub fn log_ratios(&self) -> &[f64] {
        &self.log_ratios
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.log_ratios.iter().map(|d| d.exp()).collect()
    }

    /// True when all ratios are bitwise equal in log-space.
    pub fn is_uniform(&self) -> bool {
        let first = self.log_ratios[0];
        self.log_ratios.iter().all(|&d| d == first)
    }
}

/// Per-token log-ratios `Δ_t = log π_θ − log π_old` together with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatioSequence {
    log_ratios: Vec<f64>,
    mask: Vec<bool>,
}

impl LogRatioSequence {
    /// Masked positions may hold any value; they are never read.
    pub fn new(log_ratios: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if log_ratios.len() != mask.len() {
            return Err(DomainError::LengthMismatch {
                what: "mask",
                expected: log_ratios.len(),
                got: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(DomainError::AllMasked);
        }
        for (index, (&value, &valid)) in log_ratios.iter().zip(&mask).enumerate() {
            if valid && !value.is_finite() {
                return Err(DomainError::InvalidLogRatio { index, value });
            }
        }
        Ok(Self { log_ratios, mask })
    }

    /// All positions valid.
    pub fn unmasked(log_ratios: Vec<f64>) -> Result<Self> {
        let mask = vec![true; log_ratios.len()];
        if log_ratios.is_empty() {
            return Err(DomainError::Empty);
        }
        Self::new(log_ratios, mask)
    }

    pub fn log_ratios(&self) -> &[f64] {
        &self.log_ratios
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Number of valid positions, `|y|`.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The valid entries as a ratio sequence.
    pub fn valid(&self) -> RatioSequence {
        let log_ratios = self
            .log_ratios
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&d, _)| d)
            .collect();
        RatioSequence { log_ratios }
    }
}

/// A probability vector of per-token gradient weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDistribution {
    weights: Vec<f64>,
}

impl WeightDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(DomainError::Empty);
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(DomainError::Invalid(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(DomainError::Invalid(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(DomainError::Empty);
        }
        Ok(Self {
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }
}

/// Direction of the `p → ±∞` limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitDirection {
    /// `p → +∞`: mass moves onto the largest ratios.
    Up,
    /// `p → −∞`: mass moves onto the smallest ratios.
    Down,
}

/// `log Σ exp(x)` with the maximum shifted out.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `p·Δ`, or exactly uniform on the geometric branch.
pub(crate) fn softmax_weights(log_ratios: &[f64], order: HolderOrder) -> Vec<f64> {
    let n = log_ratios.len();
    if order.is_geometric() {
        return vec![1.0 / n as f64; n];
    }
    let p = order.p();
    let max = log_ratios
        .iter()
        .map(|&d| p * d)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_ratios.iter().map(|&d| (p * d - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

/// Log of the Hölder mean of `exp(Δ)`.
pub(crate) fn log_power_mean(log_ratios: &[f64], order: HolderOrder) -> f64 {
    let n = log_ratios.len() as f64;
    if order.is_geometric() {
        return log_ratios.iter().sum::<f64>() / n;
    }
    let p = order.p();
    (log_sum_exp(log_ratios.iter().map(|&d| p * d)) - n.ln()) / p
}

/// `log ρ_p`, the log of the Hölder mean.
pub fn log_holder_mean(ratios: &RatioSequence, order: HolderOrder) -> f64 {
    log_power_mean(ratios.log_ratios(), order)
}

/// The Hölder mean `ρ_p = ((1/n) Σ r_t^p)^{1/p}`, geometric at `p = 0`.
pub fn holder_mean(ratios: &RatioSequence, order: HolderOrder) -> f64 {
    log_holder_mean(ratios, order).exp()
}

/// Hölder mean of `exp(Δ_t)` over valid positions only.
pub fn holder_mean_masked(logs: &LogRatioSequence, order: HolderOrder) -> f64 {
    holder_mean(&logs.valid(), order)
}

/// Per-token gradient weights `W_t(p)`.
pub fn gradient_weights(ratios: &RatioSequence, order: HolderOrder) -> WeightDistribution {
    let weights = softmax_weights(ratios.log_ratios(), order);
    debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOLERANCE);
    WeightDistribution { weights }
}

/// `μ(p) = Σ_t W_t(p) log r_t`.
pub fn weighted_log_mean(ratios: &RatioSequence, order: HolderOrder) -> f64 {
    let logs = ratios.log_ratios();
    let weights = softmax_weights(logs, order);
    let mu: f64 = weights.iter().zip(logs).map(|(w, d)| w * d).sum();
    let (lo, hi) = min_max(logs);
    mu.clamp(lo, hi)
}

/// `∂W_t/∂p = W_t (log r_t − μ(p))`.
pub fn weight_p_derivative(
    ratios: &RatioSequence,
    order: HolderOrder,
    token_index: usize,
) -> Result<f64> {
    let logs = ratios.log_ratios();
    if token_index >= logs.len() {
        return Err(DomainError::IndexOutOfRange {
            index: token_index,
            len: logs.len(),
        });
    }
    let weights = softmax_weights(logs, order);
    let mu: f64 = weights.iter().zip(logs).map(|(w, d)| w * d).sum();
    Ok(weights[token_index] * (logs[token_index] - mu))
}

/// `∂μ/∂p`, which is the `W(p)`-weighted variance of the log-ratios.
pub fn mu_p_derivative(ratios: &RatioSequence, order: HolderOrder) -> f64 {
    let logs = ratios.log_ratios();
    let weights = softmax_weights(logs, order);
    weighted_variance(&weights, logs)
}

pub(crate) fn weighted_variance(weights: &[f64], values: &[f64]) -> f64 {
    let mean: f64 = weights.iter().zip(values).map(|(w, v)| w * v).sum();
    weights
        .iter()
        .zip(values)
        .map(|(w, v)| w * (v - mean) * (v - mean))
        .sum()
}

/// `−Σ W ln W`, with `0·ln 0 = 0`.
pub fn shannon_entropy(weights: &WeightDistribution) -> f64 {
    -weights
        .as_slice()
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.ln())
        .sum::<f64>()
}

/// `∂H/∂p = −p · Var_W(log r)`; zero inside the geometric band, where the weights are uniform.
pub fn entropy_p_derivative(ratios: &RatioSequence, order: HolderOrder) -> f64 {
    if order.is_geometric() {
        return 0.0;
    }
    -order.p() * mu_p_derivative(ratios, order)
}

/// Herfindahl-Hirschman index `Σ W²`.
pub fn hhi(weights: &WeightDistribution) -> f64 {
    weights.as_slice().iter().map(|w| w * w).sum()
}

/// Limit of `W(p)` as `p → ±∞`: uniform over the argmax (argmin) set.
pub fn limit_weights(ratios: &RatioSequence, direction: LimitDirection) -> WeightDistribution {
    limit_weights_with_tolerance(ratios, direction, DEFAULT_TIE_TOLERANCE)
}

pub fn limit_weights_with_tolerance(
    ratios: &RatioSequence,
    direction: LimitDirection,
    tie_tolerance: f64,
) -> WeightDistribution {
    let logs = ratios.log_ratios();
    let (lo, hi) = min_max(logs);
    let target = match direction {
        LimitDirection::Up => hi,
        LimitDirection::Down => lo,
    };
    // log-space difference approximates the relative difference of the ratios
    let members: Vec<bool> = logs
        .iter()
        .map(|&d| (d - target).abs() <= tie_tolerance)
        .collect();
    let count = members.iter().filter(|&&m| m).count() as f64;
    let weights = members
        .into_iter()
        .map(|m| if m { 1.0 / count } else { 0.0 })
        .collect();
    WeightDistribution { weights }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}
