//! Training diagnostics: per-update metrics, token log-ratio envelopes,
//! weight-distribution profiles over `p`, and `V(p)` curves. Tables are
//! serialized as CSV with a fixed header row (the struct field order).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Result};
use crate::holder::{gradient_weights, hhi, shannon_entropy, HolderOrder, RatioSequence};
use crate::objectives::{variance_bound_term, GroupBatch};

/// Metrics recorded for one optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub step: u64,
    pub round: u64,
    pub p_value: f64,
    pub objective: f64,
    pub grad_norm: f64,
    /// Mean softmax entropy across positions, in nats.
    pub policy_entropy: f64,
    pub log_ratio_max: f64,
    pub log_ratio_min: f64,
    pub clip_fraction: f64,
    /// Mean sampled reward of the current round's rollouts.
    pub mean_reward: f64,
    #[serde(rename = "V_of_p")]
    pub v_of_p: f64,
}

impl UpdateMetrics {
    pub fn envelope_gap(&self) -> f64 {
        self.log_ratio_max - self.log_ratio_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightProfileRow {
    pub p: f64,
    pub entropy: f64,
    pub hhi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VCurveRow {
    pub p: f64,
    #[serde(rename = "V")]
    pub v: f64,
}

/// `(max, min)` of the token log-ratios over every valid token in the groups.
pub fn ratio_envelopes(groups: &[GroupBatch]) -> Result<(f64, f64)> {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for group in groups {
        for rollout in &group.rollouts {
            for ((n, o), &valid) in rollout
                .new_logprobs
                .iter()
                .zip(&rollout.old_logprobs)
                .zip(&rollout.mask)
            {
                if valid {
                    let d = n - o;
                    hi = hi.max(d);
                    lo = lo.min(d);
                }
            }
        }
    }
    if hi == f64::NEG_INFINITY {
        return Err(DomainError::Empty);
    }
    Ok((hi, lo))
}

/// Entropy and HHI of `W(p)` at each grid point.
pub fn weight_profile(ratios: &RatioSequence, p_grid: &[f64]) -> Result<Vec<WeightProfileRow>> {
    if p_grid.is_empty() {
        return Err(DomainError::Empty);
    }
    p_grid
        .iter()
        .map(|&p| {
            let w = gradient_weights(ratios, HolderOrder::new(p)?);
            Ok(WeightProfileRow {
                p,
                entropy: shannon_entropy(&w),
                hhi: hhi(&w),
            })
        })
        .collect()
}

/// `V(p)` at each grid point.
pub fn v_curve(samples: &[GroupBatch], p_grid: &[f64]) -> Result<Vec<VCurveRow>> {
    if p_grid.is_empty() {
        return Err(DomainError::Empty);
    }
    p_grid
        .iter()
        .map(|&p| {
            Ok(VCurveRow {
                p,
                v: variance_bound_term(samples, HolderOrder::new(p)?)?,
            })
        })
        .collect()
}

/// Mean of `f` over the last `fraction` of the updates (at least one).
pub fn tail_mean(
    metrics: &[UpdateMetrics],
    fraction: f64,
    f: impl Fn(&UpdateMetrics) -> f64,
) -> f64 {
    if metrics.is_empty() {
        return f64::NAN;
    }
    let take = ((metrics.len() as f64 * fraction).ceil() as usize).clamp(1, metrics.len());
    let tail = &metrics[metrics.len() - take..];
    tail.iter().map(f).sum::<f64>() / take as f64
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Writes `rows` as CSV, header first.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(std::io::Error::other)?;
    }
    w.flush()
}
