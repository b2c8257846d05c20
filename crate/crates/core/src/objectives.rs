//! Group-relative objectives built on the Hölder-aggregated sequence ratio
//! `ρ_p`, and their mini-batch gradient estimators.
//!
//! Three regimes are provided: no clipping, token-level clipping (each
//! `r_t` is clipped before aggregation) and sequence-level clipping (the PPO
//! clip acts on `ρ_p` itself). Ratios are always read from the log-probs
//! stored in the batch; score-function gradients come from a
//! [`ScoreFunction`] implementation, so callers must refresh the batch's
//! `new_logprobs` against the same parameters they pass in.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Result};
use crate::holder::{
    log_power_mean, softmax_weights, HolderOrder, LogRatioSequence, RatioSequence,
};

/// Groups whose reward standard deviation falls below this get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// PPO clip half-width `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    epsilon: f64,
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(DomainError::Invalid(format!(
                "clip epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.epsilon
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.epsilon
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.lower(), self.upper())
    }
}

/// Which clipping rule the surrogate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipRegime {
    None,
    Token,
    Sequence,
}

/// Standard deviation convention for group-normalized advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divide by `G`.
    #[default]
    Population,
    /// Divide by `G − 1`.
    Sample,
}

/// One sampled rollout with its log-probabilities under both policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub token_ids: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub new_logprobs: Vec<f64>,
    pub reward: f64,
    pub mask: Vec<bool>,
}

impl RolloutRecord {
    pub fn new(
        token_ids: Vec<usize>,
        old_logprobs: Vec<f64>,
        new_logprobs: Vec<f64>,
        reward: f64,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let record = Self {
            token_ids,
            old_logprobs,
            new_logprobs,
            reward,
            mask,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        for (what, got) in [
            ("old_logprobs", self.old_logprobs.len()),
            ("new_logprobs", self.new_logprobs.len()),
            ("mask", self.mask.len()),
        ] {
            if got != n {
                return Err(DomainError::LengthMismatch {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        let bad = self
            .old_logprobs
            .iter()
            .chain(&self.new_logprobs)
            .any(|&lp| !(lp <= 0.0) || lp.is_infinite());
        if bad {
            return Err(DomainError::Invalid(
                "log-probabilities must be finite and ≤ 0".into(),
            ));
        }
        if !self.reward.is_finite() {
            return Err(DomainError::Invalid("reward must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `Δ_t = new − old` with this rollout's mask.
    pub fn log_ratios(&self) -> Result<LogRatioSequence> {
        let deltas = self
            .new_logprobs
            .iter()
            .zip(&self.old_logprobs)
            .map(|(n, o)| n - o)
            .collect();
        LogRatioSequence::new(deltas, self.mask.clone())
    }

    /// Valid-position ratios paired with their position index.
    fn valid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
    }
}

/// A group of rollouts for one prompt together with their advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub rollouts: Vec<RolloutRecord>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    /// Builds a group and fills in group-normalized advantages. Needs `G ≥ 2`.
    pub fn from_rollouts(rollouts: Vec<RolloutRecord>, std_kind: StdKind) -> Result<Self> {
        for r in &rollouts {
            r.validate()?;
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = advantage_estimates_with(&rewards, std_kind)?;
        Ok(Self {
            rollouts,
            advantages,
        })
    }

    /// Builds a group with caller-supplied advantages (any `G ≥ 1`).
    pub fn with_advantages(rollouts: Vec<RolloutRecord>, advantages: Vec<f64>) -> Result<Self> {
        if rollouts.is_empty() {
            return Err(DomainError::Empty);
        }
        if advantages.len() != rollouts.len() {
            return Err(DomainError::LengthMismatch {
                what: "advantages",
                expected: rollouts.len(),
                got: advantages.len(),
            });
        }
        for r in &rollouts {
            r.validate()?;
        }
        Ok(Self {
            rollouts,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.rollouts.is_empty() {
            return Err(DomainError::Empty);
        }
        if self.advantages.len() != self.rollouts.len() {
            return Err(DomainError::LengthMismatch {
                what: "advantages",
                expected: self.rollouts.len(),
                got: self.advantages.len(),
            });
        }
        Ok(())
    }

    /// `(Δ, Â)` per rollout.
    fn sequences(&self) -> Result<Vec<(LogRatioSequence, f64)>> {
        self.check()?;
        self.rollouts
            .iter()
            .zip(&self.advantages)
            .map(|(r, &a)| Ok((r.log_ratios()?, a)))
            .collect()
    }
}

/// Gradient of an objective with respect to the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    /// Share of sequences (sequence clip) or valid tokens (token clip) whose indicator is zero.
    pub clip_fraction: f64,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Source of per-token score vectors `∇_θ log π_θ(token | position)`.
pub trait ScoreFunction {
    /// Parameter dimension.
    fn dim(&self) -> usize;

    /// `out += scale · ∇_θ log π_θ(token | position)`.
    fn accumulate_score(&self, position: usize, token: usize, scale: f64, out: &mut [f64]);
}

/// Group-normalized advantages with the population standard deviation.
pub fn advantage_estimates(rewards: &[f64]) -> Result<Vec<f64>> {
    advantage_estimates_with(rewards, StdKind::Population)
}

pub fn advantage_estimates_with(rewards: &[f64], std_kind: StdKind) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(DomainError::Invalid(format!(
            "group size must be at least 2, got {g}"
        )));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match std_kind {
        StdKind::Population => g as f64,
        StdKind::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub(crate) fn log_rho(logs: &LogRatioSequence, order: HolderOrder) -> f64 {
    log_power_mean(logs.valid().log_ratios(), order)
}

/// Sequence-clip indicator: zero when the clip pins `ρ` against the advantage.
pub(crate) fn sequence_indicator(rho: f64, advantage: f64, clip: ClipConfig) -> bool {
    !((advantage > 0.0 && rho > clip.upper()) || (advantage < 0.0 && rho < clip.lower()))
}

fn token_indicator(ratio: f64, advantage: f64, clip: ClipConfig) -> bool {
    sequence_indicator(ratio, advantage, clip)
}

/// Per-token pessimistic ratio: `min(r, clip r)` for `Â ≥ 0`, `max(r, clip r)` otherwise.
fn pessimistic_log_ratio(delta: f64, advantage: f64, clip: ClipConfig) -> f64 {
    let r = delta.exp();
    let c = clip.clip(r);
    if advantage >= 0.0 {
        if r <= c {
            delta
        } else {
            c.ln()
        }
    } else if r >= c {
        delta
    } else {
        c.ln()
    }
}

/// `(1/G) Σ ρ_p Â`.
pub fn surrogate_unclipped(batch: &GroupBatch, order: HolderOrder) -> Result<f64> {
    let seqs = batch.sequences()?;
    let g = seqs.len() as f64;
    Ok(seqs
        .iter()
        .map(|(l, a)| log_rho(l, order).exp() * a)
        .sum::<f64>()
        / g)
}

/// `(1/G) Σ min(ρ_p Â, clip(ρ_p) Â)`.
pub fn surrogate_seq_clip(batch: &GroupBatch, order: HolderOrder, clip: ClipConfig) -> Result<f64> {
    let seqs = batch.sequences()?;
    let g = seqs.len() as f64;
    Ok(seqs
        .iter()
        .map(|(l, a)| {
            let rho = log_rho(l, order).exp();
            (rho * a).min(clip.clip(rho) * a)
        })
        .sum::<f64>()
        / g)
}

/// `H_p`: the Hölder mean of the pessimistically clipped token ratios
/// (`C_p` for non-negative advantages, `D_p` otherwise).
pub fn clipped_holder_mean(
    logs: &LogRatioSequence,
    advantage: f64,
    order: HolderOrder,
    clip: ClipConfig,
) -> f64 {
    let clipped: Vec<f64> = logs
        .valid()
        .log_ratios()
        .iter()
        .map(|&d| pessimistic_log_ratio(d, advantage, clip))
        .collect();
    log_power_mean(&clipped, order).exp()
}

/// `(1/G)(Σ_{Â>0} C_p Â + Σ_{Â<0} D_p Â)`.
pub fn surrogate_token_clip(
    batch: &GroupBatch,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<f64> {
    let seqs = batch.sequences()?;
    let g = seqs.len() as f64;
    Ok(seqs
        .iter()
        .filter(|(_, a)| *a != 0.0)
        .map(|(l, a)| clipped_holder_mean(l, *a, order, clip) * a)
        .sum::<f64>()
        / g)
}

/// Surrogate for the given regime.
pub fn surrogate(
    batch: &GroupBatch,
    regime: ClipRegime,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<f64> {
    match regime {
        ClipRegime::None => surrogate_unclipped(batch, order),
        ClipRegime::Token => surrogate_token_clip(batch, order, clip),
        ClipRegime::Sequence => surrogate_seq_clip(batch, order, clip),
    }
}

/// Mean surrogate over the groups of a mini-batch; the estimators below are its gradient.
pub fn minibatch_objective(
    minibatch: &[GroupBatch],
    regime: ClipRegime,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<f64> {
    if minibatch.is_empty() {
        return Err(DomainError::Empty);
    }
    let total = minibatch
        .iter()
        .map(|b| surrogate(b, regime, order, clip))
        .sum::<Result<f64>>()?;
    Ok(total / minibatch.len() as f64)
}

/// Per-sequence loss to minimize: `max(−Â ρ, −Â clip(ρ))`.
pub fn loss_holder_po(
    logs: &LogRatioSequence,
    advantage: f64,
    order: HolderOrder,
    clip: ClipConfig,
) -> f64 {
    let rho = log_rho(logs, order).exp();
    let unclipped = -advantage * rho;
    let clipped = -advantage * clip.clip(rho);
    unclipped.max(clipped)
}

/// `∇ρ_p = ρ_p Σ_t W_t(p) g_t`, where row `t` of `score_grads` is `g_t`.
pub fn grad_rho(
    ratios: &RatioSequence,
    score_grads: ArrayView2<f64>,
    order: HolderOrder,
) -> Result<Array1<f64>> {
    check_rows(ratios, score_grads)?;
    let logs = ratios.log_ratios();
    let rho = log_power_mean(logs, order).exp();
    let weights = softmax_weights(logs, order);
    let mut out = Array1::zeros(score_grads.ncols());
    for (w, row) in weights.iter().zip(score_grads.rows()) {
        out.scaled_add(rho * w, &row);
    }
    debug_assert!({
        let other = grad_rho_power_form(ratios, score_grads, order)?;
        let scale = out
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        out.iter()
            .zip(other.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-10 * scale)
    });
    Ok(out)
}

/// The same gradient written as `ρ^{1−p}/n Σ_t r_t^p g_t` (geometric branch: `ρ/n Σ g_t`).
pub fn grad_rho_power_form(
    ratios: &RatioSequence,
    score_grads: ArrayView2<f64>,
    order: HolderOrder,
) -> Result<Array1<f64>> {
    check_rows(ratios, score_grads)?;
    let logs = ratios.log_ratios();
    let n = logs.len() as f64;
    let log_rho = log_power_mean(logs, order);
    let p = if order.is_geometric() { 0.0 } else { order.p() };
    let mut out = Array1::zeros(score_grads.ncols());
    for (&d, row) in logs.iter().zip(score_grads.rows()) {
        let coef = ((1.0 - p) * log_rho + p * d - n.ln()).exp();
        out.scaled_add(coef, &row);
    }
    Ok(out)
}

fn check_rows(ratios: &RatioSequence, score_grads: ArrayView2<f64>) -> Result<()> {
    if score_grads.nrows() != ratios.len() {
        return Err(DomainError::LengthMismatch {
            what: "score gradient rows",
            expected: ratios.len(),
            got: score_grads.nrows(),
        });
    }
    Ok(())
}

/// Per-token coefficients `c_t` of one rollout's contribution `Σ_t c_t g_t`,
/// plus the number of valid tokens whose indicator is zero.
struct Contribution {
    coefs: Vec<(usize, f64)>,
    zeroed_tokens: usize,
    sequence_zeroed: bool,
}

fn rollout_contribution(
    rollout: &RolloutRecord,
    advantage: f64,
    regime: ClipRegime,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<Contribution> {
    let logs = rollout.log_ratios()?;
    let positions: Vec<usize> = rollout.valid_positions().collect();
    let deltas = logs.valid().log_ratios().to_vec();
    match regime {
        ClipRegime::None | ClipRegime::Sequence => {
            let rho = log_power_mean(&deltas, order).exp();
            let keep = regime == ClipRegime::None || sequence_indicator(rho, advantage, clip);
            let weights = softmax_weights(&deltas, order);
            let coefs = if keep && advantage != 0.0 {
                positions
                    .iter()
                    .zip(&weights)
                    .map(|(&t, w)| (t, advantage * rho * w))
                    .collect()
            } else {
                Vec::new()
            };
            Ok(Contribution {
                coefs,
                zeroed_tokens: 0,
                sequence_zeroed: !keep,
            })
        }
        ClipRegime::Token => {
            let clipped: Vec<f64> = deltas
                .iter()
                .map(|&d| pessimistic_log_ratio(d, advantage, clip))
                .collect();
            let h = log_power_mean(&clipped, order).exp();
            let weights = softmax_weights(&clipped, order);
            let mut zeroed = 0;
            let mut coefs = Vec::with_capacity(positions.len());
            for ((&t, &d), w) in positions.iter().zip(&deltas).zip(&weights) {
                if token_indicator(d.exp(), advantage, clip) {
                    if advantage != 0.0 {
                        coefs.push((t, advantage * h * w));
                    }
                } else {
                    zeroed += 1;
                }
            }
            Ok(Contribution {
                coefs,
                zeroed_tokens: zeroed,
                sequence_zeroed: false,
            })
        }
    }
}

/// `(1/B) Σ_b (1/G) Σ_i` of the per-rollout gradient contributions for `regime`.
pub fn grad_estimator<P: ScoreFunction + ?Sized>(
    minibatch: &[GroupBatch],
    policy: &P,
    regime: ClipRegime,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<GradientEstimate> {
    if minibatch.is_empty() {
        return Err(DomainError::Empty);
    }
    let b = minibatch.len() as f64;
    let mut vector = vec![0.0; policy.dim()];
    let (mut sequences, mut zeroed_sequences) = (0usize, 0usize);
    let (mut tokens, mut zeroed_tokens) = (0usize, 0usize);
    for group in minibatch {
        group.check()?;
        let g = group.len() as f64;
        for (rollout, &advantage) in group.rollouts.iter().zip(&group.advantages) {
            let c = rollout_contribution(rollout, advantage, regime, order, clip)?;
            sequences += 1;
            tokens += rollout.mask.iter().filter(|&&m| m).count();
            zeroed_sequences += c.sequence_zeroed as usize;
            zeroed_tokens += c.zeroed_tokens;
            for (t, coef) in c.coefs {
                policy.accumulate_score(t, rollout.token_ids[t], coef / (b * g), &mut vector);
            }
        }
    }
    let clip_fraction = match regime {
        ClipRegime::None => 0.0,
        ClipRegime::Sequence => zeroed_sequences as f64 / sequences as f64,
        ClipRegime::Token => zeroed_tokens as f64 / tokens.max(1) as f64,
    };
    Ok(GradientEstimate {
        vector,
        clip_fraction,
    })
}

pub fn grad_estimator_unclipped<P: ScoreFunction + ?Sized>(
    minibatch: &[GroupBatch],
    policy: &P,
    order: HolderOrder,
) -> Result<GradientEstimate> {
    // the clip width is unused without clipping
    let unused = ClipConfig { epsilon: 0.5 };
    grad_estimator(minibatch, policy, ClipRegime::None, order, unused)
}

pub fn grad_estimator_seq_clip<P: ScoreFunction + ?Sized>(
    minibatch: &[GroupBatch],
    policy: &P,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<GradientEstimate> {
    grad_estimator(minibatch, policy, ClipRegime::Sequence, order, clip)
}

pub fn grad_estimator_token_clip<P: ScoreFunction + ?Sized>(
    minibatch: &[GroupBatch],
    policy: &P,
    order: HolderOrder,
    clip: ClipConfig,
) -> Result<GradientEstimate> {
    grad_estimator(minibatch, policy, ClipRegime::Token, order, clip)
}

/// Empirical `V(p) = mean of Â² ρ_p²` over every rollout in the sample.
pub fn variance_bound_term(batches: &[GroupBatch], order: HolderOrder) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        for (logs, a) in batch.sequences()? {
            let rho = log_rho(&logs, order).exp();
            total += a * a * rho * rho;
            count += 1;
        }
    }
    if count == 0 {
        return Err(DomainError::Empty);
    }
    Ok(total / count as f64)
}

/// Second moment `Â² M² ρ_p² Σ_t W_t²` of one rollout's gradient when token
/// score vectors are mutually orthogonal with squared norm `M²`.
pub fn second_moment_orthogonal(
    advantage: f64,
    grad_norm_bound: f64,
    ratios: &RatioSequence,
    order: HolderOrder,
) -> Result<f64> {
    if !(grad_norm_bound > 0.0 && grad_norm_bound.is_finite()) {
        return Err(DomainError::Invalid(format!(
            "gradient norm bound must be positive, got {grad_norm_bound}"
        )));
    }
    let logs = ratios.log_ratios();
    let rho = log_power_mean(logs, order).exp();
    let hhi: f64 = softmax_weights(logs, order).iter().map(|w| w * w).sum();
    Ok(advantage * advantage * grad_norm_bound * grad_norm_bound * rho * rho * hhi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn order(p: f64) -> HolderOrder {
        HolderOrder::new(p).unwrap()
    }

    fn clip(e: f64) -> ClipConfig {
        ClipConfig::new(e).unwrap()
    }

    /// Rollout whose per-token ratios are `ratios` (old log-prob fixed at ln 0.01).
    fn rollout(ratios: &[f64]) -> RolloutRecord {
        let n = ratios.len();
        let old = vec![0.01f64.ln(); n];
        let new = ratios.iter().map(|r| (0.01 * r).ln()).collect();
        RolloutRecord::new((0..n).collect(), old, new, 0.0, vec![true; n]).unwrap()
    }

    fn single(ratios: &[f64], advantage: f64) -> GroupBatch {
        GroupBatch::with_advantages(vec![rollout(ratios)], vec![advantage]).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantage_estimates(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(advantage_estimates(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        let a = advantage_estimates(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [
            3f64.sqrt(),
            -1.0 / 3f64.sqrt(),
            -1.0 / 3f64.sqrt(),
            -1.0 / 3f64.sqrt(),
        ];
        for (x, y) in a.iter().zip(expected) {
            assert!(close(*x, y, 1e-14));
        }
        assert!(advantage_estimates(&[1.0]).is_err());
        let s = advantage_estimates_with(&[1.0, 0.0], StdKind::Sample).unwrap();
        assert!(close(s[0], 0.5 / 0.5f64.sqrt(), 1e-14));
    }

    #[test]
    fn clip_config_bounds() {
        assert!(ClipConfig::new(0.0).is_err());
        assert!(ClipConfig::new(1.0).is_err());
        assert!(ClipConfig::new(f64::NAN).is_err());
        assert_eq!(clip(0.2).clip(1.5), 1.2);
    }

    #[test]
    fn unclipped_examples() {
        let ident = GroupBatch::from_rollouts(
            vec![
                RolloutRecord {
                    reward: 1.0,
                    ..rollout(&[1.0, 1.0])
                },
                RolloutRecord {
                    reward: 0.0,
                    ..rollout(&[1.0, 1.0])
                },
                RolloutRecord {
                    reward: 0.0,
                    ..rollout(&[1.0, 1.0])
                },
            ],
            StdKind::Population,
        )
        .unwrap();
        for p in [-2.0, 0.0, 3.0] {
            assert!(surrogate_unclipped(&ident, order(p)).unwrap().abs() < 1e-15);
        }
        let two =
            GroupBatch::with_advantages(vec![rollout(&[1.5]), rollout(&[0.5])], vec![1.0, -1.0])
                .unwrap();
        assert!(close(
            surrogate_unclipped(&two, order(1.0)).unwrap(),
            0.5,
            1e-14
        ));
    }

    #[test]
    fn seq_clip_examples() {
        let e = clip(0.2);
        assert!(close(
            surrogate_seq_clip(&single(&[1.5], 1.0), order(1.0), e).unwrap(),
            1.2,
            1e-14
        ));
        assert!(close(
            surrogate_seq_clip(&single(&[0.5], -1.0), order(1.0), e).unwrap(),
            -0.8,
            1e-14
        ));
        let inside = GroupBatch::with_advantages(
            vec![rollout(&[1.1, 0.9]), rollout(&[1.05])],
            vec![0.7, -0.7],
        )
        .unwrap();
        for p in [-3.0, 0.0, 2.0] {
            let a = surrogate_seq_clip(&inside, order(p), e).unwrap();
            let b = surrogate_unclipped(&inside, order(p)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn token_clip_examples() {
        let e = clip(0.2);
        assert!(close(
            surrogate_token_clip(&single(&[0.5, 2.0], 1.0), order(1.0), e).unwrap(),
            0.85,
            1e-14
        ));
        let inside = GroupBatch::with_advantages(
            vec![rollout(&[1.1, 0.9]), rollout(&[1.05])],
            vec![0.7, -0.7],
        )
        .unwrap();
        for p in [-3.0, 0.0, 2.0] {
            let a = surrogate_token_clip(&inside, order(p), e).unwrap();
            let b = surrogate_unclipped(&inside, order(p)).unwrap();
            assert!(close(a, b, 1e-14));
        }
    }

    #[test]
    fn loss_examples() {
        let e = clip(0.2);
        let l = |r: f64| LogRatioSequence::unmasked(vec![r.ln()]).unwrap();
        assert!(close(
            loss_holder_po(&l(1.5), 1.0, order(1.0), e),
            -1.2,
            1e-14
        ));
        assert!(close(
            loss_holder_po(&l(0.5), -1.0, order(1.0), e),
            0.8,
            1e-14
        ));
        for a in [-2.0, 0.3, 1.0] {
            assert_eq!(loss_holder_po(&l(1.0), a, order(2.0), e), -a);
        }
    }

    #[test]
    fn loss_is_negated_seq_clip_term() {
        let e = clip(0.2);
        for (r, a) in [
            (&[1.4, 0.7][..], 0.8),
            (&[0.3, 0.9, 1.1][..], -1.3),
            (&[1.0][..], 0.2),
        ] {
            let batch = single(r, a);
            let logs = batch.rollouts[0].log_ratios().unwrap();
            for p in [-2.0, 0.0, 1.0, 3.0] {
                let lhs = loss_holder_po(&logs, a, order(p), e);
                let rhs = -surrogate_seq_clip(&batch, order(p), e).unwrap();
                assert!(close(lhs, rhs, 1e-14));
            }
        }
    }

    #[test]
    fn grad_rho_small_cases() {
        let r = RatioSequence::new(&[1.3, 0.6, 2.0]).unwrap();
        let zeros = ndarray::Array2::<f64>::zeros((3, 4));
        assert!(grad_rho(&r, zeros.view(), order(2.0))
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));

        let one = RatioSequence::new(&[1.7]).unwrap();
        let g = array![[0.5, -1.0, 2.0]];
        for p in [-4.0, 0.0, 1.0, 6.0] {
            let out = grad_rho(&one, g.view(), order(p)).unwrap();
            for (o, e) in out.iter().zip([0.85, -1.7, 3.4]) {
                assert!(close(*o, e, 1e-13));
            }
        }
        assert!(grad_rho(&one, zeros.view(), order(1.0)).is_err());
    }

    #[test]
    fn grad_rho_forms_agree() {
        let r = RatioSequence::new(&[0.2, 1.1, 5.0, 0.9]).unwrap();
        let g = array![[1.0, 0.0], [0.3, -0.4], [-2.0, 1.0], [0.0, 0.7]];
        for p in [-5.0, -1.0, 0.0, 0.5, 3.0] {
            let a = grad_rho(&r, g.view(), order(p)).unwrap();
            let b = grad_rho_power_form(&r, g.view(), order(p)).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    /// Score vectors are unit basis vectors indexed by position.
    struct Basis(usize);

    impl ScoreFunction for Basis {
        fn dim(&self) -> usize {
            self.0
        }
        fn accumulate_score(&self, position: usize, _token: usize, scale: f64, out: &mut [f64]) {
            out[position] += scale;
        }
    }

    #[test]
    fn estimator_single_term_reduction() {
        let batch = single(&[1.4, 0.8, 1.1], 0.9);
        let est = grad_estimator_unclipped(&[batch.clone()], &Basis(3), order(2.0)).unwrap();
        let r = RatioSequence::new(&[1.4, 0.8, 1.1]).unwrap();
        let eye = ndarray::Array2::<f64>::eye(3);
        let expected = grad_rho(&r, eye.view(), order(2.0)).unwrap();
        for (x, y) in est.vector.iter().zip(expected.iter()) {
            assert!(close(*x, 0.9 * y, 1e-14));
        }
        assert_eq!(est.clip_fraction, 0.0);
    }

    #[test]
    fn seq_clip_zeroes_clipped_sequence() {
        let e = clip(0.2);
        let batch = GroupBatch::with_advantages(
            vec![rollout(&[1.3, 1.3]), rollout(&[1.0, 1.1])],
            vec![1.0, -1.0],
        )
        .unwrap();
        let est = grad_estimator_seq_clip(&[batch.clone()], &Basis(2), order(1.0), e).unwrap();
        assert_eq!(est.clip_fraction, 0.5);
        // only the second rollout contributes
        let only = GroupBatch::with_advantages(vec![rollout(&[1.0, 1.1])], vec![-1.0]).unwrap();
        let reference = grad_estimator_unclipped(&[only], &Basis(2), order(1.0)).unwrap();
        for (x, y) in est.vector.iter().zip(&reference.vector) {
            assert!(close(*x, y / 2.0, 1e-14));
        }
    }

    #[test]
    fn token_clip_two_token_hand_evaluation() {
        // Â = 1, r = [1.5, 0.9], ε = 0.2, p = 2:
        // H = C = sqrt((1.2² + 0.9²)/2) = sqrt(1.125); token 0 is dropped, token 1 keeps
        // Â H^{1−p}/n r_1^p = 0.9² / (2 sqrt(1.125)).
        let e = clip(0.2);
        let batch = single(&[1.5, 0.9], 1.0);
        let est = grad_estimator_token_clip(&[batch], &Basis(2), order(2.0), e).unwrap();
        assert_eq!(est.vector[0], 0.0);
        assert!(close(est.vector[1], 0.81 / (2.0 * 1.125f64.sqrt()), 1e-14));
        assert_eq!(est.clip_fraction, 0.5);
    }

    #[test]
    fn variance_term_examples() {
        assert!(close(
            variance_bound_term(&[single(&[5.0], 1.0)], order(1.0)).unwrap(),
            25.0,
            1e-13
        ));
        let ones = GroupBatch::with_advantages(
            vec![rollout(&[1.0, 1.0]), rollout(&[1.0])],
            vec![2.0, -1.0],
        )
        .unwrap();
        for p in [-3.0, 0.0, 3.0] {
            assert!(close(
                variance_bound_term(&[ones.clone()], order(p)).unwrap(),
                2.5,
                1e-14
            ));
        }
        assert!(variance_bound_term(&[], order(1.0)).is_err());
    }

    #[test]
    fn second_moment_examples() {
        let r = RatioSequence::new(&[2.0, 8.0]).unwrap();
        assert!(close(
            second_moment_orthogonal(1.0, 1.0, &r, order(1.0)).unwrap(),
            17.0,
            1e-13
        ));
        let c = RatioSequence::new(&[1.5; 4]).unwrap();
        for p in [-2.0, 0.0, 4.0] {
            let v = second_moment_orthogonal(2.0, 0.5, &c, order(p)).unwrap();
            assert!(close(v, 4.0 * 0.25 * 2.25 / 4.0, 1e-13));
        }
        assert!(second_moment_orthogonal(1.0, 0.0, &r, order(1.0)).is_err());
    }

    #[test]
    fn rollout_validation() {
        assert!(RolloutRecord::new(
            vec![0, 1],
            vec![-0.1],
            vec![-0.1, -0.2],
            0.0,
            vec![true, true]
        )
        .is_err());
        assert!(RolloutRecord::new(vec![0], vec![0.1], vec![-0.1], 0.0, vec![true]).is_err());
        assert!(GroupBatch::with_advantages(vec![rollout(&[1.0])], vec![]).is_err());
        let mut bad = single(&[1.0], 1.0);
        bad.advantages.push(0.0);
        assert!(surrogate_unclipped(&bad, order(1.0)).is_err());
    }
}
