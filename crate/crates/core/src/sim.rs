//! Desk-scale training environment: a position-conditioned tabular softmax
//! policy, binary-reward sparse and dense tasks, and a group-relative
//! training loop driven by the Hölder-mean objectives.

use ndarray::{Array2, ArrayView1};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{ratio_envelopes, UpdateMetrics};
use crate::error::{DomainError, Result};
use crate::holder::{log_sum_exp, HolderOrder};
use crate::objectives::{
    grad_estimator, log_rho, minibatch_objective, sequence_indicator, variance_bound_term,
    ClipConfig, ClipRegime, GroupBatch, RolloutRecord, ScoreFunction, StdKind,
};
use crate::schedule::ScheduleSpec;

/// Sequence-level ratio above which a run is aborted.
pub const DIVERGENCE_RHO: f64 = 1e6;

/// Bound on the norm of one tabular score vector, `‖e_v − π‖ ≤ √2`.
pub const TABULAR_SCORE_BOUND: f64 = std::f64::consts::SQRT_2;

/// Logits of `π(v | position)`, one row per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    logits: Array2<f64>,
}

impl PolicyParams {
    /// The uniform policy.
    pub fn uniform(length: usize, vocab: usize) -> Self {
        Self {
            logits: Array2::zeros((length, vocab)),
        }
    }

    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.nrows() == 0 || logits.ncols() == 0 {
            return Err(DomainError::Empty);
        }
        if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(DomainError::Invalid(format!(
                "logits must be finite, found {bad}"
            )));
        }
        Ok(Self { logits })
    }

    pub fn length(&self) -> usize {
        self.logits.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    fn row(&self, position: usize) -> ArrayView1<'_, f64> {
        self.logits.row(position)
    }

    fn row_lse(&self, position: usize) -> f64 {
        let row = self.row(position);
        log_sum_exp(row.iter().copied())
    }

    pub fn log_prob(&self, position: usize, token: usize) -> f64 {
        (self.logits[[position, token]] - self.row_lse(position)).min(0.0)
    }

    /// `π(· | position)`.
    pub fn probabilities(&self, position: usize) -> Vec<f64> {
        let lse = self.row_lse(position);
        self.row(position).iter().map(|l| (l - lse).exp()).collect()
    }

    /// Mean over positions of the row entropy, in nats.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = (0..self.length())
            .map(|pos| {
                let lse = self.row_lse(pos);
                self.row(pos)
                    .iter()
                    .map(|l| {
                        let lp = l - lse;
                        let p = lp.exp();
                        if p > 0.0 {
                            -p * lp
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .sum();
        (total / self.length() as f64).clamp(0.0, (self.vocab() as f64).ln())
    }

    /// `θ ← θ + lr · direction`, with `direction` laid out row-major.
    pub fn ascend(&mut self, direction: &[f64], lr: f64) -> Result<()> {
        if direction.len() != self.logits.len() {
            return Err(DomainError::LengthMismatch {
                what: "gradient",
                expected: self.logits.len(),
                got: direction.len(),
            });
        }
        for (x, g) in self.logits.iter_mut().zip(direction) {
            *x += lr * g;
        }
        Ok(())
    }
}

impl ScoreFunction for PolicyParams {
    fn dim(&self) -> usize {
        self.logits.len()
    }

    fn accumulate_score(&self, position: usize, token: usize, scale: f64, out: &mut [f64]) {
        let v = self.vocab();
        let base = position * v;
        let lse = self.row_lse(position);
        for (k, l) in self.row(position).iter().enumerate() {
            out[base + k] -= scale * (l - lse).exp();
        }
        out[base + token] += scale;
    }
}

/// A synthetic task with a binary reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    /// Reward 1 iff the token at `key_position` is `key_token`.
    Sparse {
        length: usize,
        vocab: usize,
        key_position: usize,
        key_token: usize,
    },
    /// Reward 1 iff the Hamming distance to `target_sequence` is at most `dense_threshold`.
    Dense {
        length: usize,
        vocab: usize,
        target_sequence: Vec<usize>,
        dense_threshold: usize,
        /// Initial logit bonus on each target token; 0 starts training from the uniform policy.
        #[serde(default)]
        prior_logit: f64,
    },
}

impl TaskSpec {
    pub fn default_sparse() -> Self {
        TaskSpec::Sparse {
            length: 8,
            vocab: 16,
            key_position: 3,
            key_token: 5,
        }
    }

    pub fn default_dense() -> Self {
        TaskSpec::Dense {
            length: 8,
            vocab: 16,
            target_sequence: (0..8).map(|t| (3 * t + 1) % 16).collect(),
            dense_threshold: 1,
            // each target token starts at probability 1/2
            prior_logit: 15f64.ln(),
        }
    }

    /// Policy that training starts from: uniform, plus `prior_logit` on dense targets.
    pub fn initial_policy(&self) -> PolicyParams {
        let mut policy = PolicyParams::uniform(self.length(), self.vocab());
        if let TaskSpec::Dense {
            target_sequence,
            prior_logit,
            ..
        } = self
        {
            for (pos, &tok) in target_sequence.iter().enumerate() {
                policy.logits[[pos, tok]] = *prior_logit;
            }
        }
        policy
    }

    pub fn length(&self) -> usize {
        match self {
            TaskSpec::Sparse { length, .. } | TaskSpec::Dense { length, .. } => *length,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            TaskSpec::Sparse { vocab, .. } | TaskSpec::Dense { vocab, .. } => *vocab,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::Sparse { .. } => "sparse",
            TaskSpec::Dense { .. } => "dense",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length() == 0 || self.vocab() == 0 {
            return Err(DomainError::Invalid(
                "task length and vocab must be positive".into(),
            ));
        }
        match self {
            TaskSpec::Sparse {
                length,
                vocab,
                key_position,
                key_token,
            } => {
                if key_position >= length {
                    return Err(DomainError::IndexOutOfRange {
                        index: *key_position,
                        len: *length,
                    });
                }
                if key_token >= vocab {
                    return Err(DomainError::IndexOutOfRange {
                        index: *key_token,
                        len: *vocab,
                    });
                }
            }
            TaskSpec::Dense {
                length,
                vocab,
                target_sequence,
                dense_threshold,
                prior_logit,
            } => {
                if !prior_logit.is_finite() {
                    return Err(DomainError::Invalid(format!(
                        "prior_logit must be finite, got {prior_logit}"
                    )));
                }
                if target_sequence.len() != *length {
                    return Err(DomainError::LengthMismatch {
                        what: "target_sequence",
                        expected: *length,
                        got: target_sequence.len(),
                    });
                }
                if let Some(&bad) = target_sequence.iter().find(|&&v| v >= *vocab) {
                    return Err(DomainError::IndexOutOfRange {
                        index: bad,
                        len: *vocab,
                    });
                }
                if dense_threshold > length {
                    return Err(DomainError::Invalid(format!(
                        "dense_threshold {dense_threshold} exceeds length {length}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn reward(&self, tokens: &[usize]) -> f64 {
        let hit = match self {
            TaskSpec::Sparse {
                key_position,
                key_token,
                ..
            } => tokens.get(*key_position) == Some(key_token),
            TaskSpec::Dense {
                target_sequence,
                dense_threshold,
                ..
            } => {
                let misses = tokens
                    .iter()
                    .zip(target_sequence)
                    .filter(|(a, b)| a != b)
                    .count();
                misses <= *dense_threshold
            }
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    /// Exact probability that a rollout from `policy` earns reward 1.
    pub fn success_probability(&self, policy: &PolicyParams) -> f64 {
        match self {
            TaskSpec::Sparse {
                key_position,
                key_token,
                ..
            } => policy.log_prob(*key_position, *key_token).exp(),
            TaskSpec::Dense {
                target_sequence,
                dense_threshold,
                ..
            } => {
                // dist[m] = P(m mismatches so far)
                let mut dist = vec![0.0; target_sequence.len() + 1];
                dist[0] = 1.0;
                for (pos, &target) in target_sequence.iter().enumerate() {
                    let hit = policy.log_prob(pos, target).exp();
                    for m in (0..=pos + 1).rev() {
                        let stay = dist[m] * hit;
                        let moved = if m > 0 {
                            dist[m - 1] * (1.0 - hit)
                        } else {
                            0.0
                        };
                        dist[m] = stay + moved;
                    }
                }
                dist[..=*dense_threshold].iter().sum::<f64>().min(1.0)
            }
        }
    }

    fn check_policy(&self, policy: &PolicyParams) -> Result<()> {
        if policy.length() != self.length() || policy.vocab() != self.vocab() {
            return Err(DomainError::Invalid(format!(
                "policy shape {}x{} does not match task {}x{}",
                policy.length(),
                policy.vocab(),
                self.length(),
                self.vocab()
            )));
        }
        Ok(())
    }
}

/// Deterministic per-rollout random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Substreams {
    seed: u64,
}

impl Substreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Independent stream for rollout `index` of `round`.
    pub fn stream(&self, round: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((round << 32) | (index & 0xffff_ffff));
        rng
    }
}

/// Samples `group_size` rollouts from `policy_old`. Rollout `i` draws from
/// stream `first_index + i` of `round`.
pub fn sample_group(
    policy_old: &PolicyParams,
    task: &TaskSpec,
    group_size: usize,
    streams: &Substreams,
    round: u64,
    first_index: u64,
    std_kind: StdKind,
) -> Result<GroupBatch> {
    task.validate()?;
    task.check_policy(policy_old)?;
    let rows: Vec<WeightedIndex<f64>> = (0..policy_old.length())
        .map(|pos| {
            WeightedIndex::new(policy_old.probabilities(pos))
                .map_err(|e| DomainError::Invalid(format!("position {pos}: {e}")))
        })
        .collect::<Result<_>>()?;
    let rollouts = (0..group_size as u64)
        .map(|i| {
            let mut rng = streams.stream(round, first_index + i);
            let tokens: Vec<usize> = rows.iter().map(|d| d.sample(&mut rng)).collect();
            let logprobs: Vec<f64> = tokens
                .iter()
                .enumerate()
                .map(|(pos, &tok)| policy_old.log_prob(pos, tok))
                .collect();
            let reward = task.reward(&tokens);
            let n = tokens.len();
            RolloutRecord::new(tokens, logprobs.clone(), logprobs, reward, vec![true; n])
        })
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::from_rollouts(rollouts, std_kind)
}

/// Recomputes `new_logprobs` under `policy_new`.
pub fn refresh_logprobs(batch: &GroupBatch, policy_new: &PolicyParams) -> Result<GroupBatch> {
    let mut out = batch.clone();
    for rollout in &mut out.rollouts {
        if rollout.len() > policy_new.length() {
            return Err(DomainError::IndexOutOfRange {
                index: rollout.len() - 1,
                len: policy_new.length(),
            });
        }
        for (pos, (&tok, lp)) in rollout
            .token_ids
            .iter()
            .zip(&mut rollout.new_logprobs)
            .enumerate()
        {
            if tok >= policy_new.vocab() {
                return Err(DomainError::IndexOutOfRange {
                    index: tok,
                    len: policy_new.vocab(),
                });
            }
            *lp = policy_new.log_prob(pos, tok);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub rollouts_per_round: usize,
    /// Groups per minibatch.
    pub minibatch_size: usize,
    pub updates_per_round: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub schedule: ScheduleSpec,
    pub clipping_regime: ClipRegime,
    pub seed: u64,
    pub total_rounds: u64,
    #[serde(default)]
    pub advantage_std: StdKind,
}

impl TrainConfig {
    /// Desk-scale defaults with a static order `p`.
    pub fn desk(p: f64, seed: u64) -> Self {
        let mut cfg = Self {
            group_size: 8,
            rollouts_per_round: 256,
            minibatch_size: 8,
            updates_per_round: 4,
            learning_rate: 0.05,
            clip_epsilon: 0.2,
            schedule: ScheduleSpec::constant(p, 1),
            clipping_regime: ClipRegime::Sequence,
            seed,
            total_rounds: 200,
            advantage_std: StdKind::Population,
        };
        cfg.schedule.total_steps = cfg.default_schedule_steps();
        cfg
    }

    /// Preset for the static-`p` comparison runs: a larger step and more
    /// updates per round, over 14 rounds. Tuned on seeds 100..105.
    pub fn comparison(p: f64, seed: u64) -> Self {
        let mut cfg = Self {
            learning_rate: 1.0,
            updates_per_round: 8,
            total_rounds: 14,
            ..Self::desk(p, seed)
        };
        cfg.schedule.total_steps = cfg.default_schedule_steps();
        cfg
    }

    pub fn total_updates(&self) -> u64 {
        self.total_rounds * self.updates_per_round as u64
    }

    /// `T` such that the last update sits on the schedule's end point.
    pub fn default_schedule_steps(&self) -> u64 {
        self.total_updates().saturating_sub(1).max(1)
    }

    pub fn groups_per_round(&self) -> usize {
        self.rollouts_per_round / self.group_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DomainError::Invalid(msg));
        if self.group_size < 2 {
            return bad(format!(
                "group_size must be at least 2, got {}",
                self.group_size
            ));
        }
        if self.rollouts_per_round == 0 || self.rollouts_per_round % self.group_size != 0 {
            return bad(format!(
                "rollouts_per_round {} must be a positive multiple of group_size {}",
                self.rollouts_per_round, self.group_size
            ));
        }
        if self.minibatch_size == 0 || self.groups_per_round() % self.minibatch_size != 0 {
            return bad(format!(
                "minibatch_size {} must divide the {} groups per round",
                self.minibatch_size,
                self.groups_per_round()
            ));
        }
        if self.updates_per_round == 0 {
            return bad("updates_per_round must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.total_rounds == 0 {
            return bad("total_rounds must be positive".into());
        }
        ClipConfig::new(self.clip_epsilon)?;
        self.schedule.validate()
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub metrics: Vec<UpdateMetrics>,
    pub final_policy: PolicyParams,
    pub initial_success: f64,
    pub final_success: f64,
    pub final_p: f64,
    /// Refreshed minibatch of the last update (the offending one after a divergence).
    pub last_minibatch: Vec<GroupBatch>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("diverged at update {step}: sequence ratio {rho:e} exceeds {DIVERGENCE_RHO:e}")]
    Diverged {
        step: u64,
        rho: f64,
        partial: Box<RunLog>,
    },
}

/// Largest parameter step the sequence-clipped estimator can take:
/// `lr · max|Â| · max ρ · √2`, with the maximum over sequences that keep their gradient.
pub fn sequence_clip_step_bound(
    minibatch: &[GroupBatch],
    order: HolderOrder,
    clip: ClipConfig,
    lr: f64,
) -> Result<f64> {
    let mut max_adv: f64 = 0.0;
    let mut max_rho: f64 = 0.0;
    for group in minibatch {
        for (rollout, &a) in group.rollouts.iter().zip(&group.advantages) {
            let rho = log_rho(&rollout.log_ratios()?, order).exp();
            if a != 0.0 && sequence_indicator(rho, a, clip) {
                max_adv = max_adv.max(a.abs());
                max_rho = max_rho.max(rho);
            }
        }
    }
    Ok(lr * max_adv * max_rho * TABULAR_SCORE_BOUND)
}

fn max_sequence_rho(minibatch: &[GroupBatch], order: HolderOrder) -> Result<f64> {
    let mut hi = f64::NEG_INFINITY;
    for group in minibatch {
        for rollout in &group.rollouts {
            hi = hi.max(log_rho(&rollout.log_ratios()?, order));
        }
    }
    Ok(hi.exp())
}

/// Runs `total_rounds` of sample-then-update from [`TaskSpec::initial_policy`].
pub fn train(config: &TrainConfig, task: &TaskSpec) -> Result<RunLog, TrainError> {
    task.validate()?;
    train_from(config, task, task.initial_policy())
}

/// Runs `total_rounds` of sample-then-update from `initial` and returns every update's metrics.
pub fn train_from(
    config: &TrainConfig,
    task: &TaskSpec,
    initial: PolicyParams,
) -> Result<RunLog, TrainError> {
    config.validate()?;
    task.validate()?;
    task.check_policy(&initial)?;
    let clip = ClipConfig::new(config.clip_epsilon)?;
    let streams = Substreams::new(config.seed);
    let g = config.group_size;
    let minibatches = config.groups_per_round() / config.minibatch_size;

    let mut policy = initial;
    let initial_success = task.success_probability(&policy);
    let mut metrics = Vec::with_capacity(config.total_updates() as usize);
    let mut step = 0u64;
    let mut p = config.schedule.start();
    let mut last_minibatch = Vec::new();

    for round in 0..config.total_rounds {
        let old = policy.clone();
        let groups = (0..config.groups_per_round())
            .map(|k| {
                sample_group(
                    &old,
                    task,
                    g,
                    &streams,
                    round,
                    (k * g) as u64,
                    config.advantage_std,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_reward = groups
            .iter()
            .flat_map(|b| &b.rollouts)
            .map(|r| r.reward)
            .sum::<f64>()
            / config.rollouts_per_round as f64;

        for u in 0..config.updates_per_round {
            let pick = u % minibatches;
            let chunk = &groups[pick * config.minibatch_size..(pick + 1) * config.minibatch_size];
            let minibatch = chunk
                .iter()
                .map(|b| refresh_logprobs(b, &policy))
                .collect::<Result<Vec<_>>>()?;
            p = config
                .schedule
                .p_at(step.min(config.schedule.total_steps))?;
            let order = HolderOrder::new(p)?;

            let rho = max_sequence_rho(&minibatch, order)?;
            if !(rho <= DIVERGENCE_RHO) {
                return Err(TrainError::Diverged {
                    step,
                    rho,
                    partial: Box::new(RunLog {
                        metrics,
                        initial_success,
                        final_success: task.success_probability(&policy),
                        final_policy: policy,
                        final_p: p,
                        last_minibatch: minibatch,
                    }),
                });
            }

            let estimate =
                grad_estimator(&minibatch, &policy, config.clipping_regime, order, clip)?;
            let objective = minibatch_objective(&minibatch, config.clipping_regime, order, clip)?;
            let (log_ratio_max, log_ratio_min) = ratio_envelopes(&minibatch)?;
            let grad_norm = estimate.norm();
            if config.clipping_regime == ClipRegime::Sequence {
                let bound =
                    sequence_clip_step_bound(&minibatch, order, clip, config.learning_rate)?;
                debug_assert!(
                    config.learning_rate * grad_norm <= bound * (1.0 + 1e-9) + 1e-15,
                    "sequence-clipped step {} exceeds bound {bound}",
                    config.learning_rate * grad_norm
                );
            }
            metrics.push(UpdateMetrics {
                step,
                round,
                p_value: p,
                objective,
                grad_norm,
                policy_entropy: policy.mean_entropy(),
                log_ratio_max,
                log_ratio_min,
                clip_fraction: estimate.clip_fraction,
                mean_reward,
                v_of_p: variance_bound_term(&minibatch, order)?,
            });
            policy.ascend(&estimate.vector, config.learning_rate)?;
            last_minibatch = minibatch;
            step += 1;
        }
    }

    Ok(RunLog {
        metrics,
        initial_success,
        final_success: task.success_probability(&policy),
        final_policy: policy,
        final_p: p,
        last_minibatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleShape;

    fn small_config(p: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk(p, seed);
        cfg.rollouts_per_round = 64;
        cfg.minibatch_size = 4;
        cfg.updates_per_round = 2;
        cfg.total_rounds = 5;
        cfg.schedule.total_steps = cfg.default_schedule_steps();
        cfg
    }

    #[test]
    fn deterministic_policy_gives_identical_rollouts() {
        let mut logits = Array2::zeros((8, 16));
        for pos in 0..8 {
            logits[[pos, pos]] = 1000.0;
        }
        let policy = PolicyParams::from_logits(logits).unwrap();
        let task = TaskSpec::default_sparse();
        let b = sample_group(
            &policy,
            &task,
            8,
            &Substreams::new(3),
            0,
            0,
            StdKind::Population,
        )
        .unwrap();
        assert!(b
            .rollouts
            .iter()
            .all(|r| r.token_ids == b.rollouts[0].token_ids));
        assert!(b.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn same_seed_same_group() {
        let policy = PolicyParams::uniform(8, 16);
        let task = TaskSpec::default_dense();
        let s = Substreams::new(11);
        let a = sample_group(&policy, &task, 8, &s, 2, 16, StdKind::Population).unwrap();
        let b = sample_group(&policy, &task, 8, &s, 2, 16, StdKind::Population).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = sample_group(&policy, &task, 8, &s, 3, 16, StdKind::Population).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn refresh_with_same_policy_gives_unit_ratios() {
        let policy = PolicyParams::uniform(8, 16);
        let task = TaskSpec::default_sparse();
        let b = sample_group(
            &policy,
            &task,
            8,
            &Substreams::new(0),
            0,
            0,
            StdKind::Population,
        )
        .unwrap();
        let r = refresh_logprobs(&b, &policy).unwrap();
        for rollout in &r.rollouts {
            assert_eq!(rollout.new_logprobs, rollout.old_logprobs);
        }
    }

    #[test]
    fn rows_stay_normalized() {
        let mut policy = PolicyParams::uniform(3, 5);
        policy
            .ascend(
                &[
                    0.3, -2.0, 7.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 50.0, -50.0, 0.1, 0.2, 0.3,
                ],
                1.0,
            )
            .unwrap();
        for pos in 0..3 {
            let s: f64 = policy.probabilities(pos).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(policy.mean_entropy() >= 0.0 && policy.mean_entropy() <= 5f64.ln());
        assert!((PolicyParams::uniform(2, 7).mean_entropy() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn task_validation_and_rewards() {
        let sparse = TaskSpec::default_sparse();
        sparse.validate().unwrap();
        let mut tokens = vec![0; 8];
        assert_eq!(sparse.reward(&tokens), 0.0);
        tokens[3] = 5;
        assert_eq!(sparse.reward(&tokens), 1.0);

        let dense = TaskSpec::Dense {
            length: 3,
            vocab: 4,
            target_sequence: vec![1, 2, 3],
            dense_threshold: 1,
            prior_logit: 0.0,
        };
        assert_eq!(dense.reward(&[1, 2, 0]), 1.0);
        assert_eq!(dense.reward(&[1, 0, 0]), 0.0);

        let bad = TaskSpec::Sparse {
            length: 4,
            vocab: 4,
            key_position: 4,
            key_token: 0,
        };
        assert!(bad.validate().is_err());
        let bad = TaskSpec::Dense {
            length: 2,
            vocab: 4,
            target_sequence: vec![1, 2],
            dense_threshold: 3,
            prior_logit: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dense_success_matches_enumeration() {
        let mut logits = Array2::zeros((3, 3));
        logits[[0, 1]] = 0.7;
        logits[[1, 0]] = -0.4;
        logits[[2, 2]] = 1.3;
        let policy = PolicyParams::from_logits(logits).unwrap();
        for k in 0..=3 {
            let task = TaskSpec::Dense {
                length: 3,
                vocab: 3,
                target_sequence: vec![1, 0, 2],
                dense_threshold: k,
                prior_logit: 0.0,
            };
            let mut brute = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        let lp =
                            policy.log_prob(0, a) + policy.log_prob(1, b) + policy.log_prob(2, c);
                        brute += lp.exp() * task.reward(&[a, b, c]);
                    }
                }
            }
            assert!((task.success_probability(&policy) - brute).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::desk(1.0, 0);
        cfg.validate().unwrap();
        cfg.rollouts_per_round = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(1.0, 0);
        cfg.minibatch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(1.0, 0);
        cfg.learning_rate = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_policy() {
        let mut cfg = small_config(2.0, 4);
        cfg.learning_rate = 0.0;
        let task = TaskSpec::default_sparse();
        let log = train(&cfg, &task).unwrap();
        assert_eq!(log.final_policy, PolicyParams::uniform(8, 16));
        assert_eq!(log.final_success, log.initial_success);
        assert!(log
            .metrics
            .iter()
            .all(|m| m.log_ratio_max == 0.0 && m.log_ratio_min == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config(-1.0, 9);
        let task = TaskSpec::default_dense();
        let a = train(&cfg, &task).unwrap();
        let b = train(&cfg, &task).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.metrics.len(), 10);
    }

    #[test]
    fn schedule_endpoints_reach_metrics() {
        let mut cfg = small_config(0.0, 1);
        cfg.schedule = ScheduleSpec {
            p_high: 2.0,
            p_low: -2.0,
            total_steps: cfg.default_schedule_steps(),
            shape: ScheduleShape::Linear,
            direction: Default::default(),
        };
        let log = train(&cfg, &TaskSpec::default_sparse()).unwrap();
        assert_eq!(log.metrics.first().unwrap().p_value, 2.0);
        assert_eq!(log.metrics.last().unwrap().p_value, -2.0);
        assert_eq!(log.final_p, -2.0);
    }

    #[test]
    fn first_update_of_round_is_order_invariant() {
        let task = TaskSpec::default_sparse();
        let policy = PolicyParams::uniform(8, 16);
        let s = Substreams::new(5);
        let mb: Vec<GroupBatch> = (0..4)
            .map(|k| sample_group(&policy, &task, 8, &s, 0, k * 8, StdKind::Population).unwrap())
            .collect();
        let clip = ClipConfig::new(0.2).unwrap();
        let reference = grad_estimator(
            &mb,
            &policy,
            ClipRegime::Sequence,
            HolderOrder::new(0.0).unwrap(),
            clip,
        )
        .unwrap();
        for p in [-3.0, -1.0, 1.0, 2.5] {
            for regime in [ClipRegime::None, ClipRegime::Sequence, ClipRegime::Token] {
                let e = grad_estimator(&mb, &policy, regime, HolderOrder::new(p).unwrap(), clip)
                    .unwrap();
                for (x, y) in e.vector.iter().zip(&reference.vector) {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }
}
