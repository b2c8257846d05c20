//! Executable checks of the analytic properties of Hölder-mean aggregation
//! and the clipped objectives, evaluated over seeded random instances.
//!
//! Every check reports a status, the worst observed error against its
//! tolerance, and a SHA-256 digest of the data it consumed, so two runs
//! with the same `(seed, instance_count)` produce identical reports.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{DomainError, Result};
use crate::holder::{
    entropy_p_derivative, gradient_weights, hhi, holder_mean, limit_weights, mu_p_derivative,
    shannon_entropy, weight_p_derivative, weighted_log_mean, HolderOrder, LimitDirection,
    RatioSequence, WeightDistribution, DEFAULT_TIE_TOLERANCE,
};
use crate::objectives::{
    grad_estimator, grad_rho, grad_rho_power_form, minibatch_objective, second_moment_orthogonal,
    surrogate_seq_clip, surrogate_token_clip, surrogate_unclipped, variance_bound_term, ClipConfig,
    ClipRegime, GroupBatch, RolloutRecord, ScoreFunction,
};
use crate::sim::{refresh_logprobs, PolicyParams};

/// Orders probed by the per-instance checks.
pub const P_GRID: [f64; 13] = [
    -5.0, -3.0, -2.0, -1.0, -0.5, -1e-7, 0.0, 1e-7, 0.5, 1.0, 2.0, 3.0, 5.0,
];

/// `|p|` used for the concentration limits.
pub const LIMIT_PROBE: f64 = 40.0;

/// Slack on strict monotonicity comparisons.
pub const MONOTONE_SLACK: f64 = 1e-12;

const FD_STEP: f64 = 1e-5;
const SYMMETRIC_GRID: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0];

/// Weight formula and its `p`-derivative; swappable so the harness itself can be tested.
#[derive(Clone, Copy)]
pub struct Formulas {
    pub weights: fn(&RatioSequence, HolderOrder) -> Vec<f64>,
    pub weight_derivative: fn(&RatioSequence, HolderOrder, usize) -> Result<f64>,
}

impl Default for Formulas {
    fn default() -> Self {
        Self {
            weights: |r, o| gradient_weights(r, o).into_vec(),
            weight_derivative: weight_p_derivative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail { detail: String },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    /// The property this check establishes.
    pub claim: &'static str,
    #[serde(flatten)]
    pub status: CheckStatus,
    pub worst_error: f64,
    pub tolerance: f64,
    pub evaluated: usize,
    pub instance_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub instance_count: usize,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    /// True when no check failed (skips do not count as failures).
    pub fn all_passed(&self) -> bool {
        self.checks
            .iter()
            .all(|c| !matches!(c.status, CheckStatus::Fail { .. }))
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Digest over every check's digest, in report order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.checks {
            h.update(c.name.as_bytes());
            h.update(c.instance_digest.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "verify seed={} instances={} digest={}",
            self.seed,
            self.instance_count,
            &self.digest()[..16]
        );
        for c in &self.checks {
            let status = match &c.status {
                CheckStatus::Pass => "PASS".to_string(),
                CheckStatus::Fail { detail } => format!("FAIL ({detail})"),
                CheckStatus::Skipped { reason } => format!("SKIP ({reason})"),
            };
            let _ = writeln!(
                out,
                "{:<32} {:<6} worst={:.3e} tol={:.1e} n={:<5} {}",
                c.name, status, c.worst_error, c.tolerance, c.evaluated, c.claim
            );
        }
        let failed = self
            .checks
            .iter()
            .filter(|c| matches!(c.status, CheckStatus::Fail { .. }))
            .count();
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), failed);
        out
    }
}

/// What to run and on which data.
#[derive(Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub instance_count: usize,
    pub only: Option<String>,
    pub formulas: Formulas,
    /// Replaces the random ratio instances when set.
    pub instances: Option<Vec<RatioSequence>>,
}

impl VerifyOptions {
    pub fn new(seed: u64, instance_count: usize) -> Self {
        Self {
            seed,
            instance_count,
            only: None,
            formulas: Formulas::default(),
            instances: None,
        }
    }
}

type CheckFn = fn(&mut Ctx<'_>, &mut Tracker);

struct CheckDef {
    name: &'static str,
    claim: &'static str,
    tolerance: f64,
    run: CheckFn,
}

const CHECKS: &[CheckDef] = &[
    CheckDef {
        name: "special_means",
        claim: "p = 1, 0, -1 give the arithmetic, geometric and harmonic means",
        tolerance: 1e-12,
        run: check_special_means,
    },
    CheckDef {
        name: "geometric_limit",
        claim: "the mean converges to the geometric mean as p -> 0",
        tolerance: 1e-5,
        run: check_geometric_limit,
    },
    CheckDef {
        name: "mean_monotone",
        claim: "the mean is strictly increasing in p for non-uniform ratios",
        tolerance: MONOTONE_SLACK,
        run: check_mean_monotone,
    },
    CheckDef {
        name: "weights_normalized",
        claim: "weights sum to one and their p-derivatives sum to zero",
        tolerance: 1e-10,
        run: check_weights_normalized,
    },
    CheckDef {
        name: "weight_derivative_fd",
        claim: "dW_t/dp = W_t (log r_t - mu) matches central differences",
        tolerance: 1e-6,
        run: check_weight_derivative_fd,
    },
    CheckDef {
        name: "mu_derivative",
        claim: "dmu/dp is the weighted log-ratio variance, positive off uniform ratios",
        tolerance: 1e-6,
        run: check_mu_derivative,
    },
    CheckDef {
        name: "entropy_derivative_fd",
        claim: "dH/dp = -p Var_W(log r) matches central differences",
        tolerance: 1e-6,
        run: check_entropy_derivative_fd,
    },
    CheckDef {
        name: "entropy_monotone",
        claim: "weight entropy peaks at p = 0 with value ln n and strictly decreases in |p|",
        tolerance: MONOTONE_SLACK,
        run: check_entropy_monotone,
    },
    CheckDef {
        name: "limit_concentration",
        claim: "at p = +-40 the weights concentrate on the argmax / argmin set",
        tolerance: 1e-3,
        run: check_limit_concentration,
    },
    CheckDef {
        name: "weight_rise_fall",
        claim: "a non-maximal token's weight rises until mu(p) = log r_t, then strictly falls",
        tolerance: MONOTONE_SLACK,
        run: check_weight_rise_fall,
    },
    CheckDef {
        name: "hhi_profile",
        claim: "HHI is minimal at p = 0 with value 1/n and approaches its limit at large |p|",
        tolerance: 1e-3,
        run: check_hhi_profile,
    },
    CheckDef {
        name: "grad_rho_forms",
        claim: "the softmax-weighted and power forms of grad rho agree",
        tolerance: 1e-10,
        run: check_grad_rho_forms,
    },
    CheckDef {
        name: "grad_rho_fd",
        claim: "grad rho matches central differences over a tabular softmax policy",
        tolerance: 1e-4,
        run: check_grad_rho_fd,
    },
    CheckDef {
        name: "token_clip_grpo",
        claim: "the token-clipped objective at p = 1 equals the GRPO objective",
        tolerance: 1e-10,
        run: check_token_clip_grpo,
    },
    CheckDef {
        name: "seq_clip_gspo",
        claim: "the sequence-clipped objective at p = 0 equals the GSPO objective",
        tolerance: 1e-10,
        run: check_seq_clip_gspo,
    },
    CheckDef {
        name: "estimator_fd",
        claim: "all three gradient estimators match central differences of their objectives",
        tolerance: 1e-4,
        run: check_estimator_fd,
    },
    CheckDef {
        name: "trust_region_center",
        claim: "at theta = theta_old every estimator equals REINFORCE with advantages, for all p",
        tolerance: 1e-12,
        run: check_trust_region_center,
    },
    CheckDef {
        name: "seq_clip_pessimistic",
        claim: "the sequence-clipped surrogate never exceeds the unclipped one",
        tolerance: 1e-12,
        run: check_seq_clip_pessimistic,
    },
    CheckDef {
        name: "clipped_second_moment",
        claim: "sequence clipping can only shrink a sequence's squared gradient norm",
        tolerance: 1e-12,
        run: check_clipped_second_moment,
    },
    CheckDef {
        name: "variance_bound_monotone",
        claim: "V(p) = E[A^2 rho_p^2] is strictly increasing in p on non-degenerate samples",
        tolerance: MONOTONE_SLACK,
        run: check_variance_bound_monotone,
    },
    CheckDef {
        name: "orthogonal_factorization",
        claim: "with orthogonal score vectors the second moment is A^2 M^2 rho^2 HHI",
        tolerance: 1e-10,
        run: check_orthogonal_factorization,
    },
    CheckDef {
        name: "variance_minimizer_nonpositive",
        claim: "the orthogonal-model second moment is minimized at some p* <= 0",
        tolerance: 0.0,
        run: check_variance_minimizer_nonpositive,
    },
    CheckDef {
        name: "variance_increasing_positive_p",
        claim: "the orthogonal-model second moment is strictly increasing for p > 0",
        tolerance: MONOTONE_SLACK,
        run: check_variance_increasing_positive_p,
    },
    CheckDef {
        name: "amplification_bound",
        claim: "raising p amplifies an outlier's weight by at least C R^p_high",
        tolerance: 1e-12,
        run: check_amplification_bound,
    },
    CheckDef {
        name: "variance_contraction",
        claim: "V(p_low) < V(p_stat) for every p_low < p_stat",
        tolerance: MONOTONE_SLACK,
        run: check_variance_contraction,
    },
];

/// Names of every check, in report order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Runs every check on `instance_count` random instances drawn from `seed`.
pub fn check_all(seed: u64, instance_count: usize) -> Result<VerifyReport> {
    run(&VerifyOptions::new(seed, instance_count))
}

pub fn run(options: &VerifyOptions) -> Result<VerifyReport> {
    if options.instance_count == 0 {
        return Err(DomainError::Invalid(
            "instance_count must be at least 1".into(),
        ));
    }
    if let Some(name) = &options.only {
        if !CHECKS.iter().any(|c| c.name == name) {
            return Err(DomainError::Invalid(format!(
                "unknown check {name:?}; known checks: {}",
                check_names().join(", ")
            )));
        }
    }
    let instances = match &options.instances {
        Some(custom) if custom.is_empty() => return Err(DomainError::Empty),
        Some(custom) => custom.clone(),
        None => random_instances(options.seed, options.instance_count),
    };
    let checks = CHECKS
        .iter()
        .enumerate()
        .filter(|(_, c)| options.only.as_deref().is_none_or(|n| n == c.name))
        .map(|(index, def)| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(index as u64 + 1);
            let mut ctx = Ctx {
                instances: &instances,
                rng,
                hasher: Sha256::new(),
                formulas: options.formulas,
            };
            let mut tracker = Tracker::default();
            (def.run)(&mut ctx, &mut tracker);
            tracker.finish(def, hex::encode(ctx.hasher.finalize()))
        })
        .collect();
    Ok(VerifyReport {
        seed: options.seed,
        instance_count: instances.len(),
        checks,
    })
}

/// `count` ratio sequences with `n ∈ [2, 64]` and log-ratios uniform on `[−2, 2]`.
pub fn random_instances(seed: u64, count: usize) -> Vec<RatioSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=64);
            let logs = (0..n).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            RatioSequence::from_log_ratios(logs).expect("finite log-ratios")
        })
        .collect()
}

struct Ctx<'a> {
    instances: &'a [RatioSequence],
    rng: ChaCha8Rng,
    hasher: Sha256,
    formulas: Formulas,
}

impl Ctx<'_> {
    fn absorb(&mut self, values: &[f64]) {
        for v in values {
            self.hasher.update(v.to_le_bytes());
        }
    }

    /// The instances, each absorbed into the digest.
    fn instances(&mut self) -> Vec<RatioSequence> {
        let all = self.instances.to_vec();
        for r in &all {
            self.absorb(r.log_ratios());
        }
        all
    }

    fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| self.rng.gen_range(lo..=hi)).collect();
        self.absorb(&v);
        v
    }
}

#[derive(Default)]
struct Tracker {
    worst: f64,
    evaluated: usize,
    failures: usize,
    first_failure: Option<String>,
    skip_reason: Option<String>,
}

impl Tracker {
    /// Records one comparison; fails when `err > tol` or `err` is NaN.
    fn record(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        self.evaluated += 1;
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= tol) {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }

    fn skip(&mut self, reason: &str) {
        if self.skip_reason.is_none() {
            self.skip_reason = Some(reason.to_string());
        }
    }

    fn finish(self, def: &CheckDef, digest: String) -> CheckResult {
        let status = if self.failures > 0 {
            CheckStatus::Fail {
                detail: format!(
                    "{} of {} comparisons out of tolerance; first: {}",
                    self.failures,
                    self.evaluated,
                    self.first_failure.unwrap_or_default()
                ),
            }
        } else if self.evaluated == 0 {
            CheckStatus::Skipped {
                reason: self
                    .skip_reason
                    .unwrap_or_else(|| "no applicable instances".into()),
            }
        } else {
            CheckStatus::Pass
        };
        CheckResult {
            name: def.name,
            claim: def.claim,
            status,
            worst_error: self.worst,
            tolerance: def.tolerance,
            evaluated: self.evaluated,
            instance_digest: digest,
        }
    }
}

fn order(p: f64) -> HolderOrder {
    HolderOrder::new(p).expect("probe orders are finite")
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Relative error with a floor on the scale, for quantities that cross zero.
fn fd_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(floor)
}

/// Size of a strict-increase violation between consecutive values.
fn increase_violation(prev: f64, next: f64) -> f64 {
    let scale = prev.abs().max(next.abs()).max(f64::MIN_POSITIVE);
    ((prev - next) / scale).max(0.0)
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// The order actually evaluated: probes inside the geometric band are computed at `p = 0`.
fn effective_p(p: f64) -> f64 {
    if order(p).is_geometric() {
        0.0
    } else {
        p
    }
}

const UNIFORM_SKIP: &str = "all instances have uniform ratios; the property needs distinct ratios";

fn check_special_means(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let xs = r.ratios();
        let n = xs.len() as f64;
        let arithmetic = xs.iter().sum::<f64>() / n;
        let geometric = (r.log_ratios().iter().sum::<f64>() / n).exp();
        let harmonic = n / xs.iter().map(|x| 1.0 / x).sum::<f64>();
        for (p, want) in [(1.0, arithmetic), (0.0, geometric), (-1.0, harmonic)] {
            let got = holder_mean(&r, order(p));
            t.record(rel_err(got, want), 1e-12, || {
                format!("p={p}: {got} vs {want}")
            });
        }
    }
}

fn check_geometric_limit(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let g = holder_mean(&r, HolderOrder::geometric());
        for p in [-1e-7, 1e-7] {
            // an explicit power evaluation, not the geometric branch
            let o = HolderOrder::new(p)
                .unwrap()
                .with_zero_threshold(1e-9)
                .unwrap();
            let got = holder_mean(&r, o);
            t.record(rel_err(got, g), 1e-5, || format!("p={p}: {got} vs {g}"));
        }
    }
}

fn check_mean_monotone(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let values: Vec<f64> = P_GRID.iter().map(|&p| holder_mean(&r, order(p))).collect();
        for (k, w) in values.windows(2).enumerate() {
            t.record(increase_violation(w[0], w[1]), MONOTONE_SLACK, || {
                format!("p {} -> {}: {} -> {}", P_GRID[k], P_GRID[k + 1], w[0], w[1])
            });
        }
    }
}

fn check_weights_normalized(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let formulas = ctx.formulas;
    for r in ctx.instances() {
        for p in P_GRID.iter().copied().chain([-LIMIT_PROBE, LIMIT_PROBE]) {
            let w = (formulas.weights)(&r, order(p));
            let sum: f64 = w.iter().sum();
            t.record((sum - 1.0).abs(), 1e-10, || {
                format!("p={p}: weights sum to {sum}")
            });
            let dsum: f64 = (0..r.len())
                .map(|k| (formulas.weight_derivative)(&r, order(p), k).unwrap_or(f64::NAN))
                .sum();
            t.record(dsum.abs(), 1e-10, || {
                format!("p={p}: derivatives sum to {dsum}")
            });
        }
    }
}

fn check_weight_derivative_fd(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let formulas = ctx.formulas;
    for r in ctx.instances() {
        for &p in &P_GRID {
            let centre = effective_p(p);
            let plus = (formulas.weights)(&r, order(centre + FD_STEP));
            let minus = (formulas.weights)(&r, order(centre - FD_STEP));
            let at = (formulas.weights)(&r, order(p));
            for k in 0..r.len() {
                let fd = (plus[k] - minus[k]) / (2.0 * FD_STEP);
                let an = (formulas.weight_derivative)(&r, order(p), k).unwrap_or(f64::NAN);
                t.record(fd_err(an, fd, 1e-3 * at[k]), 1e-6, || {
                    format!("p={p}, token {k}: analytic {an:e} vs fd {fd:e}")
                });
            }
        }
    }
}

fn check_mu_derivative(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let uniform = r.is_uniform();
        for &p in &P_GRID {
            let an = mu_p_derivative(&r, order(p));
            let fd = central_difference(|q| weighted_log_mean(&r, order(q)), effective_p(p));
            t.record(fd_err(an, fd, 1e-3), 1e-6, || {
                format!("p={p}: analytic {an:e} vs fd {fd:e}")
            });
            let sign_ok = if uniform { an >= 0.0 } else { an > 0.0 };
            t.record(if sign_ok { 0.0 } else { f64::INFINITY }, 1e-6, || {
                format!("p={p}: derivative {an:e} has the wrong sign")
            });
        }
    }
}

fn entropy_at(r: &RatioSequence, p: f64) -> f64 {
    shannon_entropy(&gradient_weights(r, order(p)))
}

fn check_entropy_derivative_fd(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        for &p in &P_GRID {
            let an = entropy_p_derivative(&r, order(p));
            let fd = central_difference(|q| entropy_at(&r, q), effective_p(p));
            t.record(fd_err(an, fd, 1e-3), 1e-6, || {
                format!("p={p}: analytic {an:e} vs fd {fd:e}")
            });
        }
    }
}

fn check_entropy_monotone(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let peak = entropy_at(&r, 0.0);
        let ln_n = (r.len() as f64).ln();
        t.record(rel_err(peak, ln_n), 1e-12, || {
            format!("entropy at p=0 is {peak}, ln n = {ln_n}")
        });
        for sign in [1.0, -1.0] {
            let values: Vec<f64> = SYMMETRIC_GRID
                .iter()
                .map(|&a| entropy_at(&r, sign * a))
                .collect();
            for (k, w) in values.windows(2).enumerate() {
                // decreasing in |p|
                t.record(increase_violation(w[1], w[0]), MONOTONE_SLACK, || {
                    format!(
                        "|p| {} -> {} (sign {sign}): {} -> {}",
                        SYMMETRIC_GRID[k],
                        SYMMETRIC_GRID[k + 1],
                        w[0],
                        w[1]
                    )
                });
            }
        }
    }
}

/// Gap between the extreme log-ratio and the nearest non-tied value.
fn extreme_gap(logs: &[f64], direction: LimitDirection) -> Option<f64> {
    let sign = match direction {
        LimitDirection::Up => 1.0,
        LimitDirection::Down => -1.0,
    };
    let top = logs
        .iter()
        .map(|d| sign * d)
        .fold(f64::NEG_INFINITY, f64::max);
    logs.iter()
        .map(|d| sign * d)
        .filter(|d| top - d > DEFAULT_TIE_TOLERANCE)
        .map(|d| top - d)
        .reduce(f64::min)
}

fn check_limit_concentration(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        for (direction, p) in [
            (LimitDirection::Up, LIMIT_PROBE),
            (LimitDirection::Down, -LIMIT_PROBE),
        ] {
            if extreme_gap(r.log_ratios(), direction).is_none_or(|g| g < 0.5) {
                t.skip("no instance separates its extreme log-ratio from the rest by 0.5");
                continue;
            }
            let w = gradient_weights(&r, order(p));
            let limit = limit_weights(&r, direction);
            let on_set: f64 = w
                .as_slice()
                .iter()
                .zip(limit.as_slice())
                .filter(|(_, l)| **l > 0.0)
                .map(|(w, _)| w)
                .sum();
            t.record(1.0 - on_set, 1e-3, || {
                format!("p={p}: mass {on_set} on the extreme set")
            });
            let dist = w
                .as_slice()
                .iter()
                .zip(limit.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            t.record(dist, 1e-3, || {
                format!("p={p}: max deviation {dist} from limit_weights")
            });
        }
    }
}

/// `p` where `μ(p) = target`, by bisection; `None` if there is no crossing in `[lo, hi]`.
fn bisect_crossing(r: &RatioSequence, target: f64, lo: f64, hi: f64) -> Option<f64> {
    let f = |p: f64| weighted_log_mean(r, order(p)) - target;
    let (mut a, mut b) = (lo, hi);
    if f(a) > 0.0 || f(b) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-12 {
            break;
        }
    }
    Some(0.5 * (a + b))
}

fn check_weight_rise_fall(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let grid: Vec<f64> = (0..=200).map(|k| -5.0 + 0.05 * k as f64).collect();
    for r in ctx.instances() {
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let logs = r.log_ratios().to_vec();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let profile: Vec<Vec<f64>> = grid
            .iter()
            .map(|&p| {
                gradient_weights(&r, order(p))
                    .as_slice()
                    .iter()
                    .map(|w| w.ln())
                    .collect()
            })
            .collect();
        for (k, &target) in logs.iter().enumerate() {
            if max - target <= DEFAULT_TIE_TOLERANCE {
                continue;
            }
            let crossing = bisect_crossing(&r, target, -1e3, 1e3);
            let p_star = crossing.unwrap_or(f64::NEG_INFINITY);
            for j in 0..grid.len() - 1 {
                let (a, b) = (grid[j], grid[j + 1]);
                if a <= p_star && p_star <= b {
                    continue;
                }
                let (wa, wb) = (profile[j][k], profile[j + 1][k]);
                // rising before the crossing, falling after it; the straddling cell is skipped
                let violation = if b < p_star { wa - wb } else { wb - wa }.max(0.0);
                t.record(violation, MONOTONE_SLACK, || {
                    format!("token {k}, p {a} -> {b}, crossing {p_star}: log W {wa} -> {wb}")
                });
            }
        }
    }
}

fn check_hhi_profile(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let n = r.len() as f64;
        let at_zero = hhi(&gradient_weights(&r, order(0.0)));
        t.record(rel_err(at_zero, 1.0 / n), 1e-12, || {
            format!("HHI at p=0 is {at_zero}, 1/n = {}", 1.0 / n)
        });
        for &p in &P_GRID {
            let h = hhi(&gradient_weights(&r, order(p)));
            t.record(((at_zero - h) / at_zero).max(0.0), 1e-12, || {
                format!("HHI at p={p} is {h}, below its value at 0")
            });
        }
        for (direction, p) in [
            (LimitDirection::Up, LIMIT_PROBE),
            (LimitDirection::Down, -LIMIT_PROBE),
        ] {
            if extreme_gap(r.log_ratios(), direction).is_none_or(|g| g < 0.5) {
                continue;
            }
            let h = hhi(&gradient_weights(&r, order(p)));
            let limit = hhi(&limit_weights(&r, direction));
            t.record((h - limit).abs(), 1e-3, || {
                format!("HHI at p={p} is {h}, limit {limit}")
            });
        }
    }
}

fn check_grad_rho_forms(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let d = 5;
        let scores =
            Array2::from_shape_vec((r.len(), d), ctx.uniform_vec(r.len() * d, -1.0, 1.0)).unwrap();
        for &p in &P_GRID {
            let a = grad_rho(&r, scores.view(), order(p)).unwrap();
            let b = grad_rho_power_form(&r, scores.view(), order(p)).unwrap();
            let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
            let err = a
                .iter()
                .zip(b.iter())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
                / scale.max(1e-300);
            t.record(err, 1e-10, || format!("p={p}: forms differ by {err:e}"));
        }
    }
}

/// A tabular policy pair `(θ_old, θ)` and one rollout of `len` tokens.
struct PolicyFixture {
    old: PolicyParams,
    new: PolicyParams,
    tokens: Vec<usize>,
}

fn policy_fixture(ctx: &mut Ctx<'_>, len: usize, vocab: usize, spread: f64) -> PolicyFixture {
    let old_logits = ctx.uniform_vec(len * vocab, -1.0, 1.0);
    let delta = ctx.uniform_vec(len * vocab, -spread, spread);
    let new_logits: Vec<f64> = old_logits.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let tokens: Vec<usize> = (0..len).map(|_| ctx.rng.gen_range(0..vocab)).collect();
    ctx.absorb(&tokens.iter().map(|&t| t as f64).collect::<Vec<_>>());
    PolicyFixture {
        old: PolicyParams::from_logits(Array2::from_shape_vec((len, vocab), old_logits).unwrap())
            .unwrap(),
        new: PolicyParams::from_logits(Array2::from_shape_vec((len, vocab), new_logits).unwrap())
            .unwrap(),
        tokens,
    }
}

fn sequence_log_ratios(old: &PolicyParams, new: &PolicyParams, tokens: &[usize]) -> Vec<f64> {
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| new.log_prob(pos, tok) - old.log_prob(pos, tok))
        .collect()
}

fn check_grad_rho_fd(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    const VOCAB: usize = 4;
    for r in ctx.instances() {
        let len = r.len().min(12);
        let fx = policy_fixture(ctx, len, VOCAB, 0.5);
        let ratios =
            RatioSequence::from_log_ratios(sequence_log_ratios(&fx.old, &fx.new, &fx.tokens))
                .unwrap();
        let dim = len * VOCAB;
        let mut scores = Array2::zeros((len, dim));
        for (pos, &tok) in fx.tokens.iter().enumerate() {
            let mut row = vec![0.0; dim];
            fx.new.accumulate_score(pos, tok, 1.0, &mut row);
            scores.row_mut(pos).assign(&ndarray::Array1::from(row));
        }
        for p in [-3.0, -1.0, 0.0, 0.5, 2.0, 5.0] {
            let an = grad_rho(&ratios, scores.view(), order(p)).unwrap();
            let rho_at = |logits: &Array2<f64>| {
                let policy = PolicyParams::from_logits(logits.clone()).unwrap();
                let logs = sequence_log_ratios(&fx.old, &policy, &fx.tokens);
                holder_mean(&RatioSequence::from_log_ratios(logs).unwrap(), order(p))
            };
            let mut err: f64 = 0.0;
            let scale = an.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
            for j in 0..dim {
                let mut plus = fx.new.logits().clone();
                let mut minus = plus.clone();
                plus[[j / VOCAB, j % VOCAB]] += FD_STEP;
                minus[[j / VOCAB, j % VOCAB]] -= FD_STEP;
                let fd = (rho_at(&plus) - rho_at(&minus)) / (2.0 * FD_STEP);
                err = err.max((an[j] - fd).abs() / scale);
            }
            t.record(err, 1e-4, || {
                format!("p={p}: max relative deviation {err:e}")
            });
        }
    }
}

/// A group of random rollouts with ratios near one and random advantages.
fn random_group(ctx: &mut Ctx<'_>, spread: f64) -> GroupBatch {
    let g = ctx.rng.gen_range(2..=6);
    let rollouts = (0..g)
        .map(|_| {
            let n = ctx.rng.gen_range(1..=8);
            let old = ctx.uniform_vec(n, -4.0, -1.0);
            let delta = ctx.uniform_vec(n, -spread, spread);
            let new = old.iter().zip(&delta).map(|(o, d)| o + d).collect();
            RolloutRecord::new(vec![0; n], old, new, 0.0, vec![true; n]).unwrap()
        })
        .collect();
    let advantages = ctx.uniform_vec(g, -2.0, 2.0);
    GroupBatch::with_advantages(rollouts, advantages).unwrap()
}

fn group_log_ratios(batch: &GroupBatch) -> Vec<Vec<f64>> {
    batch
        .rollouts
        .iter()
        .map(|r| {
            r.new_logprobs
                .iter()
                .zip(&r.old_logprobs)
                .map(|(n, o)| n - o)
                .collect()
        })
        .collect()
}

/// `(1/G) Σ_i (1/|y_i|) Σ_t min(r Â, clip(r) Â)`.
fn grpo_objective(batch: &GroupBatch, eps: f64) -> f64 {
    let logs = group_log_ratios(batch);
    let total: f64 = logs
        .iter()
        .zip(&batch.advantages)
        .map(|(seq, &a)| {
            seq.iter()
                .map(|d| {
                    let r = d.exp();
                    (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)
                })
                .sum::<f64>()
                / seq.len() as f64
        })
        .sum();
    total / logs.len() as f64
}

/// `(1/G) Σ_i min(s Â, clip(s) Â)` with `s` the length-normalized sequence ratio.
fn gspo_objective(batch: &GroupBatch, eps: f64) -> f64 {
    let logs = group_log_ratios(batch);
    let total: f64 = logs
        .iter()
        .zip(&batch.advantages)
        .map(|(seq, &a)| {
            let s = (seq.iter().sum::<f64>() / seq.len() as f64).exp();
            (s * a).min(s.clamp(1.0 - eps, 1.0 + eps) * a)
        })
        .sum();
    total / logs.len() as f64
}

fn check_token_clip_grpo(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let clip = ClipConfig::new(0.2).unwrap();
    for _ in 0..ctx.instances.len() {
        let batch = random_group(ctx, 0.5);
        let ours = surrogate_token_clip(&batch, order(1.0), clip).unwrap();
        let reference = grpo_objective(&batch, 0.2);
        let err = (ours - reference).abs() / reference.abs().max(1.0);
        t.record(err, 1e-10, || format!("{ours} vs {reference}"));
    }
}

fn check_seq_clip_gspo(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let clip = ClipConfig::new(0.2).unwrap();
    for _ in 0..ctx.instances.len() {
        let batch = random_group(ctx, 0.5);
        let ours = surrogate_seq_clip(&batch, order(0.0), clip).unwrap();
        let reference = gspo_objective(&batch, 0.2);
        let err = (ours - reference).abs() / reference.abs().max(1.0);
        t.record(err, 1e-10, || format!("{ours} vs {reference}"));
    }
}

/// A minibatch of two groups sampled uniformly over tokens, with `θ_old` recorded.
fn tabular_minibatch(
    ctx: &mut Ctx<'_>,
    old: &PolicyParams,
    groups: usize,
    group_size: usize,
) -> Vec<GroupBatch> {
    let (len, vocab) = (old.length(), old.vocab());
    (0..groups)
        .map(|_| {
            let rollouts = (0..group_size)
                .map(|_| {
                    let tokens: Vec<usize> =
                        (0..len).map(|_| ctx.rng.gen_range(0..vocab)).collect();
                    ctx.absorb(&tokens.iter().map(|&t| t as f64).collect::<Vec<_>>());
                    let lp: Vec<f64> = tokens
                        .iter()
                        .enumerate()
                        .map(|(p, &v)| old.log_prob(p, v))
                        .collect();
                    RolloutRecord::new(tokens, lp.clone(), lp, 0.0, vec![true; len]).unwrap()
                })
                .collect();
            let advantages = ctx.uniform_vec(group_size, -1.5, 1.5);
            GroupBatch::with_advantages(rollouts, advantages).unwrap()
        })
        .collect()
}

/// True when some ratio the regime thresholds sits within `margin` of a clip edge.
fn near_kink(
    minibatch: &[GroupBatch],
    regime: ClipRegime,
    p: f64,
    clip: ClipConfig,
    margin: f64,
) -> bool {
    let edges = [clip.lower(), clip.upper()];
    let close = |x: f64| edges.iter().any(|e| (x - e).abs() < margin);
    minibatch.iter().any(|g| {
        group_log_ratios(g).iter().any(|seq| match regime {
            ClipRegime::None => false,
            ClipRegime::Sequence => {
                let r = RatioSequence::from_log_ratios(seq.clone()).unwrap();
                close(holder_mean(&r, order(p)))
            }
            ClipRegime::Token => seq.iter().any(|d| close(d.exp())),
        })
    })
}

fn check_estimator_fd(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    const LEN: usize = 6;
    const VOCAB: usize = 4;
    let clip = ClipConfig::new(0.2).unwrap();
    let regimes = [ClipRegime::None, ClipRegime::Sequence, ClipRegime::Token];
    let probes = [-2.0, -0.5, 0.0, 1.0, 3.0];
    for i in 0..ctx.instances.len() {
        let regime = regimes[i % regimes.len()];
        let p = probes[(i / regimes.len()) % probes.len()];
        let mut accepted = None;
        for _ in 0..20 {
            let fx = policy_fixture(ctx, LEN, VOCAB, 0.4);
            let sampled = tabular_minibatch(ctx, &fx.old, 2, 4);
            let minibatch: Vec<GroupBatch> = sampled
                .iter()
                .map(|g| refresh_logprobs(g, &fx.new).unwrap())
                .collect();
            if !near_kink(&minibatch, regime, p, clip, 1e-3) {
                accepted = Some((fx, sampled, minibatch));
                break;
            }
        }
        let Some((fx, sampled, minibatch)) = accepted else {
            t.skip("every draw sat within 1e-3 of a clip edge");
            continue;
        };
        let an = grad_estimator(&minibatch, &fx.new, regime, order(p), clip)
            .unwrap()
            .vector;
        let objective_at = |logits: &Array2<f64>| {
            let policy = PolicyParams::from_logits(logits.clone()).unwrap();
            let mb: Vec<GroupBatch> = sampled
                .iter()
                .map(|g| refresh_logprobs(g, &policy).unwrap())
                .collect();
            minibatch_objective(&mb, regime, order(p), clip).unwrap()
        };
        let scale = an.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-6);
        let mut err: f64 = 0.0;
        for j in 0..LEN * VOCAB {
            let mut plus = fx.new.logits().clone();
            let mut minus = plus.clone();
            plus[[j / VOCAB, j % VOCAB]] += FD_STEP;
            minus[[j / VOCAB, j % VOCAB]] -= FD_STEP;
            let fd = (objective_at(&plus) - objective_at(&minus)) / (2.0 * FD_STEP);
            err = err.max((an[j] - fd).abs() / scale);
        }
        t.record(err, 1e-4, || {
            format!("{regime:?} at p={p}: max relative deviation {err:e}")
        });
    }
}

fn check_trust_region_center(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    const LEN: usize = 5;
    const VOCAB: usize = 3;
    let clip = ClipConfig::new(0.2).unwrap();
    for _ in 0..ctx.instances.len().min(50) {
        let fx = policy_fixture(ctx, LEN, VOCAB, 0.0);
        let minibatch = tabular_minibatch(ctx, &fx.old, 2, 3);
        // REINFORCE: (1/BG) Σ Â (1/n) Σ_t (e_tok − π)
        let mut reference = vec![0.0; LEN * VOCAB];
        let count =
            minibatch.iter().map(|g| g.len()).sum::<usize>() as f64 / minibatch.len() as f64;
        let b = minibatch.len() as f64;
        for g in &minibatch {
            for (rollout, &a) in g.rollouts.iter().zip(&g.advantages) {
                let n = rollout.len() as f64;
                for (pos, &tok) in rollout.token_ids.iter().enumerate() {
                    let row = fx.old.logits().row(pos);
                    let z: f64 = row.iter().map(|l| l.exp()).sum();
                    for v in 0..VOCAB {
                        let indicator = if v == tok { 1.0 } else { 0.0 };
                        reference[pos * VOCAB + v] +=
                            a / n * (indicator - row[v].exp() / z) / (b * count);
                    }
                }
            }
        }
        let scale = reference
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(1e-300);
        for &p in &P_GRID {
            for regime in [ClipRegime::None, ClipRegime::Sequence, ClipRegime::Token] {
                let got = grad_estimator(&minibatch, &fx.old, regime, order(p), clip)
                    .unwrap()
                    .vector;
                let err = got
                    .iter()
                    .zip(&reference)
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
                    / scale;
                t.record(err, 1e-12, || {
                    format!("{regime:?} at p={p}: deviation {err:e}")
                });
            }
        }
    }
}

fn single_sequence(r: &RatioSequence, advantage: f64) -> GroupBatch {
    let n = r.len();
    let old = vec![-10.0; n];
    let new = r.log_ratios().iter().map(|d| d - 10.0).collect();
    let rollout = RolloutRecord::new((0..n).collect(), old, new, 0.0, vec![true; n]).unwrap();
    GroupBatch::with_advantages(vec![rollout], vec![advantage]).unwrap()
}

fn check_seq_clip_pessimistic(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let advantage = ctx.uniform_vec(1, -2.0, 2.0)[0];
        let eps = ctx.uniform_vec(1, 0.05, 0.5)[0];
        let batch = single_sequence(&r, advantage);
        for &p in &P_GRID {
            let clipped =
                surrogate_seq_clip(&batch, order(p), ClipConfig::new(eps).unwrap()).unwrap();
            let plain = surrogate_unclipped(&batch, order(p)).unwrap();
            let excess = (clipped - plain) / plain.abs().max(1.0);
            t.record(excess.max(0.0), 1e-12, || {
                format!("p={p}: clipped {clipped} > unclipped {plain}")
            });
        }
    }
}

/// Score vectors from a fixed random matrix, one row per position.
struct MatrixScores(Array2<f64>);

impl ScoreFunction for MatrixScores {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn accumulate_score(&self, position: usize, _token: usize, scale: f64, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(self.0.row(position)) {
            *o += scale * g;
        }
    }
}

fn check_clipped_second_moment(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let clip = ClipConfig::new(0.2).unwrap();
    for r in ctx.instances() {
        let d = 6;
        let scores = MatrixScores(
            Array2::from_shape_vec((r.len(), d), ctx.uniform_vec(r.len() * d, -1.0, 1.0)).unwrap(),
        );
        let advantage = ctx.uniform_vec(1, -2.0, 2.0)[0];
        let batch = [single_sequence(&r, advantage)];
        for &p in &P_GRID {
            let clipped =
                grad_estimator(&batch, &scores, ClipRegime::Sequence, order(p), clip).unwrap();
            let plain = grad_estimator(&batch, &scores, ClipRegime::None, order(p), clip).unwrap();
            let (c2, u2) = (clipped.norm().powi(2), plain.norm().powi(2));
            let expected = if clipped.clip_fraction > 0.0 { 0.0 } else { u2 };
            t.record(
                rel_err(c2, expected).max(((c2 - u2) / u2.max(1e-300)).max(0.0)),
                1e-12,
                || format!("p={p}: |g_clip|^2 = {c2:e}, |g|^2 = {u2:e}"),
            );
        }
    }
}

fn check_variance_bound_monotone(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let magnitude = ctx.uniform_vec(1, 0.5, 2.0)[0];
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let sample = [single_sequence(&r, magnitude)];
        let values: Vec<f64> = P_GRID
            .iter()
            .map(|&p| variance_bound_term(&sample, order(p)).unwrap())
            .collect();
        for (k, w) in values.windows(2).enumerate() {
            t.record(increase_violation(w[0], w[1]), MONOTONE_SLACK, || {
                format!(
                    "p {} -> {}: V {} -> {}",
                    P_GRID[k],
                    P_GRID[k + 1],
                    w[0],
                    w[1]
                )
            });
        }
    }
}

/// `n` orthonormal rows in `R^n`, by Gram–Schmidt on a random matrix.
fn orthonormal_rows(ctx: &mut Ctx<'_>, n: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_vec((n, n), ctx.uniform_vec(n * n, -1.0, 1.0)).unwrap();
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|x| x / norm);
    }
    m
}

fn check_orthogonal_factorization(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let bound = ctx.uniform_vec(1, 0.5, 2.0)[0];
        let advantage = ctx.uniform_vec(1, -2.0, 2.0)[0];
        let scores = orthonormal_rows(ctx, r.len()).mapv(|x| x * bound);
        for &p in &P_GRID {
            let g = grad_rho(&r, scores.view(), order(p)).unwrap();
            let explicit = advantage * advantage * g.dot(&g);
            let factored = second_moment_orthogonal(advantage, bound, &r, order(p)).unwrap();
            t.record(rel_err(explicit, factored), 1e-10, || {
                format!("p={p}: {explicit:e} vs {factored:e}")
            });
        }
    }
}

fn dense_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).round() as usize;
    (0..=count).map(|k| lo + step * k as f64).collect()
}

fn check_variance_minimizer_nonpositive(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let grid = dense_grid(-10.0, 10.0, 0.01);
    for r in ctx.instances() {
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let (p_star, _) = grid
            .iter()
            .map(|&p| (p, second_moment_orthogonal(1.0, 1.0, &r, order(p)).unwrap()))
            .fold((f64::NAN, f64::INFINITY), |best, (p, v)| {
                if v < best.1 {
                    (p, v)
                } else {
                    best
                }
            });
        t.record(p_star.max(0.0), 0.0, || {
            format!("grid minimizer at p = {p_star}")
        });
    }
}

fn check_variance_increasing_positive_p(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let grid = dense_grid(0.01, 10.0, 0.01);
    for r in ctx.instances() {
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let values: Vec<f64> = grid
            .iter()
            .map(|&p| second_moment_orthogonal(1.0, 1.0, &r, order(p)).unwrap())
            .collect();
        let worst = values
            .windows(2)
            .map(|w| increase_violation(w[0], w[1]))
            .fold(0.0, f64::max);
        t.record(worst, MONOTONE_SLACK, || {
            format!("largest decrease {worst:e} on (0, 10]")
        });
    }
}

/// One outlier of ratio `big` among `n − 1` unit ratios.
fn outlier_sequence(n: usize, big: f64) -> RatioSequence {
    let mut logs = vec![0.0; n];
    logs[0] = big.ln();
    RatioSequence::from_log_ratios(logs).unwrap()
}

fn check_amplification_bound(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    let mut cases = vec![(101usize, 4.0f64, 2.0f64)];
    for _ in 0..ctx.instances.len().min(20) {
        let n = ctx.rng.gen_range(3..=200);
        let v = ctx.uniform_vec(2, 0.0, 1.0);
        cases.push((n, 1.5 + 8.5 * v[0], 0.25 + 4.75 * v[1]));
    }
    for (n, big, p_high) in cases {
        let r = outlier_sequence(n, big);
        let w_high = gradient_weights(&r, order(p_high)).as_slice()[0];
        let w_stat = gradient_weights(&r, order(0.0)).as_slice()[0];
        let closed = big.powf(p_high) / (big.powf(p_high) + (n - 1) as f64);
        t.record(rel_err(w_high, closed), 1e-12, || {
            format!("W({p_high}) = {w_high} vs closed form {closed}")
        });
        let others = (n - 1) as f64;
        let c = others / (big.powf(p_high) + others);
        let bound = c * big.powf(p_high);
        let ratio = w_high / w_stat;
        t.record(((bound - ratio) / bound).max(0.0), 1e-12, || {
            format!("n={n}, R={big}, p={p_high}: amplification {ratio} below bound {bound}")
        });
    }
}

fn check_variance_contraction(ctx: &mut Ctx<'_>, t: &mut Tracker) {
    for r in ctx.instances() {
        let magnitude = ctx.uniform_vec(1, 0.5, 2.0)[0];
        if r.is_uniform() {
            t.skip(UNIFORM_SKIP);
            continue;
        }
        let sample = [single_sequence(&r, magnitude)];
        for p_stat in [0.0, 1.0, 2.0] {
            let v_stat = variance_bound_term(&sample, order(p_stat)).unwrap();
            for &p_low in P_GRID.iter().filter(|&&p| p < p_stat - 1e-6) {
                let v_low = variance_bound_term(&sample, order(p_low)).unwrap();
                t.record(increase_violation(v_low, v_stat), MONOTONE_SLACK, || {
                    format!("V({p_low}) = {v_low} not below V({p_stat}) = {v_stat}")
                });
            }
        }
    }
}

/// A deliberately wrong weight formula, `softmax(p log r / 2)`.
pub fn corrupted_formulas() -> Formulas {
    Formulas {
        weights: |r, o| {
            let half: Vec<f64> = r.log_ratios().iter().map(|d| d / 2.0).collect();
            let halved = RatioSequence::from_log_ratios(half).expect("finite");
            gradient_weights(&halved, o).into_vec()
        },
        weight_derivative: weight_p_derivative,
    }
}

/// Weights of `r` at `p`, as a distribution; convenience for callers of [`Formulas`].
pub fn weights_of(formulas: &Formulas, r: &RatioSequence, p: f64) -> Result<WeightDistribution> {
    WeightDistribution::new((formulas.weights)(r, HolderOrder::new(p)?))
}
