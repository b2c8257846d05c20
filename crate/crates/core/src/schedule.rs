//! Monotone schedules for the Hölder order over optimizer updates.
//!
//! A schedule moves `p` between `p_high` and `p_low` over `total_steps`
//! updates. With `u = step / T` and an easing `φ(u)`, a descending schedule
//! yields `p_high + (p_low − p_high)·φ(u)` and an ascending one
//! `p_low + (p_high − p_low)·φ(u)`. Both endpoints are returned exactly.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Result};

/// Easing family `φ: [0, 1] → [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Constant,
    Linear,
    Square,
    Cube,
    Sin,
}

impl ScheduleShape {
    pub fn ease(self, u: f64) -> f64 {
        match self {
            ScheduleShape::Constant => 0.0,
            ScheduleShape::Linear => u,
            ScheduleShape::Square => u * u,
            ScheduleShape::Cube => u * u * u,
            ScheduleShape::Sin => (FRAC_PI_2 * u).sin(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleShape::Constant => "constant",
            ScheduleShape::Linear => "linear",
            ScheduleShape::Square => "square",
            ScheduleShape::Cube => "cube",
            ScheduleShape::Sin => "sin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleDirection {
    /// `p_high → p_low`.
    #[default]
    Descending,
    /// `p_low → p_high`.
    Ascending,
}

/// Human-readable statement of the interpolation rule, recorded with each run.
pub const INTERPOLATION_CONVENTION: &str = "u = step/T; phi(u) in {linear: u, square: u^2, cube: u^3, sin: sin(pi*u/2)}; \
descending: p_high + (p_low - p_high)*phi(u); ascending: p_low + (p_high - p_low)*phi(u); constant: p_high";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub p_high: f64,
    pub p_low: f64,
    pub total_steps: u64,
    pub shape: ScheduleShape,
    #[serde(default)]
    pub direction: ScheduleDirection,
}

impl ScheduleSpec {
    /// A schedule that holds `p` fixed.
    pub fn constant(p: f64, total_steps: u64) -> Self {
        Self {
            p_high: p,
            p_low: p,
            total_steps: total_steps.max(1),
            shape: ScheduleShape::Constant,
            direction: ScheduleDirection::Descending,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_high.is_finite() && self.p_low.is_finite()) {
            return Err(DomainError::Invalid(
                "schedule endpoints must be finite".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(DomainError::Invalid(
                "schedule total_steps must be positive".into(),
            ));
        }
        if self.p_high < self.p_low {
            return Err(DomainError::Invalid(format!(
                "schedule needs p_high >= p_low, got {} < {}",
                self.p_high, self.p_low
            )));
        }
        Ok(())
    }

    /// `p` at `step = 0`.
    pub fn start(&self) -> f64 {
        match (self.shape, self.direction) {
            (ScheduleShape::Constant, _) | (_, ScheduleDirection::Descending) => self.p_high,
            (_, ScheduleDirection::Ascending) => self.p_low,
        }
    }

    /// `p` at `step = T`.
    pub fn end(&self) -> f64 {
        match (self.shape, self.direction) {
            (ScheduleShape::Constant, _) | (_, ScheduleDirection::Ascending) => self.p_high,
            (_, ScheduleDirection::Descending) => self.p_low,
        }
    }

    pub fn p_at(&self, step: u64) -> Result<f64> {
        p_at(self, step)
    }

    /// Short label such as `linear_2_-2` (start and end values).
    pub fn label(&self) -> String {
        match self.shape {
            ScheduleShape::Constant => format!("p_{}", self.p_high),
            shape => format!("{}_{}_{}", shape.name(), self.start(), self.end()),
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The scheduled order at `step ∈ [0, T]`.
pub fn p_at(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    spec.validate()?;
    let t = spec.total_steps;
    if step > t {
        return Err(DomainError::Invalid(format!(
            "step {step} outside schedule range [0, {t}]"
        )));
    }
    if spec.shape == ScheduleShape::Constant {
        return Ok(spec.p_high);
    }
    if step == 0 {
        return Ok(spec.start());
    }
    if step == t {
        return Ok(spec.end());
    }
    let u = step as f64 / t as f64;
    let phi = spec.shape.ease(u);
    Ok(match spec.direction {
        ScheduleDirection::Descending => spec.p_high + (spec.p_low - spec.p_high) * phi,
        ScheduleDirection::Ascending => spec.p_low + (spec.p_high - spec.p_low) * phi,
    })
}
