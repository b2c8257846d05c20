//! JSON run configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "task": {"kind": "sparse", "length": 8, "vocab": 16, "key_position": 3, "key_token": 5},
//!   "training": {"preset": "desk", "p": 2.0, "seed": 0},
//!   "sweep": {"p_list": [-2, -1, 0, 1, 2, 3], "seeds": [0, 1, 2, 3, 4]}
//! }
//! ```
//!
//! `task` may also be the string `"sparse"` or `"dense"` for the default
//! tasks. Every `training` field is optional and overrides the preset.
//! `schedule.total_steps` defaults to the number of updates minus one, so
//! the last update lands on the schedule's end point. Unknown keys are
//! rejected everywhere.

use std::path::Path;

use anyhow::{bail, Context};
use holderpo::{
    ClipRegime, ScheduleDirection, ScheduleShape, ScheduleSpec, StdKind, TaskSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub task: serde_json::Value,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// `"sparse"`, `"dense"` or a full task object.
fn resolve_task(value: &serde_json::Value) -> anyhow::Result<TaskSpec> {
    let task = match value.as_str() {
        Some("sparse") => TaskSpec::default_sparse(),
        Some("dense") => TaskSpec::default_dense(),
        Some(other) => {
            bail!("field `task`: unknown task name {other:?}, expected \"sparse\" or \"dense\"")
        }
        None => TaskSpec::deserialize(value).map_err(|e| anyhow::anyhow!("field `task`: {e}"))?,
    };
    task.validate()
        .map_err(|e| anyhow::anyhow!("field `task`: {e}"))?;
    Ok(task)
}

impl ConfigFile {
    pub fn task(&self) -> anyhow::Result<TaskSpec> {
        resolve_task(&self.task)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// `TrainConfig::desk`.
    #[default]
    Desk,
    /// `TrainConfig::comparison`.
    Comparison,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default)]
    pub preset: Preset,
    /// Static order; mutually exclusive with `schedule`.
    pub p: Option<f64>,
    pub schedule: Option<ScheduleSection>,
    pub group_size: Option<usize>,
    pub rollouts_per_round: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub updates_per_round: Option<usize>,
    pub learning_rate: Option<f64>,
    pub clip_epsilon: Option<f64>,
    pub clipping_regime: Option<ClipRegime>,
    pub seed: Option<u64>,
    pub total_rounds: Option<u64>,
    pub advantage_std: Option<StdKind>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub p_high: f64,
    pub p_low: f64,
    pub shape: ScheduleShape,
    #[serde(default)]
    pub direction: ScheduleDirection,
    pub total_steps: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub p_list: Vec<f64>,
    #[serde(default)]
    pub schedules: Vec<ScheduleSection>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

pub fn load(path: &Path) -> anyhow::Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ConfigFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        bail!(
            "field `schema_version`: unsupported version {}, expected {SCHEMA_VERSION}",
            cfg.schema_version
        );
    }
    cfg.task()?;
    Ok(cfg)
}

impl ScheduleSection {
    pub fn resolve(&self, total_updates_minus_one: u64) -> ScheduleSpec {
        ScheduleSpec {
            p_high: self.p_high,
            p_low: self.p_low,
            total_steps: self.total_steps.unwrap_or(total_updates_minus_one),
            shape: self.shape,
            direction: self.direction,
        }
    }
}

impl TrainingSection {
    /// The full training configuration, validated.
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        if self.p.is_some() && self.schedule.is_some() {
            bail!("field `training.p`: give either a static `p` or a `schedule`, not both");
        }
        let p = self.p.unwrap_or(1.0);
        let mut cfg = match self.preset {
            Preset::Desk => TrainConfig::desk(p, 0),
            Preset::Comparison => TrainConfig::comparison(p, 0),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        take!(
            group_size,
            rollouts_per_round,
            minibatch_size,
            updates_per_round,
            learning_rate,
            clip_epsilon,
            clipping_regime,
            seed,
            total_rounds,
            advantage_std
        );
        let steps = cfg.default_schedule_steps();
        cfg.schedule = match &self.schedule {
            Some(s) => s.resolve(steps),
            None => ScheduleSpec::constant(p, steps),
        };
        cfg.validate()
            .map_err(|e| anyhow::anyhow!("field `training`: {e}"))?;
        Ok(cfg)
    }
}
