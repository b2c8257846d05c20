use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use holderpo::analysis::{median, tail_mean, v_curve, weight_profile};
use holderpo::schedule::INTERPOLATION_CONVENTION;
use holderpo::sim::RunLog;
use holderpo::verify::{self, VerifyOptions};
use holderpo::{
    gradient_weights, hhi, holder_mean, shannon_entropy, HolderOrder, RatioSequence, ScheduleSpec,
    TaskSpec, TrainConfig, TrainError,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{self, SCHEMA_VERSION};
use crate::output::{write_csv, write_json, write_ndjson, Provenance};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VERIFY_FAILED: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// Share of updates averaged for the tail statistics.
const TAIL_FRACTION: f64 = 0.2;

/// Orders at which the exported `V(p)` and weight-profile tables are evaluated.
fn export_grid() -> Vec<f64> {
    (-10..=10).map(|k| f64::from(k) * 0.5).collect()
}

fn provenance(config: serde_json::Value) -> Provenance {
    Provenance {
        version: holderpo::VERSION,
        schema_version: SCHEMA_VERSION,
        config,
    }
}

#[derive(Serialize)]
struct MeanReport {
    p: f64,
    rho: f64,
    weights: Vec<f64>,
    entropy: f64,
    hhi: f64,
}

fn parse_ratios(text: &str) -> anyhow::Result<Vec<f64>> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| anyhow!("ratio {s:?}: {e}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("no ratios given");
    }
    Ok(values)
}

pub fn mean(ratios: Option<&str>, ratios_file: Option<&Path>, ps: &[f64]) -> anyhow::Result<u8> {
    let text = match (ratios, ratios_file) {
        (Some(r), _) => r.to_string(),
        (None, Some(path)) => {
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        (None, None) => bail!("give --ratios or --ratios-file"),
    };
    let seq = RatioSequence::new(&parse_ratios(&text)?)?;
    let reports = ps
        .iter()
        .map(|&p| {
            let order = HolderOrder::new(p)?;
            let w = gradient_weights(&seq, order);
            Ok(MeanReport {
                p,
                rho: holder_mean(&seq, order),
                entropy: shannon_entropy(&w),
                hhi: hhi(&w),
                weights: w.into_vec(),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let out = if reports.len() == 1 {
        serde_json::to_string(&reports[0])?
    } else {
        serde_json::to_string(&reports)?
    };
    println!("{out}");
    Ok(EXIT_OK)
}

fn resolved_config(task: &TaskSpec, training: &TrainConfig) -> serde_json::Value {
    json!({
        "task": task,
        "training": training,
        "schedule_label": training.schedule.label(),
        "schedule_convention": INTERPOLATION_CONVENTION,
    })
}

#[derive(Serialize)]
struct Divergence {
    step: u64,
    rho: f64,
}

/// Writes every artifact of one run into `out_dir`.
fn write_run(
    out_dir: &Path,
    prov: &Provenance,
    log: &RunLog,
    wall_time_s: f64,
    divergence: Option<Divergence>,
) -> anyhow::Result<()> {
    let updates = log.metrics.len();
    write_json(
        &out_dir.join("run.json"),
        prov,
        &json!({
            "updates": updates,
            "initial_success": log.initial_success,
            "final_success": log.final_success,
            "final_p": log.final_p,
            "diverged": divergence,
        }),
    )?;
    write_ndjson(&out_dir.join("metrics.ndjson"), prov, &log.metrics)?;
    write_csv(&out_dir.join("metrics.csv"), prov, &log.metrics)?;
    write_json(
        &out_dir.join("summary.json"),
        prov,
        &json!({
            "initial_reward": log.initial_success,
            "final_reward": log.final_success,
            "final_sampled_reward": log.metrics.last().map(|m| m.mean_reward),
            "final_p": log.final_p,
            "updates": updates,
            "wall_time_s": wall_time_s,
            "diverged": divergence.is_some(),
        }),
    )?;
    write_json(
        &out_dir.join("policy.json"),
        prov,
        &json!({ "policy": log.final_policy }),
    )?;

    if !log.last_minibatch.is_empty() {
        let grid = export_grid();
        write_csv(
            &out_dir.join("v_curve.csv"),
            prov,
            &v_curve(&log.last_minibatch, &grid)?,
        )?;
        // the rollout with the widest log-ratio spread shows the most structure
        let mut widest: Option<(f64, RatioSequence)> = None;
        for rollout in log.last_minibatch.iter().flat_map(|g| &g.rollouts) {
            let seq = rollout.log_ratios()?.valid();
            let logs = seq.log_ratios();
            let spread = logs.iter().copied().fold(f64::MIN, f64::max)
                - logs.iter().copied().fold(f64::MAX, f64::min);
            if widest.as_ref().is_none_or(|(s, _)| spread > *s) {
                widest = Some((spread, seq));
            }
        }
        if let Some((_, seq)) = widest {
            write_csv(
                &out_dir.join("weight_profile.csv"),
                prov,
                &weight_profile(&seq, &grid)?,
            )?;
        }
    }
    Ok(())
}

pub fn train(config_path: &Path, seed: Option<u64>, out_dir: &Path) -> anyhow::Result<u8> {
    let cfg = config::load(config_path)?;
    let task = cfg.task()?;
    let mut training = cfg.training.resolve()?;
    if let Some(s) = seed {
        training.seed = s;
    }
    let prov = provenance(resolved_config(&task, &training));
    let started = Instant::now();
    match holderpo::train(&training, &task) {
        Ok(log) => {
            write_run(out_dir, &prov, &log, started.elapsed().as_secs_f64(), None)?;
            println!(
                "trained {} task, {} updates: success {:.4} -> {:.4}, final p {}; wrote {}",
                task.kind(),
                log.metrics.len(),
                log.initial_success,
                log.final_success,
                log.final_p,
                out_dir.display()
            );
            Ok(EXIT_OK)
        }
        Err(TrainError::Diverged { step, rho, partial }) => {
            write_run(
                out_dir,
                &prov,
                &partial,
                started.elapsed().as_secs_f64(),
                Some(Divergence { step, rho }),
            )?;
            eprintln!(
                "error: run diverged at update {step} (sequence ratio {rho:e}); partial results in {}",
                out_dir.display()
            );
            Ok(EXIT_DIVERGED)
        }
        Err(TrainError::Domain(e)) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Serialize)]
struct ComparisonRow {
    task: &'static str,
    label: String,
    seed: u64,
    p_start: f64,
    p_end: f64,
    initial_success: f64,
    final_success: f64,
    tail_envelope_gap: f64,
    tail_policy_entropy: f64,
    diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    task: &'static str,
    label: String,
    seeds: usize,
    median_final_success: f64,
    median_tail_envelope_gap: f64,
    median_tail_policy_entropy: f64,
    diverged_runs: usize,
}

/// Worker count from `HOLDERPO_THREADS`, or the machine's parallelism.
fn worker_count() -> anyhow::Result<usize> {
    match std::env::var("HOLDERPO_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("HOLDERPO_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run_one(task: &TaskSpec, cfg: &TrainConfig) -> anyhow::Result<ComparisonRow> {
    let (log, diverged) = match holderpo::train(cfg, task) {
        Ok(log) => (log, false),
        Err(TrainError::Diverged { partial, .. }) => (*partial, true),
        Err(TrainError::Domain(e)) => return Err(e.into()),
    };
    Ok(ComparisonRow {
        task: task.kind(),
        label: cfg.schedule.label(),
        seed: cfg.seed,
        p_start: cfg.schedule.start(),
        p_end: cfg.schedule.end(),
        initial_success: log.initial_success,
        final_success: log.final_success,
        tail_envelope_gap: tail_mean(&log.metrics, TAIL_FRACTION, |m| m.envelope_gap()),
        tail_policy_entropy: tail_mean(&log.metrics, TAIL_FRACTION, |m| m.policy_entropy),
        diverged,
    })
}

pub fn sweep(
    config_path: &Path,
    p_override: &[f64],
    seed: Option<u64>,
    out_dir: &Path,
) -> anyhow::Result<u8> {
    let cfg = config::load(config_path)?;
    let task = cfg.task()?;
    let base = cfg.training.resolve()?;
    let section = cfg.sweep.clone().unwrap_or_default();
    let p_list = if p_override.is_empty() {
        section.p_list.clone()
    } else {
        p_override.to_vec()
    };
    let steps = base.default_schedule_steps();
    let mut schedules: Vec<ScheduleSpec> = p_list
        .iter()
        .map(|&p| ScheduleSpec::constant(p, steps))
        .collect();
    schedules.extend(section.schedules.iter().map(|s| s.resolve(steps)));
    if schedules.is_empty() {
        bail!("field `sweep`: give `p_list`, `schedules` or --p");
    }
    for s in &schedules {
        s.validate()
            .map_err(|e| anyhow!("field `sweep.schedules`: {e}"))?;
    }
    let seeds = match seed {
        Some(s) => vec![s],
        None if section.seeds.is_empty() => vec![base.seed],
        None => section.seeds.clone(),
    };

    let jobs: Vec<TrainConfig> = schedules
        .iter()
        .flat_map(|schedule| {
            seeds.iter().map(|&seed| TrainConfig {
                seed,
                schedule: *schedule,
                ..base.clone()
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()?;
    let started = Instant::now();
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_one(&task, job))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    let summary: Vec<SummaryRow> = schedules
        .iter()
        .map(|schedule| {
            let label = schedule.label();
            let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| r.label == label).collect();
            let med = |f: fn(&ComparisonRow) -> f64| {
                median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                task: task.kind(),
                seeds: mine.len(),
                median_final_success: med(|r| r.final_success),
                median_tail_envelope_gap: med(|r| r.tail_envelope_gap),
                median_tail_policy_entropy: med(|r| r.tail_policy_entropy),
                diverged_runs: mine.iter().filter(|r| r.diverged).count(),
                label,
            }
        })
        .collect();

    let prov = provenance(json!({
        "task": task,
        "training": base,
        "schedules": schedules,
        "seeds": seeds,
        "schedule_convention": INTERPOLATION_CONVENTION,
    }));
    write_csv(&out_dir.join("comparison.csv"), &prov, &rows)?;
    write_csv(&out_dir.join("summary.csv"), &prov, &summary)?;
    let best = summary
        .iter()
        .max_by(|a, b| a.median_final_success.total_cmp(&b.median_final_success))
        .map(|s| s.label.clone());
    let diverged = rows.iter().filter(|r| r.diverged).count();
    write_json(
        &out_dir.join("summary.json"),
        &prov,
        &json!({
            "runs": rows.len(),
            "best_label": best,
            "diverged_runs": diverged,
            "wall_time_s": started.elapsed().as_secs_f64(),
        }),
    )?;
    for s in &summary {
        println!(
            "{:<16} median final success {:.4}  gap {:.4}  entropy {:.4}",
            s.label,
            s.median_final_success,
            s.median_tail_envelope_gap,
            s.median_tail_policy_entropy
        );
    }
    if diverged > 0 {
        eprintln!(
            "error: {diverged} run(s) diverged; see {}",
            out_dir.join("comparison.csv").display()
        );
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

pub fn verify(
    seed: u64,
    instances: usize,
    only: Option<String>,
    out_dir: Option<&Path>,
    as_json: bool,
) -> anyhow::Result<u8> {
    let mut options = VerifyOptions::new(seed, instances);
    options.only = only.clone();
    let report = verify::run(&options)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    if let Some(dir) = out_dir {
        let prov = provenance(json!({ "seed": seed, "instances": instances, "only": only }));
        write_json(&dir.join("report.json"), &prov, &report)?;
        std::fs::write(dir.join("report.txt"), report.to_text())?;
    }
    Ok(if report.all_passed() {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    })
}
