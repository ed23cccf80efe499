//! Executing experiments and writing their artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use valuelab::cost::{cost_report_csv, CostParams, CostRow};
use valuelab::policy::write_policy_file;
use valuelab::trainer::{MetricsRecord, RunStatus, Trainer};

use crate::config::{transform_name, ExperimentConfig, RunSpec};
use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.jsonl";

/// Written next to every run's metrics; enough to replay the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    /// SHA-256 of the serialized run spec.
    pub config_hash: String,
    pub seed: u64,
    pub status: String,
    #[serde(default)]
    pub detail: Option<String>,
    pub run: RunSpec,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::file(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::file(path, e.message().trim()))
    }
}

pub fn config_hash(spec: &RunSpec) -> String {
    let text = toml::to_string(spec).expect("run specs serialize");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Outcome of one seeded run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub spec: RunSpec,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub metrics: Vec<MetricsRecord>,
}

impl RunResult {
    pub fn rounds_to_threshold(&self) -> Option<usize> {
        rounds_to(&self.metrics, self.spec.output.threshold)
    }
}

pub fn rounds_to(metrics: &[MetricsRecord], threshold: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.eval_avg.is_some_and(|a| a >= threshold))
        .map(|m| m.generations)
}

/// Runs one spec into `dir`, writing metrics, checkpoints and the manifest.
/// A non-finite abort is reported through the status, not as an error.
pub fn run_single(spec: &RunSpec, dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(dir)?;
    let (mdp, init) = spec.task.build(&spec.policy)?;
    let trainer = Trainer::new(spec.trainer.clone(), &mdp, init)?;
    let every = spec.output.checkpoint_every;
    let checkpoints = dir.join("checkpoints");
    let outcome = trainer.train_with(|state| {
        if every > 0 && state.iteration % every == 0 {
            fs::create_dir_all(&checkpoints)?;
            let stem = format!("iter{:06}", state.iteration);
            write_policy_file(&checkpoints.join(format!("{stem}.policy")), &state.policy, None)?;
            write_policy_file(
                &checkpoints.join(format!("{stem}.reference")),
                state.reference.policy(),
                Some(state.reference.taken_at()),
            )?;
        }
        Ok(())
    })?;

    let mut out = BufWriter::new(File::create(dir.join(METRICS))?);
    for m in &outcome.metrics {
        serde_json::to_writer(&mut out, m).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    write_policy_file(&dir.join("final.policy"), &outcome.policy, None)?;
    write_policy_file(
        &dir.join("reference.policy"),
        outcome.reference.policy(),
        Some(outcome.reference.taken_at()),
    )?;
    fs::write(
        dir.join("reuse.json"),
        serde_json::to_string(outcome.buffer.reuse_histogram()).map_err(std::io::Error::from)?,
    )?;
    if spec.output.dump_buffer {
        outcome
            .buffer
            .dump_jsonl(BufWriter::new(File::create(dir.join("buffer.jsonl"))?))?;
    }
    let detail = match &outcome.status {
        RunStatus::Aborted { reason, .. } => Some(reason.clone()),
        _ => None,
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(spec),
        seed: spec.seed,
        status: outcome.status.name().to_string(),
        detail,
        run: spec.clone(),
    };
    fs::write(
        dir.join(MANIFEST),
        toml::to_string(&manifest).expect("manifests serialize"),
    )?;
    Ok(RunResult {
        spec: spec.clone(),
        dir: dir.to_path_buf(),
        status: outcome.status,
        metrics: outcome.metrics,
    })
}

/// Reruns the run recorded in a manifest into `dir`.
pub fn replay(manifest: &Path, dir: &Path) -> Result<RunResult> {
    run_single(&Manifest::read(manifest)?.run, dir)
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub results: Vec<RunResult>,
}

impl ExperimentReport {
    pub fn aborted(&self) -> usize {
        self.results
            .iter()
            .filter(|r| matches!(r.status, RunStatus::Aborted { .. }))
            .count()
    }
}

pub fn run_dir(root: &Path, spec: &RunSpec) -> PathBuf {
    root.join("runs").join(&spec.point).join(format!("seed{}", spec.seed))
}

/// Runs every sweep point and seed, then writes aggregate CSVs into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    fs::create_dir_all(out)?;
    fs::write(
        out.join("experiment.toml"),
        toml::to_string(cfg).expect("configs serialize"),
    )?;
    let results = cfg
        .runs()
        .par_iter()
        .map(|spec| run_single(spec, &run_dir(out, spec)))
        .collect::<Result<Vec<_>>>()?;
    write_aggregates(out, cfg.output.threshold, &results)?;
    Ok(ExperimentReport {
        dir: out.to_path_buf(),
        results,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> HarnessError {
    HarnessError::Io(std::io::Error::other(e))
}

fn write_aggregates(out: &Path, threshold: f64, results: &[RunResult]) -> Result<()> {
    let mut runs = csv::Writer::from_path(out.join("runs.csv")).map_err(csv_error)?;
    runs.write_record([
        "point",
        "method",
        "objective",
        "step",
        "beta",
        "reset_period",
        "reward_transform",
        "learning_rate",
        "seed",
        "status",
        "generations",
        "updates",
        "rounds_to_threshold",
        "final_eval",
        "final_kl_sampled",
        "final_kl_exact",
        "peak_kl_sampled",
        "final_loss",
    ])
    .map_err(csv_error)?;
    let mut rounds = csv::Writer::from_path(out.join("rounds.csv")).map_err(csv_error)?;
    rounds
        .write_record(["method", "step", "seed", &format!("rounds_to_{threshold}")])
        .map_err(csv_error)?;
    let mut kl = csv::Writer::from_path(out.join("kl_trajectory.csv")).map_err(csv_error)?;
    kl.write_record([
        "point",
        "beta",
        "seed",
        "iteration",
        "update",
        "kl_sampled",
        "kl_exact",
        "reset",
    ])
    .map_err(csv_error)?;
    let mut cost_rows = Vec::new();

    for r in results {
        let t = &r.spec.trainer;
        let last = r.metrics.last();
        let peak = r.metrics.iter().filter_map(|m| m.kl_sampled).reduce(f64::max);
        let final_eval = r.metrics.iter().rev().find_map(|m| m.eval_avg);
        let generations = last.map_or(0, |m| m.generations);
        let seed = r.spec.seed.to_string();
        let step = t.updates_per_iter.to_string();
        runs.write_record([
            r.spec.point.clone(),
            r.spec.method.clone(),
            t.objective.kind.name().to_string(),
            step.clone(),
            t.objective.beta.to_string(),
            t.reset_period.to_string(),
            transform_name(t.objective.reward_transform).to_string(),
            t.learning_rate.to_string(),
            seed.clone(),
            r.status.name().to_string(),
            generations.to_string(),
            r.metrics.len().to_string(),
            opt(r.rounds_to_threshold()),
            opt(final_eval),
            opt(last.and_then(|m| m.kl_sampled)),
            opt(last.and_then(|m| m.kl_exact)),
            opt(peak),
            opt(last.map(|m| m.loss)),
        ])
        .map_err(csv_error)?;
        rounds
            .write_record([r.spec.method.clone(), step, seed.clone(), opt(r.rounds_to_threshold())])
            .map_err(csv_error)?;
        for m in &r.metrics {
            kl.write_record([
                r.spec.point.clone(),
                t.objective.beta.to_string(),
                seed.clone(),
                m.iteration.to_string(),
                m.update.to_string(),
                opt(m.kl_sampled),
                opt(m.kl_exact),
                m.reset.to_string(),
            ])
            .map_err(csv_error)?;
        }
        cost_rows.push(CostRow {
            label: format!("{}/seed{}", r.spec.point, r.spec.seed),
            params: CostParams {
                t_generation: r.spec.cost.t_generation,
                t_update: r.spec.cost.t_update,
                k_generation: generations as u64,
                k_update: r.metrics.len() as u64,
            },
        });
    }
    runs.flush()?;
    rounds.flush()?;
    kl.flush()?;
    fs::write(out.join("cost.csv"), cost_report_csv(&cost_rows))?;
    Ok(())
}
