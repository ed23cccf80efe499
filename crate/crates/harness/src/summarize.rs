//! Aggregating finished runs: seed medians, interquartile ranges, speedups.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use valuelab::trainer::MetricsRecord;

use crate::error::{HarnessError, Result};
use crate::run::{rounds_to, Manifest, MANIFEST, METRICS};

/// Median and quartiles by linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        if lo == hi || v[lo] == v[hi] {
            v[lo]
        } else {
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        }
    };
    Some(Spread {
        median: q(0.5),
        q1: q(0.25),
        q3: q(0.75),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub experiment: String,
    pub point: String,
    pub method: String,
    pub runs: usize,
    pub reached: usize,
    /// Over runs that reached the threshold; unreached runs count as slower
    /// than every reached one and push the median to infinity.
    pub rounds: Option<Spread>,
    pub final_kl: Option<Spread>,
    pub final_eval: Option<Spread>,
    /// Baseline median rounds over this point's, when a GRPO point exists.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub dir: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub points: Vec<PointSummary>,
    pub failures: Vec<Failure>,
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HarnessError::file(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    if entries.iter().any(|p| p.file_name().is_some_and(|n| n == MANIFEST)) {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    for p in entries {
        if p.is_dir() {
            find_manifests(&p, out)?;
        }
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = fs::File::open(path).map_err(|e| HarnessError::file(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| HarnessError::file(path, e))
        })
        .collect()
}

struct Loaded {
    manifest: Manifest,
    metrics: Vec<MetricsRecord>,
}

/// Summarizes every run found under `dirs` (run directories or experiment
/// roots). Fails only when no run can be read at all.
pub fn summarize(dirs: &[PathBuf]) -> Result<Summary> {
    let mut run_dirs = Vec::new();
    for d in dirs {
        find_manifests(d, &mut run_dirs)?;
    }
    let mut failures = Vec::new();
    let mut loaded = Vec::new();
    for dir in run_dirs {
        let manifest = match Manifest::read(&dir.join(MANIFEST)) {
            Ok(m) => m,
            Err(e) => {
                failures.push(Failure {
                    dir,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let metrics = match read_metrics(&dir.join(METRICS)) {
            Ok(m) => m,
            Err(e) => {
                failures.push(Failure {
                    dir,
                    reason: format!("missing or unreadable metrics: {e}"),
                });
                continue;
            }
        };
        if manifest.status == "aborted" {
            failures.push(Failure {
                dir: dir.clone(),
                reason: format!("aborted: {}", manifest.detail.clone().unwrap_or_default()),
            });
        } else if manifest.status == "completed"
            && metrics.last().map_or(0, |m| m.generations) < manifest.run.trainer.iterations
        {
            failures.push(Failure {
                dir: dir.clone(),
                reason: "incomplete metrics log".to_string(),
            });
            continue;
        }
        loaded.push(Loaded { manifest, metrics });
    }
    if loaded.is_empty() {
        return Err(HarnessError::file(
            dirs.first().cloned().unwrap_or_default(),
            "no readable runs (missing metrics file?)",
        ));
    }

    let mut keys: Vec<(String, String)> = Vec::new();
    for l in &loaded {
        let k = (l.manifest.run.experiment.clone(), l.manifest.run.point.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut points: Vec<PointSummary> = keys
        .iter()
        .map(|(exp, point)| {
            let group: Vec<&Loaded> = loaded
                .iter()
                .filter(|l| &l.manifest.run.experiment == exp && &l.manifest.run.point == point)
                .collect();
            let rounds: Vec<f64> = group
                .iter()
                .map(|l| rounds_to(&l.metrics, l.manifest.run.output.threshold).map_or(f64::INFINITY, |r| r as f64))
                .collect();
            let final_kl: Vec<f64> = group
                .iter()
                .filter_map(|l| l.metrics.last().and_then(|m| m.kl_sampled))
                .collect();
            let final_eval: Vec<f64> = group
                .iter()
                .filter_map(|l| l.metrics.iter().rev().find_map(|m| m.eval_avg))
                .collect();
            PointSummary {
                experiment: exp.clone(),
                point: point.clone(),
                method: group[0].manifest.run.method.clone(),
                runs: group.len(),
                reached: rounds.iter().filter(|r| r.is_finite()).count(),
                rounds: if group.iter().any(|l| l.manifest.run.trainer.eval.every > 0) {
                    spread(&rounds)
                } else {
                    None
                },
                final_kl: spread(&final_kl),
                final_eval: spread(&final_eval),
                speedup: None,
            }
        })
        .collect();
    for i in 0..points.len() {
        let baseline = points
            .iter()
            .find(|p| p.experiment == points[i].experiment && p.method == "grpo")
            .and_then(|p| p.rounds.map(|r| r.median));
        if let (Some(b), Some(r)) = (baseline, points[i].rounds) {
            if b.is_finite() && r.median.is_finite() && r.median > 0.0 {
                points[i].speedup = Some(b / r.median);
            }
        }
    }
    Ok(Summary { points, failures })
}

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "experiment,point,method,runs,reached,rounds_median,rounds_q1,rounds_q3,speedup_vs_grpo,final_kl_median,final_kl_q1,final_kl_q3,final_eval_median\n",
        );
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.experiment,
                p.point,
                p.method,
                p.runs,
                p.reached,
                fmt(p.rounds.map(|s| s.median)),
                fmt(p.rounds.map(|s| s.q1)),
                fmt(p.rounds.map(|s| s.q3)),
                fmt(p.speedup),
                fmt(p.final_kl.map(|s| s.median)),
                fmt(p.final_kl.map(|s| s.q1)),
                fmt(p.final_kl.map(|s| s.q3)),
                fmt(p.final_eval.map(|s| s.median)),
            )
            .unwrap();
        }
        out
    }

    /// Plain-text report with a failures section.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            write!(out, "{}/{}: {} run(s)", p.experiment, p.point, p.runs).unwrap();
            if let Some(r) = p.rounds {
                write!(
                    out,
                    ", rounds median {} (IQR {}..{}), reached {}/{}",
                    fmt(Some(r.median)),
                    fmt(Some(r.q1)),
                    fmt(Some(r.q3)),
                    p.reached,
                    p.runs
                )
                .unwrap();
            }
            if let Some(s) = p.speedup {
                write!(out, ", speedup {s:.2}x").unwrap();
            }
            if let Some(k) = p.final_kl {
                write!(out, ", final KL median {:.6}", k.median).unwrap();
            }
            out.push('\n');
        }
        if !self.failures.is_empty() {
            out.push_str("\nfailures:\n");
            for f in &self.failures {
                writeln!(out, "  {}: {}", f.dir.display(), f.reason).unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles() {
        let s = spread(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3), (3.0, 2.0, 4.0));
        let one = spread(&[7.0]).unwrap();
        assert_eq!((one.median, one.q1, one.q3), (7.0, 7.0, 7.0));
        assert!(spread(&[]).is_none());
        assert!(spread(&[1.0, f64::INFINITY, f64::INFINITY])
            .unwrap()
            .median
            .is_infinite());
    }
}
