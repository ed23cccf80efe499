//! End-to-end acceptance criteria, one line each. Run with
//! `cargo test -p valuelab-harness --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use valuelab::cost::{is_reuse_profitable, total_time, CostParams};
use valuelab::experiment::{exact_success, one_shot_task, Difficulty, TaskShape};
use valuelab::math::derive_seed;
use valuelab::trainer::MetricsRecord;
use valuelab_harness::checks;
use valuelab_harness::config::ExperimentConfig;
use valuelab_harness::presets::preset;
use valuelab_harness::run::{replay, rounds_to, run_dir, run_experiment, ExperimentReport, MANIFEST, METRICS};
use valuelab_harness::validate::load_config;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn config(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config(preset(name).expect("preset exists"), &overrides).expect("preset loads")
}

fn run(name: &str, overrides: &[&str], out: &Path) -> Result<ExperimentReport, Box<dyn std::error::Error>> {
    let report = run_experiment(&config(name, overrides), out)?;
    if report.aborted() > 0 {
        return Err(format!("{} aborted runs in {name}", report.aborted()).into());
    }
    Ok(report)
}

fn check(result: valuelab_harness::Result<checks::CheckResult>) -> Outcome {
    let r = result?;
    Ok((r.pass, r.detail))
}

fn calibration() -> Outcome {
    check(checks::calibration(120, 101))
}

fn zero_reward_drift(tmp: &Path) -> Outcome {
    let report = run("calibration", &[], &tmp.join("calibration"))?;
    let (mut reval_max, mut tbrm_min_peak) = (0.0f64, f64::INFINITY);
    let mut seeds = 0;
    for r in &report.results {
        let peak = r.metrics.iter().filter_map(|m| m.kl_sampled).fold(0.0, f64::max);
        if r.spec.method.starts_with("reval") {
            let exact = r.metrics.iter().filter_map(|m| m.kl_exact).fold(0.0, f64::max);
            reval_max = reval_max.max(peak.abs()).max(exact.abs());
            seeds += 1;
        } else {
            tbrm_min_peak = tbrm_min_peak.min(peak);
        }
    }
    let iterations = report.results[0].metrics.last().map_or(0, |m| m.iteration + 1);
    Ok((
        seeds >= 3 && iterations >= 200 && reval_max <= 1e-8 && tbrm_min_peak > 1e-3,
        format!("{seeds} seeds x {iterations} rounds, ReVal max KL {reval_max:e}, TBRM min peak KL {tbrm_min_peak:.4}"),
    ))
}

fn gradients() -> Outcome {
    check(checks::gradients(100, 103))
}

fn fixed_point() -> Outcome {
    check(checks::fixed_point(25, 104))
}

fn shaping() -> Outcome {
    check(checks::shaping(25, 105))
}

fn replay_accounting() -> Outcome {
    check(checks::replay_accounting(500, 106))
}

fn sampled_reference_success() -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let (mdp, policy) = one_shot_task(Difficulty::Hard, &TaskShape::default())?;
    let prompt = mdp.prompt_state(0);
    let mut total = 0.0;
    for i in 0..1024 {
        total += mdp.rollout(&policy, &prompt, derive_seed(7, i, 0), 1.0)?.rule_reward;
    }
    Ok((total / 1024.0, exact_success(&mdp, &policy)?))
}

fn median_rounds(report: &ExperimentReport, method: &str, cap: usize) -> Option<usize> {
    let mut rounds: Vec<usize> = report
        .results
        .iter()
        .filter(|r| r.spec.method == method)
        .map(|r| rounds_to(&r.metrics, r.spec.output.threshold).unwrap_or(cap + 1))
        .collect();
    rounds.sort_unstable();
    rounds.get(rounds.len() / 2).copied().filter(|&r| r <= cap)
}

fn speedup(tmp: &Path) -> Outcome {
    let (avg, exact) = sampled_reference_success()?;
    let methods = r#"sweep.methods=[{objective="grpo"},{objective="reval",step=4}]"#;
    let report = run("reuse_sweep", &[methods], &tmp.join("reuse"))?;
    let cap = report.results[0].spec.trainer.iterations;
    let seeds = report.results.len() / 2;
    let (grpo, reval) = (
        median_rounds(&report, "grpo", cap),
        median_rounds(&report, "reval_step4", cap),
    );
    let ratio = match (grpo, reval) {
        (Some(g), Some(r)) => g as f64 / r as f64,
        _ => 0.0,
    };
    Ok((
        seeds >= 5 && (avg - 0.10).abs() <= 0.03 && ratio >= 1.5,
        format!("reference avg@1024 {avg:.3} (exact {exact:.3}), median rounds GRPO {grpo:?} vs ReVal step 4 {reval:?}, speedup {ratio:.2}x over {seeds} seeds"),
    ))
}

fn terminal_kl(metrics: &[MetricsRecord]) -> Option<f64> {
    metrics.iter().rev().find(|m| m.reset).and_then(|m| m.kl_exact)
}

fn beta_kl(tmp: &Path) -> Outcome {
    let report = run("beta_sweep", &[], &tmp.join("beta"))?;
    let cfg = config("beta_sweep", &[]);
    let betas = cfg.sweep.beta.clone();
    let mut monotone = true;
    let mut resets_clean = true;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let mut kls = Vec::new();
        for &beta in &betas {
            let r = report
                .results
                .iter()
                .find(|r| r.spec.seed == seed && r.spec.trainer.objective.beta == beta)
                .ok_or("missing sweep point")?;
            resets_clean &= r
                .metrics
                .iter()
                .filter(|m| m.reset)
                .all(|m| m.kl_after_reset == Some(0.0));
            resets_clean &= r.metrics.iter().any(|m| m.reset);
            kls.push(terminal_kl(&r.metrics).unwrap_or(f64::NAN));
        }
        // betas run large to small, so KL must rise strictly
        monotone &= kls.windows(2).all(|w| w[0] < w[1]);
        lines.push(kls.iter().map(|k| format!("{k:.2e}")).collect::<Vec<_>>().join("<"));
    }
    Ok((
        monotone && resets_clean,
        format!(
            "beta {betas:?}: terminal KL per seed [{}], KL after every reset is 0: {resets_clean}",
            lines.join(", ")
        ),
    ))
}

fn cost() -> Outcome {
    let base = CostParams {
        t_generation: 36.8,
        t_update: 2.8,
        k_generation: 580,
        k_update: 580,
    };
    let total = total_time(&base);
    let ratio = 470.0 / 580.0;
    let k2 = is_reuse_profitable(36.8, 2.8, ratio, 2);
    let k8 = is_reuse_profitable(36.8, 2.8, ratio, 8);
    Ok((
        total == 22968.0 && k2,
        format!("580 rounds project to {total}s; 470/580 rounds with K=2 profitable: {k2}, with K=8: {k8}"),
    ))
}

fn metrics_bytes(report: &ExperimentReport) -> Result<Vec<Vec<u8>>, std::io::Error> {
    report
        .results
        .iter()
        .map(|r| fs::read(run_dir(&report.dir, &r.spec).join(METRICS)))
        .collect()
}

fn determinism(tmp: &Path) -> Outcome {
    let overrides = ["trainer.iterations=15", "seeds=[0, 1]"];
    let a = run("difficulty", &overrides, &tmp.join("det_a"))?;
    let b = run("difficulty", &overrides, &tmp.join("det_b"))?;
    let (ma, mb) = (metrics_bytes(&a)?, metrics_bytes(&b)?);
    let rerun_equal = ma == mb && ma.iter().all(|m| !m.is_empty());
    let first = &a.results[0];
    let replayed = replay(&run_dir(&a.dir, &first.spec).join(MANIFEST), &tmp.join("det_replay"))?;
    let replay_equal = fs::read(replayed.dir.join(METRICS))? == ma[0];
    Ok((
        rerun_equal && replay_equal,
        format!(
            "{} runs byte-identical on rerun: {rerun_equal}, manifest replay identical: {replay_equal}",
            ma.len()
        ),
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("calibration at the reference", Box::new(calibration)),
        ("zero-reward drift", Box::new(|| zero_reward_drift(tmp))),
        ("gradients vs finite differences", Box::new(gradients)),
        ("soft-optimal fixed point", Box::new(fixed_point)),
        ("potential shaping invariance", Box::new(shaping)),
        ("replay reuse accounting", Box::new(replay_accounting)),
        ("speedup over GRPO", Box::new(|| speedup(tmp))),
        ("beta controls KL", Box::new(|| beta_kl(tmp))),
        ("cost model", Box::new(cost)),
        ("determinism", Box::new(|| determinism(tmp))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!(
            "{} {:>2} {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
