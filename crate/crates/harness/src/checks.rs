//! Exact property checks on seeded random tiny instances, for `oracle-check`.

use valuelab::cost::{breakeven_reuse, total_time, CostParams};
use valuelab::grad::finite_diff_check;
use valuelab::instances::{random_instance, InstanceSpec};
use valuelab::math::derive_seed;
use valuelab::mdp::Trajectory;
use valuelab::objectives::{evaluate, reval_loss, Objective, ObjectiveKind};
use valuelab::oracle::{shaping_invariance_check, soft_value_iteration_oracle};
use valuelab::replay::{expected_reuse, ReplayBuffer, SamplingMode};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

const STATE_LIMIT: usize = 2000;

pub fn calibration(cases: u64, seed: u64) -> Result<CheckResult> {
    let (mut worst_loss, mut worst_grad, mut tbrm_ok) = (0.0f64, 0.0f64, true);
    for i in 0..cases {
        let spec = InstanceSpec {
            zero_reward: true,
            at_reference: true,
        };
        let inst = random_instance(derive_seed(seed, i, 1), spec)?;
        let reval = evaluate(
            &inst.policy,
            &inst.reference,
            &inst.batch,
            &inst.config(ObjectiveKind::Reval),
        )?;
        worst_loss = worst_loss.max(reval.loss.abs());
        worst_grad = worst_grad.max(reval.grad.norm());
        let tbrm = evaluate(
            &inst.policy,
            &inst.reference,
            &inst.batch,
            &inst.config(ObjectiveKind::Tbrm),
        )?;
        if inst.reference.policy().soft_value(&inst.batch[0].prompt) != 0.0 {
            tbrm_ok &= tbrm.loss > 0.0 && tbrm.grad.norm() > 1e-6;
        }
    }
    Ok(CheckResult {
        name: "calibration",
        pass: worst_loss == 0.0 && worst_grad <= 1e-10 && tbrm_ok,
        detail: format!("max ReVal loss {worst_loss:e}, max grad norm {worst_grad:e}, TBRM positive: {tbrm_ok}"),
    })
}

pub fn gradients(cases: u64, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut pass = true;
    for i in 0..cases {
        let inst = random_instance(derive_seed(seed, i, 2), InstanceSpec::default())?;
        for kind in [
            ObjectiveKind::Reval,
            ObjectiveKind::Tbrm,
            ObjectiveKind::Regression,
            ObjectiveKind::Grpo,
        ] {
            let cfg = inst.config(kind);
            let f = Objective {
                reference: &inst.reference,
                batch: &inst.batch,
                cfg: &cfg,
            };
            let report = finite_diff_check(&inst.policy, &f, 1e-5, 1e-4)?;
            worst = worst.max(report.max_rel_error);
            pass &= report.pass;
        }
    }
    Ok(CheckResult {
        name: "gradients",
        pass,
        detail: format!("max relative error {worst:e} over {cases} instances x 4 objectives"),
    })
}

pub fn fixed_point(cases: u64, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let inst = random_instance(derive_seed(seed, i, 3), InstanceSpec::default())?;
        let star = soft_value_iteration_oracle(&inst.mdp, &inst.reference, inst.beta, STATE_LIMIT)?;
        let policy = star.to_tabular(&inst.mdp)?;
        let batch: Vec<Trajectory> = (0..16)
            .map(|j| {
                let p = (j as usize) % inst.mdp.prompts().len();
                inst.mdp
                    .rollout(&policy, &inst.mdp.prompt_state(p), derive_seed(seed, i, j), 1.0)
            })
            .collect::<valuelab::Result<_>>()?;
        let out = reval_loss(&policy, &inst.reference, &batch, &inst.config(ObjectiveKind::Reval))?;
        worst = worst.max(out.loss);
    }
    Ok(CheckResult {
        name: "fixed_point",
        pass: worst <= 1e-8,
        detail: format!("max ReVal loss at oracle logits {worst:e}"),
    })
}

pub fn shaping(cases: u64, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut pass = true;
    for i in 0..cases {
        let inst = random_instance(derive_seed(seed, i, 4), InstanceSpec::default())?;
        let reference = inst.reference.policy();
        let vref = shaping_invariance_check(
            &inst.mdp,
            reference,
            inst.beta,
            &|s| reference.soft_value(s),
            STATE_LIMIT,
        )?;
        let salt = derive_seed(seed, i, 5);
        let bounded = |s: &valuelab::mdp::State| {
            let h = s.tokens().iter().fold(salt, |acc, &t| derive_seed(acc, t as u64, 9));
            (h % 10_000) as f64 / 1000.0 - 5.0
        };
        let random = shaping_invariance_check(&inst.mdp, reference, inst.beta, &bounded, STATE_LIMIT)?;
        worst = worst.max(vref.max_policy_diff).max(random.max_policy_diff);
        pass &= vref.pass && random.pass;
    }
    Ok(CheckResult {
        name: "shaping",
        pass,
        detail: format!("max policy difference {worst:e}"),
    })
}

pub fn replay_accounting(iterations: u64, seed: u64) -> Result<CheckResult> {
    let (m, b, k) = (40usize, 8usize, 2usize);
    let mut buf = ReplayBuffer::new(m, SamplingMode::WithReplacement)?;
    let mut next = 0u64;
    for it in 0..iterations {
        let batch = (0..b)
            .map(|_| {
                next += 1;
                Trajectory {
                    id: next,
                    prompt: valuelab::mdp::State::prompt(vec![0]),
                    actions: Vec::new(),
                    behavior_logprobs: Vec::new(),
                    rule_reward: 0.0,
                    reward: 0.0,
                    collected_at_iter: it,
                }
            })
            .collect();
        buf.push_batch(batch)?;
        for u in 0..k as u64 {
            buf.sample_uniform(b, derive_seed(seed, it, u))?;
        }
    }
    let expected = expected_reuse(m, b, k)?;
    let mean = buf.retired_mean_uses().unwrap_or(0.0);
    let residence = buf
        .retired()
        .iter()
        .all(|r| r.evicted_at - r.pushed_at == (m / b) as u64);
    Ok(CheckResult {
        name: "replay_accounting",
        pass: (mean - expected).abs() / expected <= 0.05 && residence,
        detail: format!("mean uses {mean:.4} vs expected {expected}, residence bound exact: {residence}"),
    })
}

pub fn cost_model() -> Result<CheckResult> {
    let base = total_time(&CostParams {
        t_generation: 36.8,
        t_update: 2.8,
        k_generation: 580,
        k_update: 580,
    });
    let window = breakeven_reuse(36.8, 2.8, 470.0 / 580.0)?;
    let profitable = window.is_some_and(|w| w.min_k <= 2 && w.max_k.is_none_or(|k| k >= 2));
    Ok(CheckResult {
        name: "cost_model",
        pass: base == 22968.0 && profitable,
        detail: format!("580-round projection {base}s, profitable reuse window {window:?}"),
    })
}

pub fn all(cases: u64, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        calibration(cases, seed)?,
        gradients(cases, seed)?,
        fixed_point(cases.min(40), seed)?,
        shaping(cases.min(40), seed)?,
        replay_accounting(500, seed)?,
        cost_model()?,
    ])
}
