//! The same losses rebuilt on the autodiff tape, as an independent gradient
//! route for verification.

use super::{group_advantages, ObjectiveConfig, ObjectiveKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mdp::{State, Trajectory};
use crate::policy::{LogitPolicy, ReferenceSnapshot};

fn soft_value<'t>(tape: &'t Tape, policy: &LogitPolicy, logits: &[Var<'t>]) -> Var<'t> {
    let masked = policy.space().masked();
    let kept: Vec<Var<'t>> = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != masked)
        .map(|(_, v)| *v)
        .collect();
    tape.logsumexp(&kept)
}

fn logprob_action<'t>(tape: &'t Tape, policy: &LogitPolicy, params: &[Var<'t>], state: &State, action: u32) -> Var<'t> {
    let logits = policy.logits_on_tape(tape, params, state);
    let v = soft_value(tape, policy, &logits);
    logits[action as usize] - v
}

fn logprob_trajectory<'t>(tape: &'t Tape, policy: &LogitPolicy, params: &[Var<'t>], t: &Trajectory) -> Var<'t> {
    let terms: Vec<Var<'t>> = t
        .steps()
        .filter(|(s, _)| !policy.space().is_forced(s))
        .map(|(s, a)| logprob_action(tape, policy, params, &s, a))
        .collect();
    tape.sum(&terms)
}

/// Loss value and its gradient with respect to every policy parameter,
/// computed by reverse-mode differentiation of the tape.
pub fn loss_and_grad(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::contract("loss needs a nonempty batch"));
    }
    let tape = Tape::new();
    let params: Vec<Var<'_>> = policy.params().iter().map(|&p| tape.var(p)).collect();
    let loss = match cfg.kind {
        ObjectiveKind::Grpo => grpo(&tape, policy, &params, batch, cfg)?,
        kind => {
            let squares: Vec<Var<'_>> = batch
                .iter()
                .map(|t| {
                    let lp = logprob_trajectory(&tape, policy, &params, t);
                    let ref_lp = reference.policy().logprob_trajectory(t);
                    let mut residual = lp.offset(-ref_lp - t.reward / cfg.beta);
                    if kind != ObjectiveKind::Regression {
                        let logits = policy.logits_on_tape(&tape, &params, &t.prompt);
                        let v = soft_value(&tape, policy, &logits);
                        residual = residual + v;
                    }
                    if kind == ObjectiveKind::Reval {
                        residual = residual.offset(-reference.policy().soft_value(&t.prompt));
                    }
                    residual.square()
                })
                .collect();
            tape.sum(&squares).scale(1.0 / batch.len() as f64)
        }
    };
    let adjoint = tape.gradient(loss);
    let grad = params.iter().map(|p| adjoint[p.index()]).collect();
    Ok((loss.value(), grad))
}

fn grpo<'t>(
    tape: &'t Tape,
    policy: &LogitPolicy,
    params: &[Var<'t>],
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<Var<'t>> {
    let rewards: Vec<f64> = batch.iter().map(|t| t.rule_reward).collect();
    let advantages = group_advantages(&rewards, cfg.group_size)?;
    let (lo, hi) = (1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
    let mut terms = Vec::new();
    for (t, &adv) in batch.iter().zip(&advantages) {
        for ((s, a), &behavior) in t.steps().zip(&t.behavior_logprobs) {
            if policy.space().is_forced(&s) {
                continue;
            }
            let ratio = logprob_action(tape, policy, params, &s, a).offset(-behavior).exp();
            let clipped = ratio.value().clamp(lo, hi) * adv;
            if clipped < ratio.value() * adv {
                terms.push(tape.constant(clipped));
            } else {
                terms.push(ratio.scale(adv));
            }
        }
    }
    let n = terms.len() as f64;
    Ok(tape.sum(&terms).scale(-1.0 / n))
}
