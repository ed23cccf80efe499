//! Training losses over batches of trajectories.
//!
//! All value-based losses are mean squared trajectory residuals. Writing
//! `lr(τ) = log π_θ(τ) − log π_ref(τ)` and `ρ = r(τ)/β`, the quantity inside
//! the square is
//!
//! | loss       | residual                                 |
//! |------------|------------------------------------------|
//! | ReVal      | `V_θ(s1) − V_ref(s1) + lr(τ) − ρ`        |
//! | TBRM       | `V_θ(s1) + lr(τ) − ρ`                    |
//! | Regression | `lr(τ) − ρ`                              |
//!
//! GRPO is the token-level clipped importance-ratio surrogate with
//! group-standardized advantages.
//!
//! Gradients are computed analytically through the logit cotangents
//! `∂ log π(a|s)/∂Q(s,·) = onehot(a) − π(·|s)` and `∂V(s)/∂Q(s,·) = π(·|s)`,
//! then pulled back through the policy parameterization.

pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::ScalarFn;
use crate::mdp::{State, Trajectory};
use crate::policy::{GradVector, LogitPolicy, ReferenceSnapshot};

/// Standard-deviation floor for GRPO advantages.
pub const GRPO_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Reval,
    Tbrm,
    Regression,
    Grpo,
}

impl ObjectiveKind {
    pub fn is_value_based(self) -> bool {
        !matches!(self, ObjectiveKind::Grpo)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Reval => "reval",
            ObjectiveKind::Tbrm => "tbrm",
            ObjectiveKind::Regression => "regression",
            ObjectiveKind::Grpo => "grpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTransform {
    /// Rule reward unchanged.
    ZeroOne,
    /// Subtract the mean reward of the prompt's group.
    MeanNormalized,
    /// `1 → +1`, `0 → −1`.
    PlusMinusOne,
}

/// Per-update gradient-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradClip {
    /// Clip at 10 for the regression loss, off for everything else.
    #[default]
    Default,
    Off,
    Max(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    #[serde(default = "default_transform")]
    pub reward_transform: RewardTransform,
    /// Lower ratio clip `ε_low`: ratios below `1 − ε_low` are clipped.
    #[serde(default = "default_clip_low")]
    pub clip_low: f64,
    /// Upper ratio clip `ε_high`: ratios above `1 + ε_high` are clipped.
    #[serde(default = "default_clip_high")]
    pub clip_high: f64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub grad_clip: GradClip,
}

fn default_transform() -> RewardTransform {
    RewardTransform::ZeroOne
}
fn default_clip_low() -> f64 {
    0.2
}
fn default_clip_high() -> f64 {
    0.28
}
fn default_group_size() -> usize {
    1
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, beta: f64) -> Self {
        Self {
            kind,
            beta,
            reward_transform: RewardTransform::ZeroOne,
            clip_low: default_clip_low(),
            clip_high: default_clip_high(),
            group_size: 1,
            grad_clip: GradClip::Default,
        }
    }

    pub fn with_transform(mut self, transform: RewardTransform) -> Self {
        self.reward_transform = transform;
        self
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta must be positive"));
        }
        if !(self.clip_low < self.clip_high) {
            return Err(Error::config("clip_low must be below clip_high"));
        }
        if self.clip_low < 0.0 || self.clip_low >= 1.0 {
            return Err(Error::config("clip_low must lie in [0, 1)"));
        }
        if self.group_size == 0 {
            return Err(Error::config("group_size must be at least 1"));
        }
        if let GradClip::Max(m) = self.grad_clip {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::config("grad_clip max must be positive"));
            }
        }
        Ok(())
    }

    /// Gradient-norm threshold in effect for this objective.
    pub fn grad_clip_threshold(&self) -> Option<f64> {
        match self.grad_clip {
            GradClip::Off => None,
            GradClip::Max(m) => Some(m),
            GradClip::Default => (self.kind == ObjectiveKind::Regression).then_some(10.0),
        }
    }
}

/// Decomposition of one trajectory's residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub trajectory: u64,
    /// The signed quantity inside the square:
    /// `value_gap + log_ratio − reward_term`.
    pub value: f64,
    /// `r(τ)/β`.
    pub reward_term: f64,
    /// `V_θ(s1) − V_ref(s1)` for ReVal, `V_θ(s1)` for TBRM, 0 for regression.
    pub value_gap: f64,
    /// `log π_θ(τ) − log π_ref(τ)`.
    pub log_ratio: f64,
}

impl Residual {
    /// Temporal-difference error `δ = reward_term − (value_gap + log_ratio)`;
    /// the loss gradient is `−2·mean[δ·∇(V_θ(s1) + log π_θ(τ))]`.
    pub fn td_error(&self) -> f64 {
        -self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: GradVector,
    /// One entry per trajectory for value-based losses, empty for GRPO.
    pub residuals: Vec<Residual>,
    /// Fraction of GRPO tokens whose ratio was clipped.
    pub clip_fraction: Option<f64>,
}

/// Transforms rewards in consecutive groups of `group_size`.
pub fn transform_rewards(raw: &[f64], group_size: usize, transform: RewardTransform) -> Result<Vec<f64>> {
    if group_size == 0 || !raw.len().is_multiple_of(group_size) {
        return Err(Error::contract(format!(
            "{} rewards cannot be split into groups of {group_size}",
            raw.len()
        )));
    }
    Ok(match transform {
        RewardTransform::ZeroOne => raw.to_vec(),
        RewardTransform::PlusMinusOne => raw.iter().map(|r| 2.0 * r - 1.0).collect(),
        RewardTransform::MeanNormalized => raw
            .chunks(group_size)
            .flat_map(|g| {
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(move |r| r - mean)
            })
            .collect(),
    })
}

/// Writes transformed rule rewards into `Trajectory::reward`.
pub fn apply_reward_transform(batch: &mut [Trajectory], group_size: usize, transform: RewardTransform) -> Result<()> {
    let raw: Vec<f64> = batch.iter().map(|t| t.rule_reward).collect();
    let transformed = transform_rewards(&raw, group_size, transform)?;
    for (t, r) in batch.iter_mut().zip(transformed) {
        t.reward = r;
    }
    Ok(())
}

/// Group-standardized advantages `(r − mean)/max(std, 1e-6)`; groups whose
/// rewards are all equal get advantage 0.
pub fn group_advantages(rewards: &[f64], group_size: usize) -> Result<Vec<f64>> {
    if group_size == 0 || !rewards.len().is_multiple_of(group_size) {
        return Err(Error::contract("group_size must divide the batch"));
    }
    Ok(rewards
        .chunks(group_size)
        .flat_map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let degenerate = g.iter().all(|&r| r == g[0]);
            let std = (g.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            g.iter().map(move |r| {
                if degenerate {
                    0.0
                } else {
                    (r - mean) / std.max(GRPO_STD_FLOOR)
                }
            })
        })
        .collect())
}

struct TrajectoryTerms {
    logprob: f64,
    ref_logprob: f64,
    value: f64,
    ref_value: f64,
}

fn terms(policy: &LogitPolicy, reference: &ReferenceSnapshot, t: &Trajectory) -> TrajectoryTerms {
    TrajectoryTerms {
        logprob: policy.logprob_trajectory(t),
        ref_logprob: reference.policy().logprob_trajectory(t),
        value: policy.soft_value(&t.prompt),
        ref_value: reference.policy().soft_value(&t.prompt),
    }
}

fn residual_from_terms(kind: ObjectiveKind, beta: f64, t: &Trajectory, x: &TrajectoryTerms) -> Result<Residual> {
    let value_gap = match kind {
        ObjectiveKind::Reval => x.value - x.ref_value,
        ObjectiveKind::Tbrm => x.value,
        ObjectiveKind::Regression => 0.0,
        ObjectiveKind::Grpo => {
            return Err(Error::contract("GRPO has no trajectory residual"));
        }
    };
    let log_ratio = x.logprob - x.ref_logprob;
    let reward_term = t.reward / beta;
    let value = value_gap + log_ratio - reward_term;
    if !value.is_finite() {
        return Err(Error::non_finite("residual", Some(t.id)));
    }
    Ok(Residual {
        trajectory: t.id,
        value,
        reward_term,
        value_gap,
        log_ratio,
    })
}

/// Adds `weight · ∇_θ log π_θ(τ)` into `grad`.
fn add_logprob_grad(policy: &LogitPolicy, t: &Trajectory, weight: f64, grad: &mut [f64]) {
    let space = policy.space();
    for (state, action) in t.steps() {
        if space.is_forced(&state) {
            continue;
        }
        let mut d = policy.action_probs(&state);
        for p in d.iter_mut() {
            *p *= -weight;
        }
        d[action as usize] += weight;
        policy.accumulate_grad(&state, &d, grad);
    }
}

/// Adds `weight · ∇_θ V_θ(s)` into `grad`.
fn add_value_grad(policy: &LogitPolicy, state: &State, weight: f64, grad: &mut [f64]) {
    let d: Vec<f64> = policy.action_probs(state).iter().map(|p| p * weight).collect();
    policy.accumulate_grad(state, &d, grad);
}

fn squared_residual_loss(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::contract("loss needs a nonempty batch"));
    }
    let n = batch.len() as f64;
    let residuals = batch
        .iter()
        .map(|t| residual_from_terms(cfg.kind, cfg.beta, t, &terms(policy, reference, t)))
        .collect::<Result<Vec<_>>>()?;
    let loss = residuals.iter().map(|r| r.value * r.value).sum::<f64>() / n;
    let mut grad = vec![0.0; policy.num_params()];
    for (t, r) in batch.iter().zip(&residuals) {
        let w = 2.0 * r.value / n;
        if w == 0.0 {
            continue;
        }
        add_logprob_grad(policy, t, w, &mut grad);
        if cfg.kind != ObjectiveKind::Regression {
            add_value_grad(policy, &t.prompt, w, &mut grad);
        }
    }
    let grad = GradVector { loss, grad };
    if !grad.is_finite() {
        return Err(Error::non_finite("gradient", None));
    }
    Ok(LossOutput {
        loss,
        grad,
        residuals,
        clip_fraction: None,
    })
}

fn expect_kind(cfg: &ObjectiveConfig, kind: ObjectiveKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::contract(format!(
            "config is for {}, called {}",
            cfg.kind.name(),
            kind.name()
        )));
    }
    Ok(())
}

/// Mean of `(V_θ(s1) − V_ref(s1) + log π_θ(τ) − r/β − log π_ref(τ))²`.
pub fn reval_loss(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    expect_kind(cfg, ObjectiveKind::Reval)?;
    squared_residual_loss(policy, reference, batch, cfg)
}

/// Mean of `(log π_θ(τ) − log π_ref(τ) − r/β + V_θ(s1))²`.
pub fn tbrm_loss(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    expect_kind(cfg, ObjectiveKind::Tbrm)?;
    squared_residual_loss(policy, reference, batch, cfg)
}

/// Mean of `(log π_θ(τ) − r/β − log π_ref(τ))²`.
pub fn regression_loss(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    expect_kind(cfg, ObjectiveKind::Regression)?;
    squared_residual_loss(policy, reference, batch, cfg)
}

/// Negative token-mean of `min(ρ·A, clip(ρ, 1−ε_low, 1+ε_high)·A)` with
/// `ρ = π_θ(a|s)/π_behavior(a|s)` and group-standardized advantages `A`
/// computed from the rule rewards of consecutive groups.
pub fn grpo_loss(policy: &LogitPolicy, batch: &[Trajectory], cfg: &ObjectiveConfig) -> Result<LossOutput> {
    expect_kind(cfg, ObjectiveKind::Grpo)?;
    if batch.is_empty() {
        return Err(Error::contract("loss needs a nonempty batch"));
    }
    let rewards: Vec<f64> = batch.iter().map(|t| t.rule_reward).collect();
    let advantages = group_advantages(&rewards, cfg.group_size)?;
    let space = policy.space();
    let tokens: usize = batch
        .iter()
        .map(|t| t.steps().filter(|(s, _)| !space.is_forced(s)).count())
        .sum();
    if tokens == 0 {
        return Err(Error::contract("batch has no sampled tokens"));
    }
    let n = tokens as f64;
    let (lo, hi) = (1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut grad = vec![0.0; policy.num_params()];
    for (t, &adv) in batch.iter().zip(&advantages) {
        for ((state, action), &behavior) in t.steps().zip(&t.behavior_logprobs) {
            if space.is_forced(&state) {
                continue;
            }
            let logprob = policy.logprob_action(&state, action);
            let ratio = (logprob - behavior).exp();
            let unclipped = ratio * adv;
            let clipped_term = ratio.clamp(lo, hi) * adv;
            if !unclipped.is_finite() {
                return Err(Error::non_finite("importance ratio", Some(t.id)));
            }
            if clipped_term < unclipped {
                objective += clipped_term;
                clipped += 1;
            } else {
                objective += unclipped;
                // d(ρA)/dθ = ρ·A·∇log π(a|s); the loss is the negated mean.
                let w = -ratio * adv / n;
                if w != 0.0 {
                    let mut d = policy.action_probs(&state);
                    for p in d.iter_mut() {
                        *p *= -w;
                    }
                    d[action as usize] += w;
                    policy.accumulate_grad(&state, &d, &mut grad);
                }
            }
        }
    }
    let loss = -objective / n;
    let grad = GradVector { loss, grad };
    if !grad.is_finite() {
        return Err(Error::non_finite("gradient", None));
    }
    Ok(LossOutput {
        loss,
        grad,
        residuals: Vec::new(),
        clip_fraction: Some(clipped as f64 / n),
    })
}

/// Dispatches on `cfg.kind`.
pub fn evaluate(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    match cfg.kind {
        ObjectiveKind::Grpo => grpo_loss(policy, batch, cfg),
        _ => squared_residual_loss(policy, reference, batch, cfg),
    }
}

/// Residual components of one trajectory under `cfg.kind`.
pub fn residual_decompose(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    trajectory: &Trajectory,
    cfg: &ObjectiveConfig,
) -> Result<Residual> {
    residual_from_terms(cfg.kind, cfg.beta, trajectory, &terms(policy, reference, trajectory))
}

/// The reduced ReVal gradient `−2·mean[δ·∇log π_θ(τ)]`, which leaves out the
/// `∇V_θ(s1)` term of the exact gradient. Diagnostic only.
pub fn reval_logprob_only_gradient(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    batch: &[Trajectory],
    cfg: &ObjectiveConfig,
) -> Result<GradVector> {
    let out = reval_loss(policy, reference, batch, cfg)?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    for (t, r) in batch.iter().zip(&out.residuals) {
        add_logprob_grad(policy, t, -2.0 * r.td_error() / n, &mut grad);
    }
    Ok(GradVector { loss: out.loss, grad })
}

/// A loss bound to a reference and a batch, as a function of the policy
/// parameters.
pub struct Objective<'a> {
    pub reference: &'a ReferenceSnapshot,
    pub batch: &'a [Trajectory],
    pub cfg: &'a ObjectiveConfig,
}

impl ScalarFn for Objective<'_> {
    fn value(&self, policy: &LogitPolicy) -> Result<f64> {
        Ok(evaluate(policy, self.reference, self.batch, self.cfg)?.loss)
    }

    fn gradient(&self, policy: &LogitPolicy) -> Result<GradVector> {
        Ok(evaluate(policy, self.reference, self.batch, self.cfg)?.grad)
    }
}
