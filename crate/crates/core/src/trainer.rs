//! The replay training loop: collect rollouts, push them to the buffer, take
//! `K` gradient steps, and periodically reset the reference policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::mdp::{TokenMdp, Trajectory};
use crate::objectives::{apply_reward_transform, evaluate, ObjectiveConfig, ObjectiveKind};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{exact_kl_to_reference, kl_to_reference, LogitPolicy, ReferenceSnapshot, DEFAULT_STATE_LIMIT};
use crate::replay::{ReplayBuffer, SamplingMode};

/// Which data each of the `K` updates in an iteration consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePattern {
    /// Every update samples from the buffer.
    PureBuffer,
    /// The first update uses the fresh batch, the rest sample from the buffer.
    #[default]
    OnpolicyThenBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    /// Capacity `M`.
    pub capacity: usize,
    /// Trajectories per sampled update batch `B`; defaults to the fresh batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub update_pattern: UpdatePattern,
    #[serde(default)]
    pub sampling: SamplingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many iterations; 0 disables evaluation.
    #[serde(default = "default_eval_every")]
    pub every: usize,
    /// Rollouts per prompt for avg@n.
    #[serde(default = "default_eval_n")]
    pub n: usize,
    /// Stop training once avg@n reaches this value.
    #[serde(default)]
    pub stop_at: Option<f64>,
}

fn default_eval_every() -> usize {
    1
}
fn default_eval_n() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: default_eval_every(),
            n: default_eval_n(),
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// Iterations `T`, one generation round each.
    pub iterations: usize,
    #[serde(default = "one")]
    pub prompts_per_iter: usize,
    /// Rollouts per prompt `N`; also the group size for reward transforms
    /// and GRPO advantages.
    pub rollouts_per_prompt: usize,
    /// Updates per generation round `K`.
    #[serde(default = "one")]
    pub updates_per_iter: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Reference reset period in iterations; 0 never resets.
    #[serde(default)]
    pub reset_period: usize,
    /// Also reset whenever the mean absolute residual of an update falls below
    /// this value.
    #[serde(default)]
    pub residual_reset_below: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "unit")]
    pub temperature: f64,
    pub objective: ObjectiveConfig,
    pub buffer: BufferConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Fresh policy samples per update for the sampled KL estimate; 0 skips it.
    #[serde(default = "default_kl_samples")]
    pub kl_samples: usize,
    /// Also record KL by exhaustive enumeration.
    #[serde(default)]
    pub exact_kl: bool,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_kl_samples() -> usize {
    64
}

impl TrainerConfig {
    pub fn fresh_batch_size(&self) -> usize {
        self.prompts_per_iter * self.rollouts_per_prompt
    }

    pub fn update_batch_size(&self) -> usize {
        self.buffer.batch_size.unwrap_or_else(|| self.fresh_batch_size())
    }

    /// The objective as used in training, with groups of `N`.
    pub fn effective_objective(&self) -> ObjectiveConfig {
        self.objective.clone().with_group_size(self.rollouts_per_prompt)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        check(self.iterations >= 1, "iterations must be at least 1")?;
        check(self.prompts_per_iter >= 1, "prompts_per_iter must be at least 1")?;
        check(self.rollouts_per_prompt >= 1, "rollouts_per_prompt must be at least 1")?;
        check(self.updates_per_iter >= 1, "updates_per_iter must be at least 1")?;
        check(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive",
        )?;
        check(
            self.temperature.is_finite() && self.temperature > 0.0,
            "temperature must be positive",
        )?;
        check(self.update_batch_size() >= 1, "buffer.batch_size must be at least 1")?;
        check(
            self.buffer.capacity >= self.update_batch_size(),
            "buffer.capacity must be at least buffer.batch_size",
        )?;
        check(
            self.buffer.capacity >= self.fresh_batch_size(),
            "buffer.capacity must hold one generation round",
        )?;
        if let SamplingMode::WithoutReplacement = self.buffer.sampling {
            check(
                self.update_batch_size() <= self.fresh_batch_size(),
                "sampling without replacement needs batch_size <= fresh rollouts per round",
            )?;
        }
        check(self.eval.n >= 1, "eval.n must be at least 1")?;
        if let Some(r) = self.residual_reset_below {
            check(r.is_finite() && r > 0.0, "residual_reset_below must be positive")?;
        }
        self.effective_objective().validate()
    }
}

/// Means of the residual decomposition over an update batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub mean: f64,
    pub mean_abs: f64,
    pub reward_term: f64,
    pub value_gap: f64,
    pub log_ratio: f64,
}

/// One entry of the metrics stream; exactly one per update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Global update index, starting at 0.
    pub update: usize,
    /// Generation rounds completed so far.
    pub generations: usize,
    /// "fresh" or "buffer".
    pub source: String,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub grad_clipped: bool,
    pub clip_fraction: Option<f64>,
    pub kl_sampled: Option<f64>,
    pub kl_exact: Option<f64>,
    pub fresh_reward: f64,
    /// avg@n after the round's last update, on evaluation rounds.
    pub eval_avg: Option<f64>,
    pub staleness_mean: f64,
    pub staleness_max: u64,
    pub residuals: Option<ResidualSummary>,
    pub buffer_len: usize,
    /// Mean updates per trajectory over trajectories already evicted.
    pub retired_mean_uses: Option<f64>,
    pub reference_age: u64,
    pub reset: bool,
    pub kl_after_reset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped early because the evaluation target was reached.
    ReachedTarget {
        iteration: usize,
    },
    /// A loss, gradient or parameter became non-finite.
    Aborted {
        iteration: usize,
        update: usize,
        reason: String,
    },
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::ReachedTarget { .. } => "reached_target",
            RunStatus::Aborted { .. } => "aborted",
        }
    }
}

/// Everything the loop mutates.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub iteration: usize,
    pub policy: LogitPolicy,
    pub reference: ReferenceSnapshot,
    pub buffer: ReplayBuffer,
    pub optimizer: Optimizer,
    pub metrics: Vec<MetricsRecord>,
    pub generations: usize,
    pub updates: usize,
    next_id: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: LogitPolicy,
    pub reference: ReferenceSnapshot,
    pub metrics: Vec<MetricsRecord>,
    pub buffer: ReplayBuffer,
    pub status: RunStatus,
}

impl TrainOutcome {
    /// First generation round count at which avg@n reached `threshold`.
    pub fn rounds_to(&self, threshold: f64) -> Option<usize> {
        self.metrics
            .iter()
            .find(|m| m.eval_avg.is_some_and(|a| a >= threshold))
            .map(|m| m.generations)
    }
}

pub struct Trainer<'a> {
    cfg: TrainerConfig,
    objective: ObjectiveConfig,
    mdp: &'a TokenMdp,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    /// The reference starts as a copy of `init`.
    pub fn new(cfg: TrainerConfig, mdp: &'a TokenMdp, init: LogitPolicy) -> Result<Self> {
        cfg.validate()?;
        if init.space() != mdp.space() {
            return Err(Error::config("policy and task disagree on the token space"));
        }
        let state = TrainerState {
            iteration: 0,
            reference: ReferenceSnapshot::new(&init, 0),
            buffer: ReplayBuffer::new(cfg.buffer.capacity, cfg.buffer.sampling)?,
            optimizer: Optimizer::new(cfg.optimizer, init.num_params()),
            policy: init,
            metrics: Vec::new(),
            generations: 0,
            updates: 0,
            next_id: 0,
        };
        Ok(Self {
            objective: cfg.effective_objective(),
            cfg,
            mdp,
            state,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn reset_reference(&mut self) {
        self.state.reference = ReferenceSnapshot::new(&self.state.policy, self.state.iteration as u64);
    }

    /// Runs every remaining iteration.
    pub fn train(self) -> Result<TrainOutcome> {
        self.train_with(|_| Ok(()))
    }

    /// Like [`Trainer::train`], calling `after_iteration` once each round is
    /// complete.
    pub fn train_with(mut self, mut after_iteration: impl FnMut(&TrainerState) -> Result<()>) -> Result<TrainOutcome> {
        let mut status = RunStatus::Completed;
        while self.state.iteration < self.cfg.iterations {
            match self.run_iteration() {
                Ok(Some(stop)) => {
                    after_iteration(&self.state)?;
                    status = stop;
                    break;
                }
                Ok(None) => after_iteration(&self.state)?,
                Err(Error::NonFinite { what, trajectory }) => {
                    status = RunStatus::Aborted {
                        iteration: self.state.iteration,
                        update: self.state.updates,
                        reason: Error::NonFinite { what, trajectory }.to_string(),
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.finish(status))
    }

    pub fn finish(self, status: RunStatus) -> TrainOutcome {
        TrainOutcome {
            policy: self.state.policy,
            reference: self.state.reference,
            metrics: self.state.metrics,
            buffer: self.state.buffer,
            status,
        }
    }

    /// One generation round and its `K` updates. Returns a status when
    /// training should stop early.
    pub fn run_iteration(&mut self) -> Result<Option<RunStatus>> {
        let iter = self.state.iteration;
        let fresh = self.collect(iter)?;
        let fresh_reward = fresh.iter().map(|t| t.rule_reward).sum::<f64>() / fresh.len() as f64;
        self.state.buffer.push_batch(fresh.clone())?;
        self.state.generations += 1;

        let k = self.cfg.updates_per_iter;
        let first_record = self.state.metrics.len();
        let mut mean_abs_residual = None;
        for u in 0..k {
            let from_fresh = self.objective.kind == ObjectiveKind::Grpo
                || (u == 0 && self.cfg.buffer.update_pattern == UpdatePattern::OnpolicyThenBuffer);
            let batch = if from_fresh {
                self.state.buffer.record_use(fresh.iter().map(|t| t.id));
                fresh.clone()
            } else {
                let seed = derive_seed(self.cfg.seed, iter as u64, 0x100 + u as u64);
                self.state.buffer.sample_uniform(self.cfg.update_batch_size(), seed)?
            };
            let record = self.update(iter, &batch, from_fresh, fresh_reward)?;
            mean_abs_residual = record.residuals.map(|r| r.mean_abs);
            self.state.metrics.push(record);
        }

        let mut stop = None;
        if self.cfg.eval.every > 0 && (iter + 1).is_multiple_of(self.cfg.eval.every) {
            let avg = self.eval_avg(iter)?;
            self.state.metrics.last_mut().expect("K >= 1").eval_avg = Some(avg);
            if self.cfg.eval.stop_at.is_some_and(|target| avg >= target) {
                stop = Some(RunStatus::ReachedTarget { iteration: iter });
            }
        }

        let periodic = self.cfg.reset_period > 0 && (iter + 1).is_multiple_of(self.cfg.reset_period);
        let by_residual = matches!(
            (self.cfg.residual_reset_below, mean_abs_residual),
            (Some(limit), Some(r)) if r < limit
        );
        self.state.iteration += 1;
        if periodic || by_residual {
            self.reset_reference();
            let kl = self.sampled_kl(iter, 0xFFFF)?.unwrap_or(0.0);
            let last = self.state.metrics.last_mut().expect("K >= 1");
            last.reset = true;
            last.kl_after_reset = Some(kl);
        }
        debug_assert!(self.state.metrics.len() == first_record + k);
        Ok(stop)
    }

    fn collect(&mut self, iter: usize) -> Result<Vec<Trajectory>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, iter as u64, 0));
        let prompts: Vec<usize> = (0..self.cfg.prompts_per_iter)
            .map(|_| self.mdp.sample_prompt(&mut rng))
            .collect();
        let n = self.cfg.rollouts_per_prompt;
        let round_seed = derive_seed(self.cfg.seed, iter as u64, 1);
        let policy = &self.state.policy;
        let mdp = self.mdp;
        let temperature = self.cfg.temperature;
        let mut batch = (0..prompts.len() * n)
            .into_par_iter()
            .map(|j| {
                let prompt = mdp.prompt_state(prompts[j / n]);
                mdp.rollout(policy, &prompt, derive_seed(round_seed, j as u64, 2), temperature)
            })
            .collect::<Result<Vec<_>>>()?;
        for t in batch.iter_mut() {
            t.id = self.state.next_id;
            t.collected_at_iter = iter as u64;
            self.state.next_id += 1;
        }
        apply_reward_transform(&mut batch, n, self.objective.reward_transform)?;
        Ok(batch)
    }

    fn update(
        &mut self,
        iter: usize,
        batch: &[Trajectory],
        from_fresh: bool,
        fresh_reward: f64,
    ) -> Result<MetricsRecord> {
        let out = evaluate(&self.state.policy, &self.state.reference, batch, &self.objective)?;
        if !out.loss.is_finite() {
            return Err(Error::non_finite("loss", None));
        }
        let mut grad = out.grad.grad;
        let grad_norm = crate::math::l2_norm(&grad);
        let mut grad_clipped = false;
        if let Some(limit) = self.objective.grad_clip_threshold() {
            if grad_norm > limit {
                let scale = limit / grad_norm;
                grad.iter_mut().for_each(|g| *g *= scale);
                grad_clipped = true;
            }
        }
        self.state
            .optimizer
            .step(self.state.policy.params_mut(), &grad, self.cfg.learning_rate);
        if self.state.policy.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::non_finite("parameters", None));
        }
        let update = self.state.updates;
        self.state.updates += 1;

        let residuals = (!out.residuals.is_empty()).then(|| {
            let n = out.residuals.len() as f64;
            let mean = |f: &dyn Fn(&crate::objectives::Residual) -> f64| out.residuals.iter().map(f).sum::<f64>() / n;
            ResidualSummary {
                mean: mean(&|r| r.value),
                mean_abs: mean(&|r| r.value.abs()),
                reward_term: mean(&|r| r.reward_term),
                value_gap: mean(&|r| r.value_gap),
                log_ratio: mean(&|r| r.log_ratio),
            }
        });
        let staleness = self.state.buffer.staleness_stats(iter as u64)?;
        let kl_exact = if self.cfg.exact_kl {
            Some(exact_kl_to_reference(
                &self.state.policy,
                &self.state.reference,
                self.mdp,
                DEFAULT_STATE_LIMIT,
            )?)
        } else {
            None
        };
        Ok(MetricsRecord {
            iteration: iter,
            update,
            generations: self.state.generations,
            source: if from_fresh { "fresh" } else { "buffer" }.to_string(),
            loss: out.loss,
            grad_norm,
            grad_clipped,
            clip_fraction: out.clip_fraction,
            kl_sampled: self.sampled_kl(iter, update as u64)?,
            kl_exact,
            fresh_reward,
            eval_avg: None,
            staleness_mean: staleness.mean_age,
            staleness_max: staleness.max_age,
            residuals,
            buffer_len: self.state.buffer.len(),
            retired_mean_uses: self.state.buffer.retired_mean_uses(),
            reference_age: iter as u64 - self.state.reference.taken_at(),
            reset: false,
            kl_after_reset: None,
        })
    }

    fn sampled_kl(&self, iter: usize, salt: u64) -> Result<Option<f64>> {
        let n = self.cfg.kl_samples;
        if n == 0 {
            return Ok(None);
        }
        use rand::SeedableRng;
        let base = derive_seed(self.cfg.seed, iter as u64, 0x4B4C ^ (salt << 20));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base);
        let prompts: Vec<usize> = (0..n).map(|_| self.mdp.sample_prompt(&mut rng)).collect();
        let samples = prompts
            .par_iter()
            .enumerate()
            .map(|(j, &p)| {
                self.mdp.rollout(
                    &self.state.policy,
                    &self.mdp.prompt_state(p),
                    derive_seed(base, j as u64, 3),
                    1.0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        kl_to_reference(&self.state.policy, &self.state.reference, &samples).map(Some)
    }

    /// Prompt-weighted avg@n.
    fn eval_avg(&self, iter: usize) -> Result<f64> {
        let total: f64 = self.mdp.prompts().iter().map(|p| p.weight).sum();
        let mut avg = 0.0;
        for (i, p) in self.mdp.prompts().iter().enumerate() {
            let seed = derive_seed(self.cfg.seed, iter as u64, 0xE0 + i as u64);
            avg += p.weight
                * self.mdp.avg_at_n(
                    &self.state.policy,
                    &self.mdp.prompt_state(i),
                    self.cfg.eval.n,
                    seed,
                    1.0,
                )?;
        }
        Ok(avg / total)
    }
}

/// Convenience wrapper around [`Trainer`].
pub fn train(cfg: TrainerConfig, mdp: &TokenMdp, init: LogitPolicy) -> Result<TrainOutcome> {
    Trainer::new(cfg, mdp, init)?.train()
}
