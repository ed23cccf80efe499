//! Experiment configuration: one TOML file per experiment.

use serde::{Deserialize, Serialize};

use valuelab::experiment::{one_shot_task, Difficulty, TaskShape};
use valuelab::instances::seeded_tabular;
use valuelab::mdp::{Prompt, RewardRule, TokenId, TokenMdp, TokenSpace};
use valuelab::objectives::{ObjectiveKind, RewardTransform};
use valuelab::policy::{LogitPolicy, NetInit};
use valuelab::trainer::TrainerConfig;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Single prompt, one rewarded sequence, reference tuned to a difficulty.
    OneShot {
        difficulty: Difficulty,
        #[serde(default = "default_vocab")]
        vocab_size: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// `r ≡ 0` with a random reference.
    ZeroReward {
        #[serde(default = "default_vocab")]
        vocab_size: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
        #[serde(default)]
        reference: ReferenceInit,
    },
    Custom {
        vocab_size: usize,
        #[serde(default)]
        eos: Option<TokenId>,
        #[serde(default)]
        pad: Option<TokenId>,
        horizon: usize,
        prompts: Vec<Prompt>,
        rule: RewardRule,
        #[serde(default)]
        reference: ReferenceInit,
    },
}

fn default_vocab() -> usize {
    4
}
fn default_horizon() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceInit {
    /// All logits zero.
    Uniform,
    /// Logits uniform in `[-scale, scale]`.
    Random { seed: u64, scale: f64 },
}

impl Default for ReferenceInit {
    fn default() -> Self {
        ReferenceInit::Random { seed: 0, scale: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Tabular,
    TinyNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub kind: PolicyKind,
    /// Hidden width of the tiny network.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    16
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Tabular,
            hidden: default_hidden(),
        }
    }
}

/// One method in a sweep: an objective and its updates per round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub objective: ObjectiveKind,
    #[serde(default = "default_step")]
    pub step: usize,
}

fn default_step() -> usize {
    1
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self.objective {
            ObjectiveKind::Grpo if self.step == 1 => "grpo".to_string(),
            kind => format!("{}_step{}", kind.name(), self.step),
        }
    }
}

/// Sweep axes; empty axes keep the trainer's value. Points are the
/// cartesian product of the non-empty axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub reset_period: Vec<usize>,
    #[serde(default)]
    pub reward_transform: Vec<RewardTransform>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Write policy and reference checkpoints every this many iterations; 0 only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// avg@n level for rounds-to-threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Dump the final buffer contents as JSON lines.
    #[serde(default)]
    pub dump_buffer: bool,
}

fn default_threshold() -> f64 {
    0.95
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            threshold: default_threshold(),
            dump_buffer: false,
        }
    }
}

/// Unit costs for the time projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub t_generation: f64,
    pub t_update: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            t_generation: 36.8,
            t_update: 2.8,
        }
    }
}

/// Everything one seeded run needs. Written verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub experiment: String,
    pub point: String,
    pub method: String,
    pub seed: u64,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub output: OutputConfig,
    pub cost: CostConfig,
}

impl ExperimentConfig {
    /// Sweep points as `(label, trainer config)`, in a fixed order.
    pub fn points(&self) -> Vec<(String, String, TrainerConfig)> {
        let base = &self.trainer;
        let methods: Vec<Option<MethodSpec>> = axis(&self.sweep.methods);
        let betas = axis(&self.sweep.beta);
        let resets = axis(&self.sweep.reset_period);
        let transforms = axis(&self.sweep.reward_transform);
        let rates = axis(&self.sweep.learning_rate);
        let mut out = Vec::new();
        for m in &methods {
            for b in &betas {
                for r in &resets {
                    for t in &transforms {
                        for lr in &rates {
                            let mut cfg = base.clone();
                            let mut parts = Vec::new();
                            let method = match m {
                                Some(m) => {
                                    cfg.objective.kind = m.objective;
                                    cfg.updates_per_iter = m.step;
                                    parts.push(m.label());
                                    m.label()
                                }
                                None => MethodSpec {
                                    objective: cfg.objective.kind,
                                    step: cfg.updates_per_iter,
                                }
                                .label(),
                            };
                            if let Some(b) = b {
                                cfg.objective.beta = *b;
                                parts.push(format!("beta{b}"));
                            }
                            if let Some(r) = r {
                                cfg.reset_period = *r;
                                parts.push(format!("reset{r}"));
                            }
                            if let Some(t) = t {
                                cfg.objective.reward_transform = *t;
                                parts.push(transform_name(*t).to_string());
                            }
                            if let Some(lr) = lr {
                                cfg.learning_rate = *lr;
                                parts.push(format!("lr{lr}"));
                            }
                            let label = if parts.is_empty() {
                                method.clone()
                            } else {
                                parts.join("_")
                            };
                            out.push((label, method, cfg));
                        }
                    }
                }
            }
        }
        out
    }

    /// One spec per sweep point and seed.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for (point, method, cfg) in self.points() {
            for &seed in &self.seeds {
                let mut trainer = cfg.clone();
                trainer.seed = seed;
                out.push(RunSpec {
                    experiment: self.name.clone(),
                    point: point.clone(),
                    method: method.clone(),
                    seed,
                    task: self.task.clone(),
                    policy: self.policy.clone(),
                    trainer,
                    output: self.output.clone(),
                    cost: self.cost,
                });
            }
        }
        out
    }
}

fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

pub fn transform_name(t: RewardTransform) -> &'static str {
    match t {
        RewardTransform::ZeroOne => "zero_one",
        RewardTransform::MeanNormalized => "mean_normalized",
        RewardTransform::PlusMinusOne => "plus_minus_one",
    }
}

impl TaskConfig {
    /// The task and the initial policy, which is also the first reference.
    pub fn build(&self, policy: &PolicyConfig) -> Result<(TokenMdp, LogitPolicy)> {
        let (mdp, tabular) = match self {
            TaskConfig::OneShot {
                difficulty,
                vocab_size,
                horizon,
            } => {
                if policy.kind != PolicyKind::Tabular {
                    return Err(valuelab::Error::Config("one_shot tasks need a tabular policy".into()).into());
                }
                let shape = TaskShape {
                    vocab_size: *vocab_size,
                    horizon: *horizon,
                };
                let (mdp, reference) = one_shot_task(*difficulty, &shape)?;
                return Ok((mdp, reference));
            }
            TaskConfig::ZeroReward {
                vocab_size,
                horizon,
                reference,
            } => {
                let mdp = TokenMdp::new(
                    TokenSpace::plain(*vocab_size),
                    *horizon,
                    vec![Prompt {
                        tokens: vec![0],
                        weight: 1.0,
                    }],
                    RewardRule::Constant { value: 0.0 },
                )?;
                (mdp, reference)
            }
            TaskConfig::Custom {
                vocab_size,
                eos,
                pad,
                horizon,
                prompts,
                rule,
                reference,
            } => {
                let space = TokenSpace {
                    vocab_size: *vocab_size,
                    eos: *eos,
                    pad: *pad,
                };
                (
                    TokenMdp::new(space, *horizon, prompts.clone(), rule.clone())?,
                    reference,
                )
            }
        };
        let init = match (policy.kind, tabular) {
            (PolicyKind::Tabular, ReferenceInit::Uniform) => LogitPolicy::tabular(&mdp)?,
            (PolicyKind::Tabular, ReferenceInit::Random { seed, scale }) => seeded_tabular(&mdp, *seed, *scale)?,
            (PolicyKind::TinyNet, ReferenceInit::Uniform) => {
                LogitPolicy::tiny_net(&mdp, policy.hidden, NetInit::Zeros)?
            }
            (PolicyKind::TinyNet, ReferenceInit::Random { seed, scale }) => LogitPolicy::tiny_net(
                &mdp,
                policy.hidden,
                NetInit::Random {
                    seed: *seed,
                    scale: *scale,
                },
            )?,
        };
        Ok((mdp, init))
    }
}
