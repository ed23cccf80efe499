//! One-shot learning experiments: a single prompt, a reference policy tuned
//! to a target success rate, and learning curves in generation rounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Prompt, RewardRule, State, TokenId, TokenMdp, TokenSpace};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::optim::OptimizerConfig;
use crate::policy::LogitPolicy;
use crate::replay::SamplingMode;
use crate::trainer::{train, BufferConfig, EvalConfig, RunStatus, TrainerConfig, UpdatePattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Hard,
    Medium,
    Easy,
}

impl Difficulty {
    /// Reference success rate the task is built around.
    pub fn anchor(self) -> f64 {
        match self {
            Difficulty::Hard => 0.10,
            Difficulty::Medium => 0.40,
            Difficulty::Easy => 0.68,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Hard => "hard",
            Difficulty::Medium => "medium",
            Difficulty::Easy => "easy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Reval { step: usize },
    Grpo,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Reval { step } => format!("reval_step{step}"),
            Method::Grpo => "grpo".to_string(),
        }
    }
}

/// Shape of the one-shot task: a single prompt whose only rewarded response
/// is a fixed token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskShape {
    pub vocab_size: usize,
    pub horizon: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            horizon: 3,
        }
    }
}

/// Builds the task and a tabular reference whose exact success probability
/// is `difficulty.anchor()`: the target token gets the same probability
/// `anchor^(1/H)` at every on-target state, the rest is uniform.
pub fn one_shot_task(difficulty: Difficulty, shape: &TaskShape) -> Result<(TokenMdp, LogitPolicy)> {
    if shape.vocab_size < 2 || shape.horizon == 0 {
        return Err(Error::config("one-shot task needs vocab >= 2 and horizon >= 1"));
    }
    let target: Vec<TokenId> = (0..shape.horizon)
        .map(|h| ((h + 1) % shape.vocab_size) as TokenId)
        .collect();
    let mdp = TokenMdp::new(
        TokenSpace::plain(shape.vocab_size),
        shape.horizon,
        vec![Prompt {
            tokens: vec![0],
            weight: 1.0,
        }],
        RewardRule::ExactMatch { target: target.clone() },
    )?;
    let mut reference = LogitPolicy::tabular(&mdp)?;
    let p = difficulty.anchor().powf(1.0 / shape.horizon as f64);
    let others = (shape.vocab_size - 1) as f64;
    let boost = (p * others / (1.0 - p)).ln();
    let mut state = mdp.prompt_state(0);
    for &tok in &target {
        let mut logits = vec![0.0; shape.vocab_size];
        logits[tok as usize] = boost;
        reference.set_logits(&state, &logits)?;
        state = mdp.step(&state, tok)?;
    }
    Ok((mdp, reference))
}

/// Success probability of `policy` on the single prompt, by enumeration.
pub fn exact_success(mdp: &TokenMdp, policy: &LogitPolicy) -> Result<f64> {
    let RewardRule::ExactMatch { target } = mdp.rule() else {
        return Err(Error::contract("exact_success needs an exact-match task"));
    };
    let mut state: State = mdp.prompt_state(0);
    let mut prob = 1.0;
    for &tok in target {
        prob *= policy.action_probs(&state)[tok as usize];
        state = mdp.step(&state, tok)?;
    }
    Ok(prob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneShotSettings {
    pub task: TaskShape,
    pub rollouts: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub max_rounds: usize,
    pub eval_n: usize,
    pub threshold: f64,
    /// Buffer capacity in generation rounds.
    pub buffer_rounds: usize,
}

impl Default for OneShotSettings {
    fn default() -> Self {
        Self {
            task: TaskShape::default(),
            rollouts: 8,
            learning_rate: 0.05,
            beta: 0.1,
            max_rounds: 300,
            eval_n: 64,
            threshold: 0.95,
            buffer_rounds: 5,
        }
    }
}

impl OneShotSettings {
    pub fn trainer_config(&self, method: Method, seed: u64) -> TrainerConfig {
        let (kind, step) = match method {
            Method::Reval { step } => (ObjectiveKind::Reval, step),
            Method::Grpo => (ObjectiveKind::Grpo, 1),
        };
        TrainerConfig {
            iterations: self.max_rounds,
            prompts_per_iter: 1,
            rollouts_per_prompt: self.rollouts,
            updates_per_iter: step,
            learning_rate: self.learning_rate,
            optimizer: OptimizerConfig::default(),
            reset_period: 0,
            residual_reset_below: None,
            seed,
            temperature: 1.0,
            objective: ObjectiveConfig::new(kind, self.beta),
            buffer: BufferConfig {
                capacity: self.rollouts * self.buffer_rounds,
                batch_size: None,
                update_pattern: UpdatePattern::OnpolicyThenBuffer,
                sampling: SamplingMode::WithReplacement,
            },
            eval: EvalConfig {
                every: 1,
                n: self.eval_n,
                stop_at: Some(self.threshold),
            },
            kl_samples: 0,
            exact_kl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotRun {
    pub seed: u64,
    /// `(generation rounds, avg@n)` after each round.
    pub curve: Vec<(usize, f64)>,
    pub rounds_to_threshold: Option<usize>,
    pub status: RunStatus,
}

/// Learning curves for one method on one difficulty, one run per seed.
pub fn one_shot_experiment(
    difficulty: Difficulty,
    method: Method,
    seeds: &[u64],
    settings: &OneShotSettings,
) -> Result<Vec<OneShotRun>> {
    let (mdp, reference) = one_shot_task(difficulty, &settings.task)?;
    seeds
        .iter()
        .map(|&seed| {
            let out = train(settings.trainer_config(method, seed), &mdp, reference.clone())?;
            let curve = out
                .metrics
                .iter()
                .filter_map(|m| m.eval_avg.map(|a| (m.generations, a)))
                .collect();
            Ok(OneShotRun {
                seed,
                curve,
                rounds_to_threshold: out.rounds_to(settings.threshold),
                status: out.status,
            })
        })
        .collect()
}

/// Median with the upper middle element for even counts; unreached runs
/// count as infinitely slow.
pub fn median_rounds(runs: &[OneShotRun]) -> Option<usize> {
    let mut r: Vec<usize> = runs
        .iter()
        .map(|x| x.rounds_to_threshold.unwrap_or(usize::MAX))
        .collect();
    if r.is_empty() {
        return None;
    }
    r.sort_unstable();
    let m = r[r.len() / 2];
    (m != usize::MAX).then_some(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn anchors_are_exact() {
        for d in [Difficulty::Hard, Difficulty::Medium, Difficulty::Easy] {
            let (mdp, reference) = one_shot_task(d, &TaskShape::default()).unwrap();
            assert_abs_diff_eq!(exact_success(&mdp, &reference).unwrap(), d.anchor(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sampled_reference_success_matches_anchor() {
        let (mdp, reference) = one_shot_task(Difficulty::Hard, &TaskShape::default()).unwrap();
        let avg = mdp.avg_at_n(&reference, &mdp.prompt_state(0), 1024, 9, 1.0).unwrap();
        assert!((avg - 0.10).abs() <= 0.03, "avg@1024 {avg}");
    }

    #[test]
    fn easy_task_is_learned() {
        let runs = one_shot_experiment(
            Difficulty::Easy,
            Method::Reval { step: 2 },
            &[1, 2],
            &OneShotSettings::default(),
        )
        .unwrap();
        for r in &runs {
            assert!(r.rounds_to_threshold.is_some(), "seed {} curve {:?}", r.seed, r.curve);
        }
    }

    #[test]
    fn median_treats_failures_as_slowest() {
        let run = |r| OneShotRun {
            seed: 0,
            curve: Vec::new(),
            rounds_to_threshold: r,
            status: RunStatus::Completed,
        };
        assert_eq!(median_rounds(&[run(Some(3)), run(None), run(Some(5))]), Some(5));
        assert_eq!(median_rounds(&[run(None), run(None), run(Some(5))]), None);
    }
}
