//! Token-level MDPs with deterministic concatenation transitions.
//!
//! A state is a prompt followed by the tokens generated so far. Every
//! response has exactly `horizon` actions: once the end-of-sequence token has
//! been emitted, the environment forces the pad token with probability one, so
//! padded steps carry no log-probability, value or KL mass.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{derive_seed, softmax};
use crate::policy::LogitPolicy;

pub type TokenId = u32;

/// Vocabulary plus the two special tokens.
///
/// The pad token is never sampleable: it is masked out of every softmax and
/// soft value, and is only ever emitted by the environment after EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub vocab_size: usize,
    pub eos: Option<TokenId>,
    pub pad: Option<TokenId>,
}

impl TokenSpace {
    /// A vocabulary without EOS or padding: every response runs to the horizon.
    pub fn plain(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            eos: None,
            pad: None,
        }
    }

    pub fn with_eos(vocab_size: usize, eos: TokenId, pad: TokenId) -> Self {
        Self {
            vocab_size,
            eos: Some(eos),
            pad: Some(pad),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        let in_vocab = |t: TokenId| (t as usize) < self.vocab_size;
        match (self.eos, self.pad) {
            (None, None) => Ok(()),
            (Some(eos), Some(pad)) => {
                if !in_vocab(eos) || !in_vocab(pad) {
                    return Err(Error::config("eos and pad tokens must lie in [0, vocab_size)"));
                }
                if eos == pad {
                    return Err(Error::config("eos and pad tokens must differ"));
                }
                if self.vocab_size < 3 {
                    return Err(Error::config("a vocabulary with eos and pad needs at least 3 tokens"));
                }
                Ok(())
            }
            (Some(_), None) => Err(Error::config("an eos token requires a pad token")),
            (None, Some(_)) => Err(Error::config("a pad token requires an eos token")),
        }
    }

    /// Index excluded from softmax normalization.
    pub fn masked(&self) -> Option<usize> {
        self.pad.map(|p| p as usize)
    }

    pub fn is_sampleable(&self, token: TokenId) -> bool {
        (token as usize) < self.vocab_size && Some(token) != self.pad
    }

    pub fn sampleable(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.vocab_size as TokenId).filter(move |&t| Some(t) != self.pad)
    }

    /// True when the generated part of `state` already contains EOS, so the
    /// next action is forced to be the pad token.
    pub fn is_forced(&self, state: &State) -> bool {
        match self.eos {
            Some(eos) => state.generated().contains(&eos),
            None => false,
        }
    }
}

/// Prompt tokens followed by generated actions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    tokens: Vec<TokenId>,
    prompt_len: usize,
}

impl State {
    pub fn prompt(tokens: Vec<TokenId>) -> Self {
        let prompt_len = tokens.len();
        Self { tokens, prompt_len }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    /// Number of actions taken so far.
    pub fn depth(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// The prompt this state descends from.
    pub fn root(&self) -> State {
        State::prompt(self.prompt_tokens().to_vec())
    }

    pub(crate) fn appended(&self, token: TokenId) -> State {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        State {
            tokens,
            prompt_len: self.prompt_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Deterministic verifiers mapping a full response to `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardRule {
    /// Success iff the padded action sequence equals `target`.
    ExactMatch { target: Vec<TokenId> },
    /// Success iff the sum of the non-pad action ids is `residue` mod `modulus`.
    ChecksumModK { modulus: u64, residue: u64 },
    /// Success iff the response opens with at least `threshold` copies of `token`.
    PrefixCount { token: TokenId, threshold: usize },
    /// Returns `value` for every response; `value = 0` gives the zero-reward
    /// diagnostic task.
    Constant { value: f64 },
}

impl RewardRule {
    fn validate(&self, space: &TokenSpace, horizon: usize) -> Result<()> {
        match self {
            RewardRule::ExactMatch { target } => {
                if target.len() != horizon {
                    return Err(Error::config(format!(
                        "exact_match target has {} tokens, horizon is {horizon}",
                        target.len()
                    )));
                }
                if target.iter().any(|&t| t as usize >= space.vocab_size) {
                    return Err(Error::config("exact_match target token outside vocabulary"));
                }
            }
            RewardRule::ChecksumModK { modulus, residue } => {
                if *modulus == 0 || residue >= modulus {
                    return Err(Error::config("checksum needs modulus > residue >= 0"));
                }
            }
            RewardRule::PrefixCount { token, .. } => {
                if !space.is_sampleable(*token) {
                    return Err(Error::config("prefix_count token must be sampleable"));
                }
            }
            RewardRule::Constant { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(Error::config("constant reward must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    fn evaluate(&self, space: &TokenSpace, actions: &[TokenId]) -> f64 {
        let success = match self {
            RewardRule::ExactMatch { target } => target.as_slice() == actions,
            RewardRule::ChecksumModK { modulus, residue } => {
                let sum: u64 = actions
                    .iter()
                    .filter(|&&a| Some(a) != space.pad)
                    .map(|&a| a as u64)
                    .sum();
                sum % modulus == *residue
            }
            RewardRule::PrefixCount { token, threshold } => {
                actions.iter().take_while(|&&a| a == *token).count() >= *threshold
            }
            RewardRule::Constant { value } => return *value,
        };
        if success {
            1.0
        } else {
            0.0
        }
    }
}

/// One sampled response together with everything needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub prompt: State,
    pub actions: Vec<TokenId>,
    /// `log π_behavior(a_h | s_h)`; exactly 0 on padded steps.
    pub behavior_logprobs: Vec<f64>,
    /// Verifier output on `(prompt, actions)`.
    pub rule_reward: f64,
    /// Training reward after the configured transform; equals `rule_reward`
    /// until a transform is applied.
    pub reward: f64,
    pub collected_at_iter: u64,
}

impl Trajectory {
    /// Visits `(s_h, a_h)` for every step, padded steps included.
    pub fn steps(&self) -> impl Iterator<Item = (State, TokenId)> + '_ {
        let mut state = self.prompt.clone();
        self.actions.iter().map(move |&a| {
            let s = state.clone();
            state = state.appended(a);
            (s, a)
        })
    }

    /// Index of the first EOS action, if any.
    pub fn eos_position(&self, space: &TokenSpace) -> Option<usize> {
        let eos = space.eos?;
        self.actions.iter().position(|&a| a == eos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMdp {
    space: TokenSpace,
    horizon: usize,
    prompts: Vec<Prompt>,
    rule: RewardRule,
}

impl TokenMdp {
    pub fn new(space: TokenSpace, horizon: usize, prompts: Vec<Prompt>, rule: RewardRule) -> Result<Self> {
        space.validate()?;
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if prompts.is_empty() {
            return Err(Error::config("prompt set is empty"));
        }
        for p in &prompts {
            if p.tokens.iter().any(|&t| t as usize >= space.vocab_size) {
                return Err(Error::config("prompt token outside vocabulary"));
            }
            if !(p.weight.is_finite() && p.weight > 0.0) {
                return Err(Error::config("prompt weights must be positive"));
            }
        }
        rule.validate(&space, horizon)?;
        Ok(Self {
            space,
            horizon,
            prompts,
            rule,
        })
    }

    pub fn space(&self) -> &TokenSpace {
        &self.space
    }

    pub fn vocab_size(&self) -> usize {
        self.space.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn rule(&self) -> &RewardRule {
        &self.rule
    }

    pub fn prompt_state(&self, index: usize) -> State {
        State::prompt(self.prompts[index].tokens.clone())
    }

    /// Same task with a different verifier.
    pub fn with_rule(&self, rule: RewardRule) -> Result<Self> {
        Self::new(self.space, self.horizon, self.prompts.clone(), rule)
    }

    /// `s ⊕ a`.
    pub fn step(&self, state: &State, action: TokenId) -> Result<State> {
        if state.depth() >= self.horizon {
            return Err(Error::contract(format!(
                "cannot step a state at depth {} with horizon {}",
                state.depth(),
                self.horizon
            )));
        }
        if action as usize >= self.space.vocab_size {
            return Err(Error::contract(format!("token {action} outside vocabulary")));
        }
        Ok(state.appended(action))
    }

    pub fn verify(&self, _prompt: &State, actions: &[TokenId]) -> Result<f64> {
        if actions.len() != self.horizon {
            return Err(Error::contract(format!(
                "verify expects {} actions, got {}",
                self.horizon,
                actions.len()
            )));
        }
        Ok(self.rule.evaluate(&self.space, actions))
    }

    /// Samples one response of exactly `horizon` actions.
    pub fn rollout(&self, policy: &LogitPolicy, prompt: &State, seed: u64, temperature: f64) -> Result<Trajectory> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::contract("temperature must be positive"));
        }
        if prompt.depth() != 0 {
            return Err(Error::contract("rollout must start from a prompt state"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = prompt.clone();
        let mut actions = Vec::with_capacity(self.horizon);
        let mut logprobs = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let (action, lp) = if self.space.is_forced(&state) {
                (self.space.pad.expect("forced states imply a pad token"), 0.0)
            } else {
                let scaled: Vec<f64> = policy.logits(&state).iter().map(|l| l / temperature).collect();
                let probs = softmax(&scaled, self.space.masked());
                let dist = WeightedIndex::new(&probs)
                    .map_err(|e| Error::non_finite(format!("sampling distribution: {e}"), None))?;
                let a = dist.sample(&mut rng);
                (a as TokenId, probs[a].ln())
            };
            actions.push(action);
            logprobs.push(lp);
            state = state.appended(action);
        }
        let rule_reward = self.verify(prompt, &actions)?;
        Ok(Trajectory {
            id: 0,
            prompt: prompt.clone(),
            actions,
            behavior_logprobs: logprobs,
            rule_reward,
            reward: rule_reward,
            collected_at_iter: 0,
        })
    }

    /// Mean rule reward over `n` seeded rollouts (avg@n).
    pub fn avg_at_n(&self, policy: &LogitPolicy, prompt: &State, n: usize, seed: u64, temperature: f64) -> Result<f64> {
        if n == 0 {
            return Err(Error::contract("avg@n needs n >= 1"));
        }
        let rewards = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                self.rollout(policy, prompt, derive_seed(seed, i, 0xA7), temperature)
                    .map(|t| t.rule_reward)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(rewards.iter().sum::<f64>() / n as f64)
    }

    /// Every reachable state at which the policy makes a choice (depth below
    /// the horizon and not yet past EOS), in depth-first order per prompt.
    pub fn decision_states(&self, limit: usize) -> Result<Vec<State>> {
        let mut out = Vec::new();
        for i in 0..self.prompts.len() {
            let mut stack = vec![self.prompt_state(i)];
            while let Some(s) = stack.pop() {
                if s.depth() >= self.horizon || self.space.is_forced(&s) {
                    continue;
                }
                if out.len() >= limit {
                    return Err(Error::StateLimit { limit });
                }
                for a in self.space.sampleable().collect::<Vec<_>>().into_iter().rev() {
                    stack.push(s.appended(a));
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Picks a prompt index proportionally to the prompt weights.
    pub fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> usize {
        if self.prompts.len() == 1 {
            return 0;
        }
        let weights: Vec<f64> = self.prompts.iter().map(|p| p.weight).collect();
        WeightedIndex::new(&weights)
            .expect("weights validated at construction")
            .sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_token_mdp(horizon: usize, rule: RewardRule) -> TokenMdp {
        TokenMdp::new(
            TokenSpace::with_eos(5, 3, 4),
            horizon,
            vec![Prompt {
                tokens: vec![3],
                weight: 1.0,
            }],
            rule,
        )
        .unwrap()
    }

    #[test]
    fn step_concatenates() {
        let mdp = four_token_mdp(2, RewardRule::Constant { value: 0.0 });
        let s = mdp.step(&State::prompt(vec![3]), 1).unwrap();
        assert_eq!(s.tokens(), &[3, 1]);
        let s = mdp.step(&s, 3).unwrap();
        assert_eq!(s.tokens(), &[3, 1, 3]);
        assert!(matches!(mdp.step(&s, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn exact_match_verifier() {
        let mdp = TokenMdp::new(
            TokenSpace::with_eos(5, 3, 4),
            4,
            vec![Prompt {
                tokens: vec![0],
                weight: 1.0,
            }],
            RewardRule::ExactMatch {
                target: vec![1, 2, 3, 4],
            },
        )
        .unwrap();
        let p = mdp.prompt_state(0);
        assert_eq!(mdp.verify(&p, &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(mdp.verify(&p, &[2, 1, 3, 4]).unwrap(), 0.0);
        assert!(mdp.verify(&p, &[1, 2]).is_err());
    }

    #[test]
    fn checksum_and_prefix_verifiers() {
        let space = TokenSpace::plain(7);
        let prompts = vec![Prompt {
            tokens: vec![0],
            weight: 1.0,
        }];
        let checksum = TokenMdp::new(
            space,
            3,
            prompts.clone(),
            RewardRule::ChecksumModK { modulus: 3, residue: 0 },
        )
        .unwrap();
        let p = checksum.prompt_state(0);
        assert_eq!(checksum.verify(&p, &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(checksum.verify(&p, &[1, 2, 4]).unwrap(), 0.0);

        let prefix = TokenMdp::new(space, 3, prompts, RewardRule::PrefixCount { token: 5, threshold: 2 }).unwrap();
        assert_eq!(prefix.verify(&p, &[5, 5, 0]).unwrap(), 1.0);
        assert_eq!(prefix.verify(&p, &[5, 0, 5]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let prompts = vec![Prompt {
            tokens: vec![0],
            weight: 1.0,
        }];
        let zero = RewardRule::Constant { value: 0.0 };
        assert!(TokenMdp::new(TokenSpace::plain(1), 1, prompts.clone(), zero.clone()).is_err());
        assert!(TokenMdp::new(TokenSpace::plain(2), 0, prompts.clone(), zero.clone()).is_err());
        assert!(TokenMdp::new(TokenSpace::with_eos(3, 1, 1), 1, prompts.clone(), zero.clone()).is_err());
        assert!(TokenMdp::new(
            TokenSpace::plain(2),
            2,
            prompts,
            RewardRule::ExactMatch { target: vec![0] }
        )
        .is_err());
    }

    #[test]
    fn decision_states_stop_at_eos() {
        // vocab {0,1,2=eos,3=pad}: sampleable {0,1,2}
        let mdp = TokenMdp::new(
            TokenSpace::with_eos(4, 2, 3),
            2,
            vec![Prompt {
                tokens: vec![0],
                weight: 1.0,
            }],
            RewardRule::Constant { value: 0.0 },
        )
        .unwrap();
        let states = mdp.decision_states(100).unwrap();
        // root plus the two non-EOS children
        assert_eq!(states.len(), 3);
        assert!(matches!(mdp.decision_states(2), Err(Error::StateLimit { .. })));
    }
}
