//! Logit-parameterized policies whose logits double as soft Q-values.
//!
//! `Q_θ(s, a) = logit_θ(s, a)`, `V_θ(s) = log Σ_a exp Q_θ(s, a)` and
//! `log π_θ(a|s) = Q_θ(s, a) − V_θ(s)`. There is no separate value head.
//! Forced (post-EOS) states contribute zero to every one of these.

mod io;
mod net;
mod tabular;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax};
use crate::mdp::{State, TokenId, TokenMdp, TokenSpace, Trajectory};

pub use io::{read_policy_file, write_policy_file};
pub use net::{NetInit, NetShape};
pub use tabular::TabularIndex;

/// Default cap on enumerated states when building a tabular policy.
pub const DEFAULT_STATE_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Parameterization {
    /// One logit vector per enumerated context; unseen contexts use a
    /// fixed default vector that carries no parameters.
    Tabular(Arc<TabularIndex>),
    /// One hidden tanh layer over positional token features.
    TinyNet(NetShape),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    TinyNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitPolicy {
    space: TokenSpace,
    parameterization: Parameterization,
    params: Vec<f64>,
    seed: u64,
}

impl LogitPolicy {
    /// Tabular policy over every decision state of `mdp`, all logits zero
    /// (the uniform policy).
    pub fn tabular(mdp: &TokenMdp) -> Result<Self> {
        Self::tabular_with_limit(mdp, DEFAULT_STATE_LIMIT)
    }

    pub fn tabular_with_limit(mdp: &TokenMdp, limit: usize) -> Result<Self> {
        let contexts = mdp
            .decision_states(limit)?
            .into_iter()
            .map(|s| s.tokens().to_vec())
            .collect();
        let index = TabularIndex::new(contexts, vec![0.0; mdp.vocab_size()]);
        Ok(Self::from_index(*mdp.space(), index))
    }

    pub(crate) fn from_index(space: TokenSpace, index: TabularIndex) -> Self {
        let params = vec![0.0; index.len() * space.vocab_size];
        Self {
            space,
            parameterization: Parameterization::Tabular(Arc::new(index)),
            params,
            seed: 0,
        }
    }

    pub fn tiny_net(mdp: &TokenMdp, hidden: usize, init: NetInit) -> Result<Self> {
        let shape = NetShape::new(mdp.vocab_size(), mdp.horizon(), hidden)?;
        let params = shape.init_params(init);
        let seed = match init {
            NetInit::Zeros => 0,
            NetInit::Random { seed, .. } => seed,
        };
        Ok(Self {
            space: *mdp.space(),
            parameterization: Parameterization::TinyNet(shape),
            params,
            seed,
        })
    }

    pub fn space(&self) -> &TokenSpace {
        &self.space
    }

    pub fn parameterization(&self) -> &Parameterization {
        &self.parameterization
    }

    pub fn kind(&self) -> PolicyKind {
        match self.parameterization {
            Parameterization::Tabular(_) => PolicyKind::Tabular,
            Parameterization::TinyNet(_) => PolicyKind::TinyNet,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same parameterization with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok(Self { params, ..self.clone() })
    }

    /// Overwrites the logit vector of a tabular context.
    pub fn set_logits(&mut self, state: &State, logits: &[f64]) -> Result<()> {
        let vocab = self.space.vocab_size;
        if logits.len() != vocab {
            return Err(Error::contract("logit vector length must equal vocab_size"));
        }
        let Parameterization::Tabular(index) = &self.parameterization else {
            return Err(Error::contract("set_logits requires a tabular policy"));
        };
        let slot = index
            .slot(state.tokens())
            .ok_or_else(|| Error::contract("context not present in the tabular index"))?;
        self.params[slot * vocab..(slot + 1) * vocab].copy_from_slice(logits);
        Ok(())
    }

    /// `Q_θ(s, ·)`.
    pub fn logits(&self, state: &State) -> Vec<f64> {
        let vocab = self.space.vocab_size;
        match &self.parameterization {
            Parameterization::Tabular(index) => match index.slot(state.tokens()) {
                Some(slot) => self.params[slot * vocab..(slot + 1) * vocab].to_vec(),
                None => index.default_logits().to_vec(),
            },
            Parameterization::TinyNet(shape) => shape.forward(&self.params, state).logits,
        }
    }

    /// `V_θ(s) = log Σ_a exp Q_θ(s, a)`; zero at forced states.
    pub fn soft_value(&self, state: &State) -> f64 {
        if self.space.is_forced(state) {
            return 0.0;
        }
        logsumexp(&self.logits(state), self.space.masked())
    }

    /// `π_θ(·|s)` over the vocabulary (pad gets probability 0 unless forced).
    pub fn action_probs(&self, state: &State) -> Vec<f64> {
        if self.space.is_forced(state) {
            let mut p = vec![0.0; self.space.vocab_size];
            p[self.space.pad.expect("forced implies pad") as usize] = 1.0;
            return p;
        }
        softmax(&self.logits(state), self.space.masked())
    }

    /// `log π_θ(a|s) = Q_θ(s, a) − V_θ(s)`.
    pub fn logprob_action(&self, state: &State, action: TokenId) -> f64 {
        if self.space.is_forced(state) {
            return if Some(action) == self.space.pad {
                0.0
            } else {
                f64::NEG_INFINITY
            };
        }
        if !self.space.is_sampleable(action) {
            return f64::NEG_INFINITY;
        }
        let logits = self.logits(state);
        logits[action as usize] - logsumexp(&logits, self.space.masked())
    }

    /// `log π_θ(τ) = Σ_h log π_θ(a_h|s_h)`; padded steps add 0.
    pub fn logprob_trajectory(&self, trajectory: &Trajectory) -> f64 {
        trajectory.steps().map(|(s, a)| self.logprob_action(&s, a)).sum()
    }

    /// Adds `Σ_a dlogits[a] · ∂Q_θ(s, a)/∂θ` into `grad`.
    pub fn accumulate_grad(&self, state: &State, dlogits: &[f64], grad: &mut [f64]) {
        let vocab = self.space.vocab_size;
        match &self.parameterization {
            Parameterization::Tabular(index) => {
                if let Some(slot) = index.slot(state.tokens()) {
                    for (g, d) in grad[slot * vocab..(slot + 1) * vocab].iter_mut().zip(dlogits) {
                        *g += d;
                    }
                }
            }
            Parameterization::TinyNet(shape) => shape.backward(&self.params, state, dlogits, grad),
        }
    }

    /// Logits as tape variables, for the independent autodiff route.
    pub fn logits_on_tape<'t>(&self, tape: &'t Tape, params: &[Var<'t>], state: &State) -> Vec<Var<'t>> {
        let vocab = self.space.vocab_size;
        match &self.parameterization {
            Parameterization::Tabular(index) => match index.slot(state.tokens()) {
                Some(slot) => params[slot * vocab..(slot + 1) * vocab].to_vec(),
                None => index.default_logits().iter().map(|&v| tape.constant(v)).collect(),
            },
            Parameterization::TinyNet(shape) => shape.forward_on_tape(tape, params, state),
        }
    }

    /// Exact `KL(π_θ(·|x) ‖ π_ref(·|x))` over whole responses, by enumerating
    /// the response tree below `prompt`.
    pub fn exact_kl(&self, reference: &LogitPolicy, prompt: &State, horizon: usize, limit: usize) -> Result<f64> {
        let mut visited = 0usize;
        self.exact_kl_from(reference, prompt, horizon, limit, &mut visited)
    }

    fn exact_kl_from(
        &self,
        reference: &LogitPolicy,
        state: &State,
        horizon: usize,
        limit: usize,
        visited: &mut usize,
    ) -> Result<f64> {
        if state.depth() >= horizon || self.space.is_forced(state) {
            return Ok(0.0);
        }
        *visited += 1;
        if *visited > limit {
            return Err(Error::StateLimit { limit });
        }
        let p = self.action_probs(state);
        let q = reference.action_probs(state);
        let mut kl = 0.0;
        for a in self.space.sampleable() {
            let pa = p[a as usize];
            if pa == 0.0 {
                continue;
            }
            let child = state.appended(a);
            kl += pa
                * ((pa.ln() - q[a as usize].ln()) + self.exact_kl_from(reference, &child, horizon, limit, visited)?);
        }
        Ok(kl)
    }
}

/// Frozen copy of a policy used as `π_ref`, `Q_ref` and `V_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSnapshot {
    policy: LogitPolicy,
    taken_at: u64,
}

impl ReferenceSnapshot {
    pub fn new(policy: &LogitPolicy, taken_at: u64) -> Self {
        Self {
            policy: policy.clone(),
            taken_at,
        }
    }

    pub fn policy(&self) -> &LogitPolicy {
        &self.policy
    }

    pub fn taken_at(&self) -> u64 {
        self.taken_at
    }
}

/// Gradient aligned with a policy's parameter vector, plus the loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; len],
        }
    }

    pub fn norm(&self) -> f64 {
        crate::math::l2_norm(&self.grad)
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Sampled sequence-level KL estimate: the batch mean of
/// `log π_θ(τ) − log π_ref(τ)`.
pub fn kl_to_reference(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    trajectories: &[Trajectory],
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::contract("KL estimate needs a nonempty batch"));
    }
    let total: f64 = trajectories
        .iter()
        .map(|t| policy.logprob_trajectory(t) - reference.policy().logprob_trajectory(t))
        .sum();
    Ok(total / trajectories.len() as f64)
}

/// Exact KL averaged over the prompt distribution of `mdp`.
pub fn exact_kl_to_reference(
    policy: &LogitPolicy,
    reference: &ReferenceSnapshot,
    mdp: &TokenMdp,
    limit: usize,
) -> Result<f64> {
    let total_weight: f64 = mdp.prompts().iter().map(|p| p.weight).sum();
    let mut kl = 0.0;
    for (i, p) in mdp.prompts().iter().enumerate() {
        kl += p.weight * policy.exact_kl(reference.policy(), &mdp.prompt_state(i), mdp.horizon(), limit)?;
    }
    Ok(kl / total_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Prompt, RewardRule};
    use approx::assert_abs_diff_eq;

    fn mdp(vocab: usize, horizon: usize) -> TokenMdp {
        TokenMdp::new(
            TokenSpace::plain(vocab),
            horizon,
            vec![Prompt {
                tokens: vec![0],
                weight: 1.0,
            }],
            RewardRule::Constant { value: 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn tabular_defaults_and_lookup() {
        let m = mdp(2, 1);
        let mut p = LogitPolicy::tabular(&m).unwrap();
        let s1 = m.prompt_state(0);
        assert_eq!(p.logits(&s1), vec![0.0, 0.0]);
        assert_eq!(p.logits(&State::prompt(vec![1, 1, 1])), vec![0.0, 0.0]);
        p.set_logits(&s1, &[1.0, 0.0]).unwrap();
        assert_eq!(p.logits(&s1), vec![1.0, 0.0]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn soft_value_and_logprob_examples() {
        let m = mdp(2, 1);
        let mut p = LogitPolicy::tabular(&m).unwrap();
        let s1 = m.prompt_state(0);
        assert_abs_diff_eq!(p.soft_value(&s1), 0.693147, epsilon = 1e-6);
        assert_abs_diff_eq!(p.logprob_action(&s1, 0), -(2f64.ln()), epsilon = 1e-15);
        p.set_logits(&s1, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.soft_value(&s1), 1.313262, epsilon = 1e-6);
        assert_abs_diff_eq!(p.logprob_action(&s1, 0), -0.313262, epsilon = 1e-6);
        p.set_logits(&s1, &[1000.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(p.soft_value(&s1), 1000.0 + 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn padded_steps_carry_no_mass() {
        let m = TokenMdp::new(
            TokenSpace::with_eos(4, 2, 3),
            4,
            vec![Prompt {
                tokens: vec![0],
                weight: 1.0,
            }],
            RewardRule::Constant { value: 0.0 },
        )
        .unwrap();
        let p = LogitPolicy::tabular(&m).unwrap();
        let s = State::prompt(vec![0]).appended(2);
        assert_eq!(p.logprob_action(&s, 3), 0.0);
        assert_eq!(p.soft_value(&s), 0.0);
        let traj = Trajectory {
            id: 0,
            prompt: m.prompt_state(0),
            actions: vec![2, 3, 3, 3],
            behavior_logprobs: vec![-(3f64.ln()), 0.0, 0.0, 0.0],
            rule_reward: 0.0,
            reward: 0.0,
            collected_at_iter: 0,
        };
        assert_abs_diff_eq!(p.logprob_trajectory(&traj), -(3f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn uniform_two_step_trajectory() {
        let m = mdp(2, 2);
        let p = LogitPolicy::tabular(&m).unwrap();
        let traj = m.rollout(&p, &m.prompt_state(0), 3, 1.0).unwrap();
        assert_abs_diff_eq!(p.logprob_trajectory(&traj), -2.0 * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn exact_kl_is_zero_against_itself() {
        let m = mdp(3, 3);
        let p = LogitPolicy::tiny_net(&m, 4, NetInit::Random { seed: 1, scale: 0.5 }).unwrap();
        let r = ReferenceSnapshot::new(&p, 0);
        assert_eq!(exact_kl_to_reference(&p, &r, &m, 1000).unwrap(), 0.0);
    }
}
