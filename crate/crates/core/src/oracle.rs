//! Exact soft-optimal Q-functions by backward induction over the response
//! tree.
//!
//! With per-step reward `log π_ref(a|s)` plus `r/β` on completion, the
//! soft-optimal policy is `π*(τ) ∝ π_ref(τ)·exp(r(τ)/β)`. Adding a potential
//! term `Φ(s) − Φ(s ⊕ a)` shifts every `Q*(s, ·)` by `Φ(s)` and leaves the
//! policy unchanged; `Φ = V_ref` turns `Q*` into the logits ReVal converges to.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::{logsumexp, softmax};
use crate::mdp::{State, TokenId, TokenMdp};
use crate::policy::{LogitPolicy, ReferenceSnapshot};

/// `Q*(s, ·)` at every decision state.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftOptimalQ {
    pub beta: f64,
    q: BTreeMap<State, Vec<f64>>,
    masked: Option<usize>,
}

impl SoftOptimalQ {
    pub fn q(&self, state: &State) -> Option<&[f64]> {
        self.q.get(state).map(Vec::as_slice)
    }

    pub fn value(&self, state: &State) -> Option<f64> {
        self.q(state).map(|q| logsumexp(q, self.masked))
    }

    /// `π*(·|s) = exp(Q*(s, ·) − V*(s))`.
    pub fn policy(&self, state: &State) -> Option<Vec<f64>> {
        self.q(state).map(|q| softmax(q, self.masked))
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.q.keys()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// A tabular policy whose logits are `Q*`.
    pub fn to_tabular(&self, mdp: &TokenMdp) -> Result<LogitPolicy> {
        let mut policy = LogitPolicy::tabular_with_limit(mdp, self.q.len().max(1))?;
        for (state, q) in &self.q {
            policy.set_logits(state, q)?;
        }
        Ok(policy)
    }
}

/// Backward induction with an arbitrary potential. `phi` is ignored at
/// states where the response is complete (depth `H` or past EOS).
pub fn soft_optimal_q(
    mdp: &TokenMdp,
    reference: &LogitPolicy,
    beta: f64,
    phi: &dyn Fn(&State) -> f64,
    limit: usize,
) -> Result<SoftOptimalQ> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::contract("beta must be positive"));
    }
    let mut solver = Solver {
        mdp,
        reference,
        beta,
        phi,
        limit,
        q: BTreeMap::new(),
    };
    for i in 0..mdp.prompts().len() {
        let prompt = mdp.prompt_state(i);
        solver.value(&prompt)?;
    }
    Ok(SoftOptimalQ {
        beta,
        q: solver.q,
        masked: mdp.space().masked(),
    })
}

/// `Q*` shaped with `Φ = V_ref`, so logits equal to it are a ReVal fixed point.
pub fn soft_value_iteration_oracle(
    mdp: &TokenMdp,
    reference: &ReferenceSnapshot,
    beta: f64,
    limit: usize,
) -> Result<SoftOptimalQ> {
    let r = reference.policy();
    soft_optimal_q(mdp, r, beta, &|s| r.soft_value(s), limit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingReport {
    pub max_policy_diff: f64,
    pub states: usize,
    pub pass: bool,
}

pub const SHAPING_TOL: f64 = 1e-8;

/// Compares soft-optimal policies with and without the potential `phi`.
pub fn shaping_invariance_check(
    mdp: &TokenMdp,
    reference: &LogitPolicy,
    beta: f64,
    phi: &dyn Fn(&State) -> f64,
    limit: usize,
) -> Result<ShapingReport> {
    let plain = soft_optimal_q(mdp, reference, beta, &|_| 0.0, limit)?;
    let shaped = soft_optimal_q(mdp, reference, beta, phi, limit)?;
    let mut max_diff: f64 = 0.0;
    for state in plain.states() {
        let a = plain.policy(state).expect("own state");
        let b = shaped
            .policy(state)
            .ok_or_else(|| Error::contract("shaped table misses a state"))?;
        for (x, y) in a.iter().zip(&b) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    Ok(ShapingReport {
        max_policy_diff: max_diff,
        states: plain.len(),
        pass: max_diff <= SHAPING_TOL && plain.len() == shaped.len(),
    })
}

struct Solver<'a> {
    mdp: &'a TokenMdp,
    reference: &'a LogitPolicy,
    beta: f64,
    phi: &'a dyn Fn(&State) -> f64,
    limit: usize,
    q: BTreeMap<State, Vec<f64>>,
}

impl Solver<'_> {
    fn complete(&self, s: &State) -> bool {
        s.depth() >= self.mdp.horizon() || self.mdp.space().is_forced(s)
    }

    fn potential(&self, s: &State) -> f64 {
        if self.complete(s) {
            0.0
        } else {
            (self.phi)(s)
        }
    }

    /// `r(τ)/β` for the padded completion of `s`.
    fn terminal_value(&self, s: &State) -> Result<f64> {
        let mut actions: Vec<TokenId> = s.generated().to_vec();
        if let Some(pad) = self.mdp.space().pad {
            actions.resize(self.mdp.horizon(), pad);
        }
        Ok(self.mdp.verify(&s.root(), &actions)? / self.beta)
    }

    fn value(&mut self, s: &State) -> Result<f64> {
        if self.complete(s) {
            return self.terminal_value(s);
        }
        if let Some(q) = self.q.get(s) {
            return Ok(logsumexp(q, self.mdp.space().masked()));
        }
        if self.q.len() >= self.limit {
            return Err(Error::StateLimit { limit: self.limit });
        }
        let space = *self.mdp.space();
        let ref_logits = self.reference.logits(s);
        let ref_value = logsumexp(&ref_logits, space.masked());
        let phi_s = self.potential(s);
        let mut q = ref_logits.clone();
        for a in space.sampleable().collect::<Vec<_>>() {
            let next = self.mdp.step(s, a)?;
            let reward = ref_logits[a as usize] - ref_value + phi_s - self.potential(&next);
            q[a as usize] = reward + self.value(&next)?;
        }
        let v = logsumexp(&q, space.masked());
        self.q.insert(s.clone(), q);
        Ok(v)
    }
}
