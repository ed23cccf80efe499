//! Gradient entry points and a central finite-difference checker.

use crate::error::{Error, Result};
use crate::mdp::{State, TokenId};
use crate::policy::{GradVector, LogitPolicy};

/// A differentiable scalar function of a policy's parameters.
pub trait ScalarFn {
    fn value(&self, policy: &LogitPolicy) -> Result<f64>;
    fn gradient(&self, policy: &LogitPolicy) -> Result<GradVector>;
}

/// Gradient of `f` at the policy's current parameters.
pub fn grad(policy: &LogitPolicy, f: &dyn ScalarFn) -> Result<GradVector> {
    let g = f.gradient(policy)?;
    if g.grad.len() != policy.num_params() {
        return Err(Error::contract("gradient length differs from parameter count"));
    }
    if !g.is_finite() {
        return Err(Error::non_finite("loss or gradient", None));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Largest absolute mismatch over coordinates whose analytic gradient is
    /// below the relative-error floor.
    pub max_abs_error_small: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Coordinates with `|g|` at or below this are compared absolutely.
pub const FD_GRAD_FLOOR: f64 = 1e-8;

/// Compares `f.gradient` against central differences on every coordinate.
///
/// Passes iff the relative error is at most `rel_tol` on coordinates with
/// `|g| > 1e-8`, and the absolute error is at most `rel_tol` elsewhere.
pub fn finite_diff_check(policy: &LogitPolicy, f: &dyn ScalarFn, epsilon: f64, rel_tol: f64) -> Result<FdReport> {
    let analytic = f.gradient(policy)?;
    check_against(policy, f, &analytic.grad, epsilon, rel_tol)
}

/// Same as [`finite_diff_check`] against a caller-supplied gradient.
pub fn check_against(
    policy: &LogitPolicy,
    f: &dyn ScalarFn,
    analytic: &[f64],
    epsilon: f64,
    rel_tol: f64,
) -> Result<FdReport> {
    if !(epsilon > 0.0) {
        return Err(Error::contract("epsilon must be positive"));
    }
    let base = policy.params().to_vec();
    let mut probe = policy.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs_small: f64 = 0.0;
    let mut checked = 0;
    for i in 0..base.len() {
        probe.params_mut()[i] = base[i] + epsilon;
        let up = f.value(&probe)?;
        probe.params_mut()[i] = base[i] - epsilon;
        let down = f.value(&probe)?;
        probe.params_mut()[i] = base[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let g = analytic[i];
        if g.abs() > FD_GRAD_FLOOR {
            max_rel = max_rel.max((g - numeric).abs() / g.abs());
            checked += 1;
        } else {
            max_abs_small = max_abs_small.max((g - numeric).abs());
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        max_abs_error_small: max_abs_small,
        checked,
        pass: max_rel <= rel_tol && max_abs_small <= rel_tol,
    })
}

/// `θ ↦ V_θ(s)`.
pub struct SoftValueAt(pub State);

impl ScalarFn for SoftValueAt {
    fn value(&self, policy: &LogitPolicy) -> Result<f64> {
        Ok(policy.soft_value(&self.0))
    }

    fn gradient(&self, policy: &LogitPolicy) -> Result<GradVector> {
        let mut grad = vec![0.0; policy.num_params()];
        if !policy.space().is_forced(&self.0) {
            policy.accumulate_grad(&self.0, &policy.action_probs(&self.0), &mut grad);
        }
        Ok(GradVector {
            loss: policy.soft_value(&self.0),
            grad,
        })
    }
}

/// `θ ↦ log π_θ(a|s)`.
pub struct LogprobAt(pub State, pub TokenId);

impl ScalarFn for LogprobAt {
    fn value(&self, policy: &LogitPolicy) -> Result<f64> {
        Ok(policy.logprob_action(&self.0, self.1))
    }

    fn gradient(&self, policy: &LogitPolicy) -> Result<GradVector> {
        let mut grad = vec![0.0; policy.num_params()];
        if !policy.space().is_forced(&self.0) {
            let mut d: Vec<f64> = policy.action_probs(&self.0).iter().map(|p| -p).collect();
            d[self.1 as usize] += 1.0;
            policy.accumulate_grad(&self.0, &d, &mut grad);
        }
        Ok(GradVector {
            loss: policy.logprob_action(&self.0, self.1),
            grad,
        })
    }
}

/// `θ ↦ w·θ`.
pub struct Linear(pub Vec<f64>);

impl ScalarFn for Linear {
    fn value(&self, policy: &LogitPolicy) -> Result<f64> {
        Ok(self.0.iter().zip(policy.params()).map(|(w, p)| w * p).sum())
    }

    fn gradient(&self, policy: &LogitPolicy) -> Result<GradVector> {
        Ok(GradVector {
            loss: self.value(policy)?,
            grad: self.0.clone(),
        })
    }
}

/// The zero function.
pub struct Zero;

impl ScalarFn for Zero {
    fn value(&self, _: &LogitPolicy) -> Result<f64> {
        Ok(0.0)
    }

    fn gradient(&self, policy: &LogitPolicy) -> Result<GradVector> {
        Ok(GradVector::zeros(policy.num_params()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Prompt, RewardRule, TokenMdp, TokenSpace};
    use crate::policy::NetInit;
    use approx::assert_abs_diff_eq;

    fn mdp() -> TokenMdp {
        TokenMdp::new(
            TokenSpace::plain(3),
            2,
            vec![Prompt {
                tokens: vec![0],
                weight: 1.0,
            }],
            RewardRule::Constant { value: 0.0 },
        )
        .unwrap()
    }

    fn random_tabular(seed: u64) -> LogitPolicy {
        use rand::{Rng, SeedableRng};
        let p = LogitPolicy::tabular(&mdp()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = (0..p.num_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        p.with_params(params).unwrap()
    }

    #[test]
    fn soft_value_gradient_is_softmax() {
        let p = random_tabular(1);
        let s = mdp().prompt_state(0);
        let g = grad(&p, &SoftValueAt(s.clone())).unwrap();
        let probs = p.action_probs(&s);
        // the root context occupies slot 0
        for a in 0..3 {
            assert_abs_diff_eq!(g.grad[a], probs[a], epsilon = 1e-15);
        }
        assert!(g.grad[3..].iter().all(|&x| x == 0.0));
        assert!(finite_diff_check(&p, &SoftValueAt(s), 1e-5, 1e-6).unwrap().pass);
    }

    #[test]
    fn logprob_gradient_is_onehot_minus_softmax() {
        let p = random_tabular(2);
        let s = mdp().prompt_state(0);
        let g = grad(&p, &LogprobAt(s.clone(), 1)).unwrap();
        let probs = p.action_probs(&s);
        for a in 0..3 {
            let expected = if a == 1 { 1.0 } else { 0.0 } - probs[a];
            assert_abs_diff_eq!(g.grad[a], expected, epsilon = 1e-15);
        }
        assert!(finite_diff_check(&p, &LogprobAt(s, 1), 1e-5, 1e-6).unwrap().pass);
    }

    #[test]
    fn tiny_net_gradients_match_finite_differences() {
        let p = LogitPolicy::tiny_net(&mdp(), 5, NetInit::Random { seed: 4, scale: 0.8 }).unwrap();
        let s = State::prompt(vec![0]);
        let report = finite_diff_check(&p, &SoftValueAt(s.clone()), 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
        let report = finite_diff_check(&p, &LogprobAt(s, 2), 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let p = random_tabular(3);
        let w: Vec<f64> = (0..p.num_params()).map(|i| i as f64 * 0.25 - 1.0).collect();
        let report = finite_diff_check(&p, &Linear(w), 1e-5, 1e-9).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn zero_function_has_zero_gradient() {
        let p = random_tabular(4);
        assert_eq!(grad(&p, &Zero).unwrap().norm(), 0.0);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let p = random_tabular(5);
        let s = mdp().prompt_state(0);
        let mut g = grad(&p, &SoftValueAt(s.clone())).unwrap().grad;
        g[0] += 1.0;
        let report = check_against(&p, &SoftValueAt(s), &g, 1e-5, 1e-4).unwrap();
        assert!(!report.pass);
    }
}
