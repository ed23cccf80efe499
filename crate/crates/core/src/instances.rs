//! Seeded random tiny instances for property checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::math::derive_seed;
use crate::mdp::{Prompt, RewardRule, TokenId, TokenMdp, TokenSpace, Trajectory};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::policy::{LogitPolicy, ReferenceSnapshot};

/// A task, a policy, a reference, and a batch of trajectories.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: TokenMdp,
    pub policy: LogitPolicy,
    pub reference: ReferenceSnapshot,
    pub batch: Vec<Trajectory>,
    pub beta: f64,
}

impl Instance {
    pub fn config(&self, kind: ObjectiveKind) -> ObjectiveConfig {
        ObjectiveConfig::new(kind, self.beta).with_group_size(self.batch.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InstanceSpec {
    /// Fix the reward to zero.
    pub zero_reward: bool,
    /// Start the policy at the reference.
    pub at_reference: bool,
}

pub fn random_task(rng: &mut ChaCha8Rng, zero_reward: bool) -> Result<TokenMdp> {
    let with_eos = rng.gen_bool(0.5);
    let vocab = if with_eos {
        rng.gen_range(3..=5)
    } else {
        rng.gen_range(2..=4)
    };
    let space = if with_eos {
        TokenSpace::with_eos(vocab, (vocab - 2) as TokenId, (vocab - 1) as TokenId)
    } else {
        TokenSpace::plain(vocab)
    };
    let horizon = rng.gen_range(1..=3);
    let sampleable: Vec<TokenId> = space.sampleable().collect();
    let prompts = (0..rng.gen_range(1..=2))
        .map(|i| Prompt {
            tokens: vec![i as TokenId; i + 1],
            weight: rng.gen_range(0.5..2.0),
        })
        .collect();
    let rule = if zero_reward {
        RewardRule::Constant { value: 0.0 }
    } else {
        match rng.gen_range(0..3) {
            0 => RewardRule::ExactMatch {
                target: (0..horizon)
                    .map(|_| *sampleable.choose(rng).expect("nonempty"))
                    .collect(),
            },
            1 => RewardRule::ChecksumModK {
                modulus: rng.gen_range(2..=3),
                residue: 1,
            },
            _ => RewardRule::PrefixCount {
                token: *sampleable.choose(rng).expect("nonempty"),
                threshold: 1,
            },
        }
    };
    TokenMdp::new(space, horizon, prompts, rule)
}

pub fn random_tabular(mdp: &TokenMdp, rng: &mut ChaCha8Rng, scale: f64) -> Result<LogitPolicy> {
    let mut p = LogitPolicy::tabular(mdp)?;
    for x in p.params_mut() {
        *x = rng.gen_range(-scale..scale);
    }
    Ok(p)
}

pub fn seeded_tabular(mdp: &TokenMdp, seed: u64, scale: f64) -> Result<LogitPolicy> {
    random_tabular(mdp, &mut ChaCha8Rng::seed_from_u64(seed), scale)
}

/// A random tabular instance; the batch is sampled from the reference.
pub fn random_instance(seed: u64, spec: InstanceSpec) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = random_task(&mut rng, spec.zero_reward)?;
    let reference = random_tabular(&mdp, &mut rng, 1.5)?;
    let policy = if spec.at_reference {
        reference.clone()
    } else {
        let mut p = reference.clone();
        for x in p.params_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
        p
    };
    let n = rng.gen_range(3..=6);
    let batch = (0..n)
        .map(|i| {
            let prompt = mdp.prompt_state(mdp.sample_prompt(&mut rng));
            let mut t = mdp.rollout(&reference, &prompt, derive_seed(seed, i, 0x1A), 1.0)?;
            t.id = i;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        mdp,
        policy,
        reference: ReferenceSnapshot::new(&reference, 0),
        batch,
        beta: rng.gen_range(0.1..2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible() {
        for seed in 0..20 {
            let a = random_instance(seed, InstanceSpec::default()).unwrap();
            let b = random_instance(seed, InstanceSpec::default()).unwrap();
            assert_eq!(a.batch, b.batch);
            assert_eq!(a.policy.params(), b.policy.params());
            assert!(a.batch.iter().all(|t| t.actions.len() == a.mdp.horizon()));
        }
    }
}
