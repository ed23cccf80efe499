use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use valuelab::grad::finite_diff_check;
use valuelab::instances::{random_instance, InstanceSpec};
use valuelab::mdp::{Prompt, RewardRule, TokenMdp, TokenSpace};
use valuelab::objectives::{evaluate, tape, Objective, ObjectiveKind};
use valuelab::policy::{exact_kl_to_reference, kl_to_reference, LogitPolicy, ReferenceSnapshot};

const KINDS: [ObjectiveKind; 4] = [
    ObjectiveKind::Reval,
    ObjectiveKind::Tbrm,
    ObjectiveKind::Regression,
    ObjectiveKind::Grpo,
];

fn two_token(horizon: usize, rule: RewardRule) -> TokenMdp {
    TokenMdp::new(
        TokenSpace::plain(2),
        horizon,
        vec![Prompt {
            tokens: vec![0],
            weight: 1.0,
        }],
        rule,
    )
    .unwrap()
}

#[test]
fn sharp_logits_pick_the_favoured_token() {
    let mdp = two_token(1, RewardRule::ExactMatch { target: vec![0] });
    let mut policy = LogitPolicy::tabular(&mdp).unwrap();
    policy.set_logits(&mdp.prompt_state(0), &[10.0, -10.0]).unwrap();
    let hits = (0..10_000)
        .filter(|&s| mdp.rollout(&policy, &mdp.prompt_state(0), s, 1.0).unwrap().actions == [0])
        .count();
    assert!(hits as f64 / 10_000.0 >= 0.999);
}

#[test]
fn uniform_policy_success_rate() {
    let mdp = two_token(2, RewardRule::ExactMatch { target: vec![1, 0] });
    let policy = LogitPolicy::tabular(&mdp).unwrap();
    let avg = mdp.avg_at_n(&policy, &mdp.prompt_state(0), 4096, 3, 1.0).unwrap();
    let sigma = (0.25f64 * 0.75 / 4096.0).sqrt();
    assert!((avg - 0.25).abs() <= 3.0 * sigma, "avg {avg}");
}

#[test]
fn eos_responses_have_fixed_length() {
    let mdp = TokenMdp::new(
        TokenSpace::with_eos(4, 2, 3),
        5,
        vec![Prompt {
            tokens: vec![0],
            weight: 1.0,
        }],
        RewardRule::Constant { value: 0.0 },
    )
    .unwrap();
    let policy = LogitPolicy::tabular(&mdp).unwrap();
    for seed in 0..200 {
        let t = mdp.rollout(&policy, &mdp.prompt_state(0), seed, 1.0).unwrap();
        assert_eq!(t.actions.len(), 5);
        if let Some(e) = t.eos_position(mdp.space()) {
            assert!(t.actions[e + 1..].iter().all(|&a| a == 3));
            assert!(t.behavior_logprobs[e + 1..].iter().all(|&lp| lp == 0.0));
        }
        if let Some(p) = t.actions.iter().position(|&a| a == 3) {
            assert!(t.actions[..p].contains(&2));
        }
    }
}

#[test]
fn sampled_kl_converges_to_enumeration() {
    let inst = random_instance(77, InstanceSpec::default()).unwrap();
    let policy = &inst.policy;
    let exact = exact_kl_to_reference(policy, &inst.reference, &inst.mdp, 10_000).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let samples: Vec<_> = (0..20_000)
        .map(|s| {
            let p = inst.mdp.sample_prompt(&mut rng);
            inst.mdp.rollout(policy, &inst.mdp.prompt_state(p), s, 1.0).unwrap()
        })
        .collect();
    let ratios: Vec<f64> = samples
        .iter()
        .map(|t| policy.logprob_trajectory(t) - inst.reference.policy().logprob_trajectory(t))
        .collect();
    let mean = kl_to_reference(policy, &inst.reference, &samples).unwrap();
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64;
    let sigma = (var / ratios.len() as f64).sqrt();
    assert!(exact >= 0.0);
    assert!(
        (mean - exact).abs() <= 3.0 * sigma + 1e-12,
        "sampled {mean} exact {exact} sigma {sigma}"
    );
}

#[test]
fn analytic_tape_and_finite_differences_agree() {
    for seed in 0..30 {
        let inst = random_instance(seed, InstanceSpec::default()).unwrap();
        for kind in KINDS {
            let cfg = inst.config(kind);
            let analytic = evaluate(&inst.policy, &inst.reference, &inst.batch, &cfg).unwrap();
            let (loss, g) = tape::loss_and_grad(&inst.policy, &inst.reference, &inst.batch, &cfg).unwrap();
            assert_abs_diff_eq!(loss, analytic.loss, epsilon = 1e-10);
            for (a, b) in g.iter().zip(&analytic.grad.grad) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            let f = Objective {
                reference: &inst.reference,
                batch: &inst.batch,
                cfg: &cfg,
            };
            let report = finite_diff_check(&inst.policy, &f, 1e-5, 1e-4).unwrap();
            assert!(report.pass, "seed {seed} {kind:?} {report:?}");
        }
    }
}

#[test]
fn calibrated_at_reference_with_zero_reward() {
    for seed in 0..30 {
        let inst = random_instance(
            seed,
            InstanceSpec {
                zero_reward: true,
                at_reference: true,
            },
        )
        .unwrap();
        let reval = evaluate(
            &inst.policy,
            &inst.reference,
            &inst.batch,
            &inst.config(ObjectiveKind::Reval),
        )
        .unwrap();
        assert_eq!(reval.loss, 0.0);
        assert!(reval.grad.norm() <= 1e-10);
        let tbrm = evaluate(
            &inst.policy,
            &inst.reference,
            &inst.batch,
            &inst.config(ObjectiveKind::Tbrm),
        )
        .unwrap();
        assert!(tbrm.loss > 0.0 && tbrm.grad.norm() > 1e-6);
    }
}

proptest! {
    #[test]
    fn shift_invariance(logits in proptest::collection::vec(-5.0f64..5.0, 3), c in -10.0f64..10.0) {
        let mdp = TokenMdp::new(TokenSpace::plain(3), 1, vec![Prompt { tokens: vec![0], weight: 1.0 }], RewardRule::Constant { value: 0.0 }).unwrap();
        let s = mdp.prompt_state(0);
        let mut p = LogitPolicy::tabular(&mdp).unwrap();
        p.set_logits(&s, &logits).unwrap();
        let mut q = p.clone();
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        q.set_logits(&s, &shifted).unwrap();
        prop_assert!((q.soft_value(&s) - p.soft_value(&s) - c).abs() < 1e-9);
        for a in 0..3 {
            prop_assert!((q.logprob_action(&s, a) - p.logprob_action(&s, a)).abs() < 1e-9);
        }
    }

    #[test]
    fn probabilities_sum_to_one(seed in 0u64..500) {
        let inst = random_instance(seed, InstanceSpec::default()).unwrap();
        for t in &inst.batch {
            for (s, _) in t.steps() {
                let total: f64 = (0..inst.mdp.vocab_size() as u32).map(|a| inst.policy.logprob_action(&s, a).exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_logprob_is_product_of_steps(seed in 0u64..500) {
        let inst = random_instance(seed, InstanceSpec::default()).unwrap();
        for t in &inst.batch {
            let product: f64 = t.steps().map(|(s, a)| inst.policy.action_probs(&s)[a as usize]).product();
            prop_assert!((inst.policy.logprob_trajectory(t) - product.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn reference_log_ratio_vanishes(seed in 0u64..500) {
        let inst = random_instance(seed, InstanceSpec { zero_reward: false, at_reference: true }).unwrap();
        let snapshot = ReferenceSnapshot::new(&inst.policy, 0);
        prop_assert_eq!(kl_to_reference(&inst.policy, &snapshot, &inst.batch).unwrap(), 0.0);
    }
}
