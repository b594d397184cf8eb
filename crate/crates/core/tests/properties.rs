//! Cross-module properties checked on randomized small MDPs.

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trepo_lab::cli::ExperimentConfig;
use trepo_lab::estimators::{clipped_surrogate_gradient, dpo_loss, gae_advantages, AdvantageProfile, CriticFitConfig, CriticTable};
use trepo_lab::oracle::{
    central_differences, exact_estimator_expectation, exact_policy_gradient, expected_score_gradient, ExactEstimator,
    ExpectedRm,
};
use trepo_lab::reward::TokenRewardTable;
use trepo_lab::trepo::{calculate_advantage, calculate_advantage_with, ValueSource};
use trepo_lab::{RewardSpec, TabularPolicy, TokenMdp, TrepoConfig};

#[derive(Debug, Clone)]
struct Case {
    mdp: TokenMdp,
    policy: TabularPolicy,
    table: TokenRewardTable,
    seed: u64,
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..4, 1usize..4, any::<bool>(), any::<u64>(), 0.1f64..2.0).prop_map(|(v, t, use_eos, seed, scale)| {
        let mdp = TokenMdp::new(v, t, use_eos.then_some(v - 1)).unwrap();
        let policy = TabularPolicy::random(&mdp, seed, scale).unwrap();
        let table = TokenRewardTable::random(&mdp, seed ^ 0x5eed, -1.0, 1.0).unwrap();
        Case { mdp, policy, table, seed }
    })
}

fn gamma() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), 0.3f64..1.0]
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        prop_assert!((x - y).abs() <= tol, "coordinate {}: {} vs {}", i, x, y);
    }
    Ok(())
}

fn sample(c: &Case, salt: u64) -> trepo_lab::Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ salt);
    c.policy.sample_trajectory(&[], 1.0, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn response_score_is_discounted_token_sum(c in case(), g in gamma()) {
        let spec = RewardSpec::hidden(c.table.clone(), g).unwrap();
        for w in c.mdp.enumerate_trajectories().unwrap() {
            let r = spec.token_rewards(&w).unwrap();
            let discounted: f64 = r.iter().enumerate().map(|(i, x)| g.powi(i as i32) * x).sum();
            prop_assert!((spec.rm_response(&w) - discounted).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_score_is_additive(c in case(), g in gamma()) {
        let a = RewardSpec::hidden(c.table.clone(), g).unwrap();
        let b = RewardSpec::count_token(&c.mdp, 0, 1.0).unwrap();
        let both = RewardSpec::composite(vec![a.clone(), b.clone()]).unwrap();
        for w in c.mdp.enumerate_trajectories().unwrap() {
            prop_assert_eq!(both.rm_response(&w), a.rm_response(&w) + b.rm_response(&w));
        }
    }

    #[test]
    fn difference_shaping_recovers_token_rewards_when_undiscounted(c in case()) {
        let spec = RewardSpec::hidden(c.table.clone(), 1.0).unwrap();
        for w in c.mdp.enumerate_trajectories().unwrap() {
            assert_close(&spec.r3hf_shape(&w).unwrap(), &spec.token_rewards(&w).unwrap(), 1e-12)?;
        }
    }

    #[test]
    fn response_level_weights_give_the_policy_gradient(c in case(), g in gamma()) {
        let spec = RewardSpec::hidden(c.table.clone(), g).unwrap();
        let truth = exact_policy_gradient(&c.policy, &spec, g).unwrap();
        for est in [ExactEstimator::TheoremOne, ExactEstimator::TheoremTwo, ExactEstimator::CorollaryOne] {
            let got = exact_estimator_expectation(&est, &c.policy, &spec).unwrap();
            assert_close(got.values(), truth.values(), 1e-10)?;
        }
    }

    #[test]
    fn state_offsets_leave_the_gradient_unchanged(c in case(), g in gamma(), offsets in proptest::collection::vec(-5.0f64..5.0, 64)) {
        let spec = RewardSpec::hidden(c.table.clone(), g).unwrap();
        let table: HashMap<_, _> = c.policy.index().contexts().iter()
            .zip(offsets.iter().cycle())
            .map(|(p, &o)| (p.tokens().to_vec(), o))
            .collect();
        let base = exact_estimator_expectation(&ExactEstimator::LemmaOne { q_gamma: g, outer_gamma: g }, &c.policy, &spec).unwrap();
        let shifted = exact_estimator_expectation(&ExactEstimator::LemmaOneWithBaseline { gamma: g, offsets: table }, &c.policy, &spec).unwrap();
        assert_close(shifted.values(), base.values(), 1e-10)?;
    }

    #[test]
    fn reweighting_undoes_the_outer_discount(c in case(), g in 0.3f64..1.0) {
        let spec = RewardSpec::hidden(c.table.clone(), g).unwrap();
        let reweighted = exact_estimator_expectation(&ExactEstimator::GammaReweighted, &c.policy, &spec).unwrap();
        let target = exact_estimator_expectation(&ExactEstimator::LemmaOne { q_gamma: g, outer_gamma: 1.0 }, &c.policy, &spec).unwrap();
        assert_close(reweighted.values(), target.values(), 1e-10)?;
    }

    #[test]
    fn zero_reward_actor_critic_matches_hidden_gradient(c in case()) {
        let spec = RewardSpec::hidden(c.table.clone(), 1.0).unwrap();
        let truth = exact_policy_gradient(&c.policy, &spec, 1.0).unwrap();
        let got = exact_estimator_expectation(&ExactEstimator::ActorCriticZeroReward { gamma: 1.0 }, &c.policy, &spec).unwrap();
        assert_close(got.values(), truth.values(), 1e-10)?;
    }

    #[test]
    fn leave_one_out_and_greedy_baselines_are_unbiased(c in case(), k in 2usize..5) {
        let spec = RewardSpec::hidden(c.table.clone(), 1.0).unwrap();
        let truth = exact_policy_gradient(&c.policy, &spec, 1.0).unwrap();
        for est in [ExactEstimator::Rloo { k }, ExactEstimator::ReMax] {
            let got = exact_estimator_expectation(&est, &c.policy, &spec).unwrap();
            assert_close(got.values(), truth.values(), 1e-10)?;
        }
    }

    #[test]
    fn gae_endpoints(c in case(), g in gamma(), values in proptest::collection::vec(-3.0f64..3.0, 64)) {
        let spec = RewardSpec::hidden(c.table.clone(), 1.0).unwrap();
        let critic = CriticTable::from_values(
            c.policy.index().contexts().iter().zip(values.iter().cycle()).map(|(p, &v)| (p.tokens().to_vec(), v)).collect(),
            CriticFitConfig::default(),
        );
        let w = sample(&c, 1);
        let r = spec.token_rewards(&w).unwrap();
        let n = w.len();
        let v = |t: usize| if t < n { critic.value(&w[..t]) } else { 0.0 };
        let mc: Vec<f64> = (0..n)
            .map(|t| (t..n).map(|k| g.powi((k - t) as i32) * r[k]).sum::<f64>() - v(t))
            .collect();
        let td: Vec<f64> = (0..n).map(|t| r[t] + g * v(t + 1) - v(t)).collect();
        assert_close(gae_advantages(&w, &r, &critic, g, 1.0).unwrap().advantages(), &mc, 1e-12)?;
        assert_close(gae_advantages(&w, &r, &critic, g, 0.0).unwrap().advantages(), &td, 1e-12)?;
    }

    #[test]
    fn dpo_gradient_matches_finite_differences(c in case(), beta in 0.05f64..2.0) {
        let reference = TabularPolicy::uniform(&c.mdp).unwrap();
        let (yw, yl) = (sample(&c, 2), sample(&c, 3));
        let loss = dpo_loss(&c.policy, &reference, &yw, &yl, beta).unwrap();
        let fd = central_differences(&c.policy, 1e-5, |p| Ok(dpo_loss(p, &reference, &yw, &yl, beta)?.loss)).unwrap();
        assert_close(loss.gradient.values(), fd.values(), 1e-6)?;
    }

    #[test]
    fn on_policy_surrogate_is_the_score_gradient(c in case(), eps in 0.01f64..0.5, adv in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let w = sample(&c, 4);
        let profile = AdvantageProfile::new(w.clone(), adv[..w.len()].to_vec()).unwrap();
        let got = clipped_surrogate_gradient(&c.policy, &c.policy, &profile, eps).unwrap();
        assert_close(got.values(), profile.score_gradient(&c.policy).unwrap().values(), 1e-12)?;
    }

    #[test]
    fn degenerate_trepo_profile_is_constant(c in case(), tau in 0.0f64..2.0) {
        let spec = RewardSpec::hidden(c.table.clone(), 1.0).unwrap().sealed();
        let cfg = TrepoConfig { d_size: Some(1), rollouts: 0, tau_max: tau, ..TrepoConfig::default() };
        let w = sample(&c, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let profile = calculate_advantage(&w, &cfg, &c.policy, &spec, &mut rng).unwrap();
        let first = profile.advantages()[0];
        prop_assert!(profile.advantages().iter().all(|&a| a == first));
    }

    #[test]
    fn exact_trepo_advantages_are_unbiased(c in case()) {
        let spec = RewardSpec::hidden(c.table.clone(), 1.0).unwrap();
        let sealed = spec.sealed();
        let cfg = TrepoConfig { value_source: ValueSource::Exact, ..TrepoConfig::default() };
        let expected = ExpectedRm::new(&c.policy, &sealed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let got = expected_score_gradient(&c.policy, |w| {
            Ok(calculate_advantage_with(w, &cfg, &c.policy, &sealed, Some(&expected), &mut rng)?.advantages().to_vec())
        })
        .unwrap();
        assert_close(got.values(), exact_policy_gradient(&c.policy, &spec, 1.0).unwrap().values(), 1e-10)?;
    }

    #[test]
    fn config_round_trip(
        seed in any::<u64>(),
        fixture in prop::sample::select(vec!["canonical", "v3t3", "trap", "eos", "constant"]),
        name in prop::sample::select(vec!["trepo", "grpo", "rloo", "remax", "ppo-gae", "reinforce"]),
        gamma in 0.1f64..=1.0,
        lambda in 0.0f64..=1.0,
        eps in 0.01f64..0.5,
        rollouts in 1usize..16,
    ) {
        let text = format!(
            "mode = \"train\"\nseed = {seed}\n[mdp]\nfixture = \"{fixture}\"\n[estimator]\nname = \"{name}\"\ngamma = {gamma:?}\nlambda = {lambda:?}\n[trepo]\nepsilon_clip = {eps:?}\nrollouts = {rollouts}\n"
        );
        let parsed = ExperimentConfig::parse(&text).unwrap();
        let back = ExperimentConfig::parse(&parsed.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &parsed);
        prop_assert!(back.resolve().is_ok());
    }
}

