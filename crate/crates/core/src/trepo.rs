//! Prefix-rollout advantage estimation and the TRePO training loop.
//!
//! For a sampled trajectory `W`, the advantage of step `t` is
//! `E[RM | W_{0,t}] - E[RM | W_{0,t-1}]`. Each expectation is estimated by
//! averaging the response score over rollouts that share the relevant
//! prefix with `W`, plus `W` itself.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::estimators::{AdvantageProfile, EstimatorConfig, EstimatorKind};
use crate::harness::{convergence_run, RunLog, TrainOptions};
use crate::mdp::{Token, Trajectory};
use crate::oracle::ExpectedRm;
use crate::policy::TabularPolicy;
use crate::reward::RewardSpec;

/// How rollout temperatures are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemperatureSchedule {
    /// Rollout `j` of `M` (0-based) at `j / (M - 1) * tau_max`: the first is
    /// greedy.
    #[default]
    Ramp,
    /// Every rollout at `tau_max`.
    Fixed,
}

impl TemperatureSchedule {
    pub fn name(self) -> &'static str {
        match self {
            TemperatureSchedule::Ramp => "ramp",
            TemperatureSchedule::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Self::Ramp),
            "fixed" => Ok(Self::Fixed),
            other => Err(invalid("schedule", format!("unknown schedule {other:?}"))),
        }
    }

    pub fn temperatures(self, m: usize, tau_max: f64) -> Vec<f64> {
        match self {
            TemperatureSchedule::Fixed => vec![tau_max; m],
            TemperatureSchedule::Ramp if m == 1 => vec![0.0],
            TemperatureSchedule::Ramp => (0..m)
                .map(|j| j as f64 / (m - 1) as f64 * tau_max)
                .collect(),
        }
    }
}

/// Where prefix expectations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueSource {
    #[default]
    Rollout,
    /// Oracle expectations in place of rollout averages.
    Exact,
}

impl ValueSource {
    pub fn name(self) -> &'static str {
        match self {
            ValueSource::Rollout => "rollout",
            ValueSource::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rollout" => Ok(Self::Rollout),
            "exact" => Ok(Self::Exact),
            other => Err(invalid("value_source", format!("unknown value source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrepoConfig {
    /// `|D|`; `None` selects every step.
    pub d_size: Option<usize>,
    /// Rollouts per selected step (`M`).
    pub rollouts: usize,
    pub tau_max: f64,
    pub schedule: TemperatureSchedule,
    pub batch_size: usize,
    pub optimization_num: usize,
    pub epsilon_clip: f64,
    pub learning_rate: f64,
    pub value_source: ValueSource,
}

impl Default for TrepoConfig {
    fn default() -> Self {
        Self {
            d_size: None,
            rollouts: 8,
            tau_max: 1.0,
            schedule: TemperatureSchedule::Ramp,
            batch_size: 32,
            optimization_num: 4,
            epsilon_clip: 0.2,
            learning_rate: 1.0,
            value_source: ValueSource::Rollout,
        }
    }
}

impl TrepoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_size == Some(0) {
            return Err(invalid("d_size", "must be at least 1"));
        }
        if !(self.tau_max >= 0.0 && self.tau_max.is_finite()) {
            return Err(invalid("tau_max", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.optimization_num == 0 {
            return Err(invalid("optimization_num", "must be at least 1"));
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip.is_finite()) {
            return Err(invalid("epsilon_clip", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// `min(d_size, T)` sorted 1-based steps, always containing 1; the rest are
/// drawn uniformly without replacement from `2..=T`.
pub fn select_timesteps<R: Rng + ?Sized>(horizon: usize, d_size: usize, rng: &mut R) -> Vec<usize> {
    if horizon == 0 {
        return Vec::new();
    }
    let d = d_size.clamp(1, horizon);
    if d == horizon {
        return (1..=horizon).collect();
    }
    let mut steps: Vec<usize> = sample_indices(rng, horizon - 1, d - 1)
        .into_iter()
        .map(|i| i + 2)
        .collect();
    steps.push(1);
    steps.sort_unstable();
    steps
}

/// `m` completions of `prefix` under the given temperature schedule.
pub fn rollout_suffixes<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    prefix: &[Token],
    m: usize,
    tau_max: f64,
    schedule: TemperatureSchedule,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(m);
    for tau in schedule.temperatures(m, tau_max) {
        let t = policy.sample_trajectory(prefix, tau, rng)?;
        assert!(t.starts_with(prefix), "rollout left its prefix");
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateSource {
    Rollout,
    Exact,
}

/// Scored rollouts keyed by the 1-based step they were launched from.
/// Rollouts launched from step `k` share `W_{0,k-1}`.
pub type RolloutBank = BTreeMap<usize, Vec<(Trajectory, f64)>>;

/// Estimates of `E[RM | W_{0,t-1}]` for `t = 1..=T+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixValueEstimates {
    values: Vec<f64>,
    pool_sizes: Vec<usize>,
    source: EstimateSource,
}

impl PrefixValueEstimates {
    /// Estimate at 1-based step `t`, `1 <= t <= T + 1`.
    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    pub fn pool_size(&self, t: usize) -> usize {
        self.pool_sizes[t - 1]
    }

    pub fn source(&self) -> EstimateSource {
        self.source
    }

    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }
}

/// Pool rule: the estimate at step `t` averages `RM(W)` together with every
/// banked rollout launched at a step `k >= t`.
pub fn estimate_prefix_values(
    w: &Trajectory,
    w_reward: f64,
    bank: &RolloutBank,
) -> Result<PrefixValueEstimates> {
    let n = w.len();
    for (&k, rollouts) in bank {
        if k == 0 || k > n {
            return Err(invalid("rollout_bank", format!("step {k} outside 1..={n}")));
        }
        for (r, _) in rollouts {
            if !r.starts_with(&w[..k - 1]) {
                return Err(invalid(
                    "rollout_bank",
                    format!("rollout {r} does not share the prefix of step {k}"),
                ));
            }
        }
    }
    let mut values = vec![0.0; n + 1];
    let mut pool_sizes = vec![0; n + 1];
    let mut sum = w_reward;
    let mut count = 1usize;
    values[n] = w_reward;
    pool_sizes[n] = 1;
    for t in (1..=n).rev() {
        if let Some(rollouts) = bank.get(&t) {
            sum += rollouts.iter().map(|(_, r)| r).sum::<f64>();
            count += rollouts.len();
        }
        values[t - 1] = sum / count as f64;
        pool_sizes[t - 1] = count;
    }
    assert!(
        pool_sizes.windows(2).all(|p| p[0] >= p[1]),
        "pool sizes must not grow with t"
    );
    Ok(PrefixValueEstimates {
        values,
        pool_sizes,
        source: EstimateSource::Rollout,
    })
}

/// Oracle expectations along `w`, with `RM(W)` after the final step.
pub fn exact_prefix_values(w: &Trajectory, w_reward: f64, expected: &ExpectedRm) -> Result<PrefixValueEstimates> {
    let n = w.len();
    let mut values = Vec::with_capacity(n + 1);
    for t in 1..=n {
        values.push(expected.try_get(&w[..t - 1])?);
    }
    values.push(w_reward);
    Ok(PrefixValueEstimates {
        values,
        pool_sizes: vec![0; n + 1],
        source: EstimateSource::Exact,
    })
}

/// Fills every step `1..=horizon` from advantages at the computed steps:
/// linear in `t` between the two nearest computed steps, clamped to the
/// nearest one outside their range.
pub fn interpolate_advantages(horizon: usize, computed: &BTreeMap<usize, f64>) -> Result<Vec<f64>> {
    if computed.is_empty() {
        return Err(invalid("computed", "no computed steps to interpolate from"));
    }
    let mut out = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let below = computed.range(..=t).next_back();
        let above = computed.range(t..).next();
        let v = match (below, above) {
            (Some((&t0, &a0)), Some((&t1, &a1))) if t1 != t0 => {
                a0 + (a1 - a0) * (t - t0) as f64 / (t1 - t0) as f64
            }
            (Some((_, &a)), _) | (None, Some((_, &a))) => a,
            (None, None) => unreachable!("computed is non-empty"),
        };
        out.push(v);
    }
    Ok(out)
}

/// Advantages of `w` from prefix rollouts (or the oracle when
/// `config.value_source` is exact). `expected` supplies a precomputed oracle
/// table for the exact source.
pub fn calculate_advantage_with<R: Rng + ?Sized>(
    w: &Trajectory,
    config: &TrepoConfig,
    policy: &TabularPolicy,
    spec: &RewardSpec,
    expected: Option<&ExpectedRm>,
    rng: &mut R,
) -> Result<AdvantageProfile> {
    let n = w.len();
    let d = select_timesteps(n, config.d_size.unwrap_or(n), rng);
    let w_reward = spec.rm_response(w);
    let estimates = match config.value_source {
        ValueSource::Exact => {
            let owned;
            let table = match expected {
                Some(t) => t,
                None => {
                    owned = ExpectedRm::new(policy, spec)?;
                    &owned
                }
            };
            exact_prefix_values(w, w_reward, table)?
        }
        ValueSource::Rollout => {
            let mut bank = RolloutBank::new();
            for &k in &d {
                let rollouts = rollout_suffixes(
                    policy,
                    &w[..k - 1],
                    config.rollouts,
                    config.tau_max,
                    config.schedule,
                    rng,
                )?;
                let scored = rollouts
                    .into_iter()
                    .map(|r| {
                        let s = spec.rm_response(&r);
                        (r, s)
                    })
                    .collect();
                bank.insert(k, scored);
            }
            estimate_prefix_values(w, w_reward, &bank)?
        }
    };
    let computed: BTreeMap<usize, f64> = d
        .iter()
        .map(|&t| (t, estimates.at(t + 1) - estimates.at(t)))
        .collect();
    AdvantageProfile::new(w.clone(), interpolate_advantages(n, &computed)?)
}

pub fn calculate_advantage<R: Rng + ?Sized>(
    w: &Trajectory,
    config: &TrepoConfig,
    policy: &TabularPolicy,
    spec: &RewardSpec,
    rng: &mut R,
) -> Result<AdvantageProfile> {
    calculate_advantage_with(w, config, policy, spec, None, rng)
}

/// Algorithm main loop: per batch, sample `batch_size` trajectories from the
/// frozen policy, compute their advantages, then take `optimization_num`
/// ascent steps on the clipped surrogate.
pub fn trepo_train(
    config: &TrepoConfig,
    spec: &RewardSpec,
    initial_policy: &TabularPolicy,
    options: &TrainOptions,
) -> Result<(TabularPolicy, RunLog)> {
    config.validate()?;
    let kind = match config.value_source {
        ValueSource::Rollout => EstimatorKind::Trepo,
        ValueSource::Exact => EstimatorKind::TrepoExact,
    };
    let estimator = EstimatorConfig {
        kind,
        trepo: config.clone(),
        ..EstimatorConfig::default()
    };
    convergence_run(&estimator, &spec.sealed(), initial_policy, options)
}

pub(crate) fn check_rollouts(config: &TrepoConfig) -> Result<()> {
    if config.value_source == ValueSource::Rollout && config.rollouts == 0 && config.d_size != Some(1) {
        return Err(Error::InvalidParameter {
            name: "rollouts".into(),
            reason: "zero rollouts only make sense with d_size = 1".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TokenMdp;
    use crate::oracle::{exact_expected_rm, exact_policy_gradient, expected_score_gradient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn canonical() -> (TokenMdp, TabularPolicy, RewardSpec) {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let policy = TabularPolicy::uniform(&mdp).unwrap();
        let spec = RewardSpec::count_token(&mdp, 0, 1.0).unwrap();
        (mdp, policy, spec)
    }

    fn exact_config() -> TrepoConfig {
        TrepoConfig {
            value_source: ValueSource::Exact,
            ..TrepoConfig::default()
        }
    }

    #[test]
    fn select_timesteps_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(select_timesteps(4, 4, &mut rng), vec![1, 2, 3, 4]);
        assert_eq!(select_timesteps(4, 9, &mut rng), vec![1, 2, 3, 4]);
        assert_eq!(select_timesteps(10, 1, &mut rng), vec![1]);
        let a = select_timesteps(10, 3, &mut ChaCha8Rng::seed_from_u64(42));
        let b = select_timesteps(10, 3, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], 1);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&t| (1..=10).contains(&t)));
    }

    #[test]
    fn schedule_temperatures() {
        assert_eq!(TemperatureSchedule::Ramp.temperatures(1, 1.0), vec![0.0]);
        assert_eq!(TemperatureSchedule::Ramp.temperatures(3, 1.0), vec![0.0, 0.5, 1.0]);
        assert_eq!(TemperatureSchedule::Fixed.temperatures(2, 1.0), vec![1.0, 1.0]);
    }

    #[test]
    fn rollout_examples() {
        let (_, policy, spec) = canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let greedy = rollout_suffixes(&policy, &[], 1, 1.0, TemperatureSchedule::Ramp, &mut rng).unwrap();
        assert_eq!(greedy, vec![policy.greedy_trajectory().unwrap()]);
        let rs = rollout_suffixes(&policy, &[0], 64, 1.0, TemperatureSchedule::Ramp, &mut rng).unwrap();
        assert!(rs.iter().all(|r| r[0] == 0));
        let mean = rs.iter().map(|r| spec.rm_response(r)).sum::<f64>() / 64.0;
        assert!((mean - 1.5).abs() < 0.15);
    }

    #[test]
    fn degenerate_pool_is_rm_of_w() {
        let (mdp, _, _) = canonical();
        let w = mdp.trajectory(vec![0, 1]).unwrap();
        let mut bank = RolloutBank::new();
        bank.insert(1, Vec::new());
        let e = estimate_prefix_values(&w, 1.0, &bank).unwrap();
        for t in 1..=3 {
            assert_eq!(e.at(t), 1.0);
        }
    }

    #[test]
    fn pool_size_counting() {
        let mdp = TokenMdp::new(2, 4, None).unwrap();
        let policy = TabularPolicy::uniform(&mdp).unwrap();
        let spec = RewardSpec::count_token(&mdp, 0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = policy.sample_trajectory(&[], 1.0, &mut rng).unwrap();
        let mut bank = RolloutBank::new();
        for k in [2, 4] {
            let rs = rollout_suffixes(&policy, &w[..k - 1], 8, 1.0, TemperatureSchedule::Fixed, &mut rng).unwrap();
            bank.insert(k, rs.into_iter().map(|r| (r.clone(), spec.rm_response(&r))).collect());
        }
        let e = estimate_prefix_values(&w, spec.rm_response(&w), &bank).unwrap();
        assert_eq!(e.pool_size(3), 9);
        assert_eq!(e.pool_size(1), 17);
        assert_eq!(e.pool_size(5), 1);
    }

    #[test]
    fn bank_with_foreign_prefix_is_rejected() {
        let (mdp, _, _) = canonical();
        let w = mdp.trajectory(vec![0, 1]).unwrap();
        let mut bank = RolloutBank::new();
        bank.insert(2, vec![(mdp.trajectory(vec![1, 1]).unwrap(), 0.0)]);
        assert!(estimate_prefix_values(&w, 1.0, &bank).is_err());
    }

    #[test]
    fn exact_advantage_example() {
        let (mdp, policy, spec) = canonical();
        let w = mdp.trajectory(vec![0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = calculate_advantage(&w, &exact_config(), &policy, &spec.sealed(), &mut rng).unwrap();
        assert!((a.advantages()[0] - 0.5).abs() < 1e-12);
        assert!((a.advantages()[1] + 0.5).abs() < 1e-12);
        let e = exact_prefix_values(&w, 1.0, &ExpectedRm::new(&policy, &spec).unwrap()).unwrap();
        assert!((e.at(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_gives_zero_advantages() {
        let mdp = TokenMdp::new(3, 3, None).unwrap();
        let policy = TabularPolicy::random(&mdp, 9, 1.0).unwrap();
        let spec = RewardSpec::constant(&mdp, 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for w in mdp.enumerate_trajectories().unwrap() {
            let a = calculate_advantage(&w, &exact_config(), &policy, &spec, &mut rng).unwrap();
            assert!(a.advantages().iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn interpolation_rule() {
        let computed: BTreeMap<usize, f64> = [(1, 1.0), (3, 3.0)].into_iter().collect();
        assert_eq!(interpolate_advantages(3, &computed).unwrap(), vec![1.0, 2.0, 3.0]);
        let one: BTreeMap<usize, f64> = [(2, 5.0)].into_iter().collect();
        assert_eq!(interpolate_advantages(4, &one).unwrap(), vec![5.0; 4]);
    }

    #[test]
    fn degenerate_config_gives_constant_profile() {
        let mdp = TokenMdp::new(3, 4, None).unwrap();
        let policy = TabularPolicy::random(&mdp, 2, 1.0).unwrap();
        let spec = RewardSpec::count_token(&mdp, 2, 1.0).unwrap();
        let cfg = TrepoConfig {
            d_size: Some(1),
            rollouts: 0,
            ..TrepoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let w = policy.sample_trajectory(&[], 1.0, &mut rng).unwrap();
            let a = calculate_advantage(&w, &cfg, &policy, &spec, &mut rng).unwrap();
            assert!(a.advantages().iter().all(|x| *x == a.advantages()[0]));
        }
    }

    #[test]
    fn exact_bypass_expectation_matches_policy_gradient() {
        let mdp = TokenMdp::new(3, 3, None).unwrap();
        let policy = TabularPolicy::random(&mdp, 12, 1.0).unwrap();
        let spec = RewardSpec::hidden(
            crate::reward::TokenRewardTable::random(&mdp, 4, -1.0, 1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let table = ExpectedRm::new(&policy, &spec).unwrap();
        let cfg = exact_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = expected_score_gradient(&policy, |w| {
            Ok(calculate_advantage_with(w, &cfg, &policy, &spec.sealed(), Some(&table), &mut rng)?
                .advantages()
                .to_vec())
        })
        .unwrap();
        let truth = exact_policy_gradient(&policy, &spec, 1.0).unwrap();
        assert!(g.max_abs_diff(&truth) < 1e-10);
    }

    #[test]
    fn anchor_estimate_is_unbiased_under_fixed_schedule() {
        let (mdp, _, spec) = canonical();
        let policy = TabularPolicy::random(&mdp, 3, 1.0).unwrap();
        let truth = exact_expected_rm(&policy, &spec, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let w = policy.sample_trajectory(&[], 1.0, &mut rng).unwrap();
            let mut bank = RolloutBank::new();
            for k in 1..=2 {
                let rs = rollout_suffixes(&policy, &w[..k - 1], 4, 1.0, TemperatureSchedule::Fixed, &mut rng).unwrap();
                bank.insert(k, rs.into_iter().map(|r| (r.clone(), spec.rm_response(&r))).collect());
            }
            xs.push(estimate_prefix_values(&w, spec.rm_response(&w), &bank).unwrap().at(1));
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - truth).abs() < 3.0 * se, "{mean} vs {truth} (se {se})");
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let bad = TrepoConfig {
            d_size: Some(0),
            ..TrepoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrepoConfig {
            epsilon_clip: 0.0,
            ..TrepoConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(check_rollouts(&TrepoConfig { rollouts: 0, ..TrepoConfig::default() }).is_err());
    }
}
