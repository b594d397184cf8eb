use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::mdp::{Token, Trajectory};
use crate::oracle::{exact_estimator_expectation, exact_tables_with, ExactEstimator, ExpectedRm};
use crate::policy::{GradientVector, TabularPolicy};
use crate::reward::{RewardSpec, ZeroRewardProjection};
use crate::trepo::{calculate_advantage_with, check_rollouts, TrepoConfig, ValueSource};

use super::{
    dpo_loss, fit_critic, gae_advantages, grpo_advantage, group_mean_advantage, normalize_advantages,
    remax_advantage, rloo_advantage, AdvantageProfile, CriticFitConfig, CriticTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// `RM(W)` at every step.
    Reinforce,
    /// Discounted hidden returns-to-go; needs hidden reward access.
    Lemma1,
    Grpo,
    /// Group-mean baseline without the std rescaling.
    GrpoMean,
    Rloo,
    Remax,
    /// Prefix-rollout advantages.
    Trepo,
    /// Prefix advantages from the oracle.
    TrepoExact,
    /// GAE over zero-reward-projected rewards with a tabular critic.
    PpoGae,
    /// Preference pairs ranked by `RM`, reference policy fixed.
    Dpo,
    /// The oracle gradient itself.
    Exact,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 11] = [
        EstimatorKind::Reinforce,
        EstimatorKind::Lemma1,
        EstimatorKind::Grpo,
        EstimatorKind::GrpoMean,
        EstimatorKind::Rloo,
        EstimatorKind::Remax,
        EstimatorKind::Trepo,
        EstimatorKind::TrepoExact,
        EstimatorKind::PpoGae,
        EstimatorKind::Dpo,
        EstimatorKind::Exact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Lemma1 => "lemma1",
            EstimatorKind::Grpo => "grpo",
            EstimatorKind::GrpoMean => "grpo-mean",
            EstimatorKind::Rloo => "rloo",
            EstimatorKind::Remax => "remax",
            EstimatorKind::Trepo => "trepo",
            EstimatorKind::TrepoExact => "trepo-exact",
            EstimatorKind::PpoGae => "ppo-gae",
            EstimatorKind::Dpo => "dpo",
            EstimatorKind::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "corollary1" {
            return Ok(EstimatorKind::Reinforce);
        }
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownEstimator(s.to_string()))
    }

    pub fn is_group(self) -> bool {
        matches!(self, EstimatorKind::Grpo | EstimatorKind::GrpoMean | EstimatorKind::Rloo)
    }

    /// Kinds trained with several clipped-surrogate steps per batch.
    pub fn uses_surrogate(self) -> bool {
        matches!(self, EstimatorKind::Trepo | EstimatorKind::TrepoExact | EstimatorKind::PpoGae)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CriticSource {
    #[default]
    Exact,
    Fitted,
}

impl CriticSource {
    pub fn name(self) -> &'static str {
        match self {
            CriticSource::Exact => "exact",
            CriticSource::Fitted => "fitted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "fitted" => Ok(Self::Fitted),
            other => Err(invalid("critic", format!("unknown critic source {other:?}"))),
        }
    }
}

/// Everything needed to draw one gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Trajectories per estimate (`K`).
    pub group_size: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub normalize_advantages: bool,
    pub critic: CriticSource,
    pub critic_samples: usize,
    pub critic_fit: CriticFitConfig,
    pub trepo: TrepoConfig,
    /// Per-context constants added to every advantage.
    pub offsets: Option<HashMap<Vec<Token>, f64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Reinforce,
            group_size: 1,
            gamma: 1.0,
            lambda: 1.0,
            beta: 0.1,
            normalize_advantages: false,
            critic: CriticSource::Exact,
            critic_samples: 1000,
            critic_fit: CriticFitConfig::default(),
            trepo: TrepoConfig::default(),
            offsets: None,
        }
    }
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        let group_size = if kind.is_group() { 4 } else { 1 };
        Self {
            kind,
            group_size,
            ..Self::default()
        }
    }

    pub fn with_group_size(mut self, k: usize) -> Self {
        self.group_size = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(invalid("group_size", "must be at least 1"));
        }
        if self.kind.is_group() && self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", "must be positive"));
        }
        if self.kind == EstimatorKind::PpoGae && self.critic == CriticSource::Fitted && self.critic_samples == 0 {
            return Err(invalid("critic_samples", "a fitted critic needs at least one sample"));
        }
        self.trepo.validate()?;
        check_rollouts(&self.trepo)
    }
}

/// One draw: the averaged gradient and the mean response score of the
/// trajectories it consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub gradient: GradientVector,
    pub mean_rm: f64,
}

/// An estimator bound to a fixed policy snapshot, with the per-snapshot
/// quantities (greedy score, oracle tables, critic) computed once.
pub struct PreparedEstimator<'a> {
    config: &'a EstimatorConfig,
    policy: &'a TabularPolicy,
    spec: RewardSpec,
    reference: Option<&'a TabularPolicy>,
    greedy_reward: f64,
    expected: Option<ExpectedRm>,
    critic: Option<CriticTable>,
    exact_gradient: Option<GradientVector>,
}

impl<'a> PreparedEstimator<'a> {
    /// `setup_rng` is only consulted to fit a sampled critic.
    pub fn new(
        config: &'a EstimatorConfig,
        policy: &'a TabularPolicy,
        spec: &RewardSpec,
        setup_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        // only the hidden-return estimator may read token rewards
        let spec = if config.kind == EstimatorKind::Lemma1 { spec.clone() } else { spec.sealed() };
        let greedy_reward = spec.rm_response(&policy.greedy_trajectory()?);
        let expected = match config.kind {
            EstimatorKind::TrepoExact => Some(ExpectedRm::new(policy, &spec)?),
            EstimatorKind::Trepo if config.trepo.value_source == ValueSource::Exact => {
                Some(ExpectedRm::new(policy, &spec)?)
            }
            _ => None,
        };
        let critic = match (config.kind, config.critic) {
            (EstimatorKind::PpoGae, CriticSource::Exact) => {
                let projection = ZeroRewardProjection {
                    spec: &spec,
                    mdp: policy.mdp(),
                };
                let tables = exact_tables_with(policy, &projection, &spec, config.gamma)?;
                Some(CriticTable::from_exact(policy, &tables))
            }
            (EstimatorKind::PpoGae, CriticSource::Fitted) => {
                let fit = CriticFitConfig {
                    gamma: config.gamma,
                    ..config.critic_fit
                };
                Some(fit_critic(policy, &spec, config.critic_samples, fit, setup_rng)?)
            }
            _ => None,
        };
        // the tower property makes this the gradient of E[RM] for any score
        let exact_gradient = match config.kind {
            EstimatorKind::Exact => Some(exact_estimator_expectation(&ExactEstimator::TheoremOne, policy, &spec)?),
            _ => None,
        };
        Ok(Self {
            config,
            policy,
            spec,
            reference: None,
            greedy_reward,
            expected,
            critic,
            exact_gradient,
        })
    }

    /// Reference policy for the DPO kind; defaults to the snapshot itself.
    pub fn with_reference(mut self, reference: &'a TabularPolicy) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn config(&self) -> &EstimatorConfig {
        self.config
    }

    pub fn policy(&self) -> &TabularPolicy {
        self.policy
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        self.policy.sample_trajectory(&[], 1.0, rng)
    }

    /// Advantage profiles of one group of `group_size` fresh trajectories,
    /// before offsets and normalization.
    fn raw_profiles(&self, rng: &mut ChaCha8Rng) -> Result<Vec<AdvantageProfile>> {
        let k = self.config.group_size;
        let mut trajs = Vec::with_capacity(k);
        for _ in 0..k {
            trajs.push(self.sample(rng)?);
        }
        let rewards: Vec<f64> = trajs.iter().map(|t| self.spec.rm_response(t)).collect();
        let mut out = Vec::with_capacity(k);
        for (i, t) in trajs.into_iter().enumerate() {
            let profile = match self.config.kind {
                EstimatorKind::Reinforce => AdvantageProfile::constant(t, rewards[i])?,
                EstimatorKind::Grpo => AdvantageProfile::constant(t, grpo_advantage(&rewards, i)?)?,
                EstimatorKind::GrpoMean => AdvantageProfile::constant(t, group_mean_advantage(&rewards, i)?)?,
                EstimatorKind::Rloo => AdvantageProfile::constant(t, rloo_advantage(&rewards, i)?)?,
                EstimatorKind::Remax => {
                    AdvantageProfile::constant(t, remax_advantage(rewards[i], self.greedy_reward))?
                }
                EstimatorKind::Lemma1 => {
                    let r = self.spec.token_rewards(&t)?;
                    let g = self.config.gamma;
                    let mut adv = vec![0.0; r.len()];
                    let mut ret = 0.0;
                    for s in (0..r.len()).rev() {
                        ret = r[s] + g * ret;
                        adv[s] = g.powi(s as i32) * ret;
                    }
                    AdvantageProfile::new(t, adv)?
                }
                EstimatorKind::Trepo | EstimatorKind::TrepoExact => {
                    let mut cfg = self.config.trepo.clone();
                    if self.config.kind == EstimatorKind::TrepoExact {
                        cfg.value_source = ValueSource::Exact;
                    }
                    calculate_advantage_with(&t, &cfg, self.policy, &self.spec, self.expected.as_ref(), rng)?
                }
                EstimatorKind::PpoGae => {
                    let critic = self.critic.as_ref().expect("critic prepared for ppo-gae");
                    let r = self.spec.zero_reward_projection(&t);
                    gae_advantages(&t, &r, critic, self.config.gamma, self.config.lambda)?
                }
                EstimatorKind::Dpo | EstimatorKind::Exact => {
                    return Err(invalid(
                        "estimator",
                        format!("{} does not produce advantage profiles", self.config.kind.name()),
                    ))
                }
            };
            out.push(profile);
        }
        Ok(out)
    }

    fn apply_offsets(&self, profiles: &mut [AdvantageProfile]) {
        if let Some(offsets) = &self.config.offsets {
            for p in profiles {
                let t = p.trajectory().clone();
                for (a, (s, _)) in p.advantages_mut().iter_mut().zip(t.steps()) {
                    *a += offsets.get(s).copied().unwrap_or(0.0);
                }
            }
        }
    }

    /// One group with offsets applied; normalization is left to the caller.
    pub fn profiles(&self, rng: &mut ChaCha8Rng) -> Result<Vec<AdvantageProfile>> {
        let mut ps = self.raw_profiles(rng)?;
        self.apply_offsets(&mut ps);
        Ok(ps)
    }

    /// Mean response score of a set of profiles.
    pub fn mean_rm(&self, profiles: &[AdvantageProfile]) -> f64 {
        if profiles.is_empty() {
            return 0.0;
        }
        profiles.iter().map(|p| self.spec.rm_response(p.trajectory())).sum::<f64>() / profiles.len() as f64
    }

    /// One gradient estimate.
    pub fn estimate(&self, rng: &mut ChaCha8Rng) -> Result<Estimate> {
        match self.config.kind {
            EstimatorKind::Exact => Ok(Estimate {
                gradient: self.exact_gradient.clone().expect("exact gradient prepared"),
                mean_rm: self.spec.rm_response(&self.sample(rng)?),
            }),
            EstimatorKind::Dpo => self.dpo_estimate(rng),
            _ => {
                let mut ps = self.profiles(rng)?;
                if self.config.normalize_advantages {
                    normalize_advantages(&mut ps);
                }
                let mut g = GradientVector::zeros(self.policy.param_count());
                let scale = 1.0 / ps.len() as f64;
                for p in &ps {
                    p.accumulate_score_gradient(self.policy, &mut g, scale)?;
                }
                Ok(Estimate {
                    gradient: g,
                    mean_rm: self.mean_rm(&ps),
                })
            }
        }
    }

    /// Ascent direction `-grad loss` for one pair ranked by the response
    /// score; ties carry no preference.
    fn dpo_estimate(&self, rng: &mut ChaCha8Rng) -> Result<Estimate> {
        let a = self.sample(rng)?;
        let b = self.sample(rng)?;
        let (ra, rb) = (self.spec.rm_response(&a), self.spec.rm_response(&b));
        let mean_rm = 0.5 * (ra + rb);
        if ra == rb {
            return Ok(Estimate {
                gradient: GradientVector::zeros(self.policy.param_count()),
                mean_rm,
            });
        }
        let (yw, yl) = if ra > rb { (&a, &b) } else { (&b, &a) };
        let reference = self.reference.unwrap_or(self.policy);
        let mut d = dpo_loss(self.policy, reference, yw, yl, self.config.beta)?;
        d.gradient.scale(-1.0);
        Ok(Estimate {
            gradient: d.gradient,
            mean_rm,
        })
    }
}
