//! Experiment configuration files (TOML).
//!
//! ```toml
//! mode = "train"            # "train" or "estimate"
//! seed = 7
//!
//! [mdp]
//! fixture = "canonical"     # or vocab_size / horizon / eos plus a [reward] table
//!
//! [estimator]
//! name = "trepo"
//!
//! [trepo]
//! rollouts = 8
//! ```
//!
//! Every table except `[mdp]` and `[estimator]` is optional; unknown keys
//! are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{CriticFitConfig, CriticSource, EstimatorConfig, EstimatorKind};
use crate::fixtures;
use crate::harness::{TrainOptions, DEFAULT_ALLOWANCE, DEFAULT_Z_THRESHOLD};
use crate::mdp::{Token, TokenMdp, DEFAULT_ENUMERATION_BUDGET};
use crate::policy::TabularPolicy;
use crate::reward::{RewardSpec, TokenRewardTable};
use crate::trepo::{TemperatureSchedule, TrepoConfig, ValueSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub enumeration_budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub mdp: MdpSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardSection>,
    #[serde(default)]
    pub policy: PolicySection,
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub trepo: TrepoSection,
    #[serde(default)]
    pub harness: HarnessSection,
}

fn default_budget() -> u64 {
    DEFAULT_ENUMERATION_BUDGET
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSection {
    CountToken {
        token: Token,
        #[serde(default = "one")]
        gamma: f64,
    },
    OutcomeBinary {
        targets: Vec<Vec<Token>>,
    },
    RandomTable {
        seed: u64,
        #[serde(default = "minus_one")]
        low: f64,
        #[serde(default = "one")]
        high: f64,
        #[serde(default = "one")]
        gamma: f64,
    },
    Constant {
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn minus_one() -> f64 {
    -1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySection {
    #[default]
    Uniform,
    Random {
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub normalize_advantages: bool,
    #[serde(default = "default_critic")]
    pub critic: String,
    #[serde(default = "default_critic_samples")]
    pub critic_samples: usize,
}

fn default_beta() -> f64 {
    0.1
}

fn default_critic() -> String {
    CriticSource::Exact.name().to_string()
}

fn default_critic_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrepoSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_size: Option<usize>,
    pub rollouts: usize,
    pub tau_max: f64,
    pub schedule: String,
    pub batch_size: usize,
    pub optimization_num: usize,
    pub epsilon_clip: f64,
    pub learning_rate: f64,
    pub value_source: String,
}

impl Default for TrepoSection {
    fn default() -> Self {
        let d = TrepoConfig::default();
        Self {
            d_size: d.d_size,
            rollouts: d.rollouts,
            tau_max: d.tau_max,
            schedule: d.schedule.name().to_string(),
            batch_size: d.batch_size,
            optimization_num: d.optimization_num,
            epsilon_clip: d.epsilon_clip,
            learning_rate: d.learning_rate,
            value_source: d.value_source.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessSection {
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub batches: usize,
    pub z_threshold: f64,
    pub allowance: f64,
    pub record_wall_time: bool,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seeds: vec![1, 2, 3, 4, 5],
            batches: 200,
            z_threshold: DEFAULT_Z_THRESHOLD,
            allowance: DEFAULT_ALLOWANCE,
            record_wall_time: false,
        }
    }
}

/// A validated config with every name resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub fixture_name: String,
    pub mdp: TokenMdp,
    pub spec: RewardSpec,
    pub policy: TabularPolicy,
    pub estimator: EstimatorConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses and resolves in one step.
    pub fn load(text: &str) -> Result<Experiment> {
        Self::parse(text)?.resolve()
    }

    pub fn trepo_config(&self) -> Result<TrepoConfig> {
        let t = &self.trepo;
        let cfg = TrepoConfig {
            d_size: t.d_size,
            rollouts: t.rollouts,
            tau_max: t.tau_max,
            schedule: TemperatureSchedule::parse(&t.schedule)?,
            batch_size: t.batch_size,
            optimization_num: t.optimization_num,
            epsilon_clip: t.epsilon_clip,
            learning_rate: t.learning_rate,
            value_source: ValueSource::parse(&t.value_source)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn estimator_config(&self, kind: EstimatorKind) -> Result<EstimatorConfig> {
        let e = &self.estimator;
        let default_k = EstimatorConfig::new(kind).group_size;
        let cfg = EstimatorConfig {
            kind,
            group_size: e.group_size.unwrap_or(default_k),
            gamma: e.gamma,
            lambda: e.lambda,
            beta: e.beta,
            normalize_advantages: e.normalize_advantages,
            critic: CriticSource::parse(&e.critic)?,
            critic_samples: e.critic_samples,
            critic_fit: CriticFitConfig {
                gamma: e.gamma,
                ..CriticFitConfig::default()
            },
            trepo: self.trepo_config()?,
            offsets: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_mdp(&self) -> Result<(String, TokenMdp, RewardSpec)> {
        let m = &self.mdp;
        let custom = m.vocab_size.is_some() || m.horizon.is_some() || m.eos.is_some();
        let (name, mdp, fixture_spec) = match (&m.fixture, custom) {
            (Some(_), true) => {
                return Err(invalid("mdp", "give either fixture or vocab_size/horizon, not both"))
            }
            (Some(name), false) => {
                let f = fixtures::fixture(name)?;
                (name.clone(), f.mdp, Some(f.spec))
            }
            (None, _) => {
                let vocab = m.vocab_size.ok_or_else(|| invalid("mdp.vocab_size", "required without a fixture"))?;
                let horizon = m.horizon.ok_or_else(|| invalid("mdp.horizon", "required without a fixture"))?;
                ("custom".to_string(), TokenMdp::new(vocab, horizon, m.eos)?, None)
            }
        };
        let spec = match (&self.reward, fixture_spec) {
            (Some(r), _) => reward_spec(r, &mdp)?,
            (None, Some(s)) => s,
            (None, None) => return Err(invalid("reward", "required for a custom mdp")),
        };
        Ok((name, mdp, spec))
    }

    pub fn resolve(self) -> Result<Experiment> {
        if self.enumeration_budget == 0 {
            return Err(invalid("enumeration_budget", "must be positive"));
        }
        let (fixture_name, mdp, spec) = self.resolve_mdp()?;
        let policy = match &self.policy {
            PolicySection::Uniform => TabularPolicy::uniform_with_budget(&mdp, self.enumeration_budget)?,
            PolicySection::Random { seed, scale } => {
                if !(scale.is_finite() && *scale >= 0.0) {
                    return Err(invalid("policy.scale", "must be a finite non-negative number"));
                }
                let uniform = TabularPolicy::uniform_with_budget(&mdp, self.enumeration_budget)?;
                let random = TabularPolicy::random(&mdp, *seed, *scale)?;
                uniform.with_logits(random.logits().to_vec())?
            }
        };
        let kind = EstimatorKind::parse(&self.estimator.name)?;
        let estimator = self.estimator_config(kind)?;
        let h = &self.harness;
        if self.mode == Mode::Estimate && h.n_samples < 2 {
            return Err(invalid("harness.n_samples", "need at least two samples"));
        }
        if h.seeds.is_empty() {
            return Err(invalid("harness.seeds", "need at least one seed"));
        }
        if !(h.z_threshold > 0.0 && h.z_threshold.is_finite()) {
            return Err(invalid("harness.z_threshold", "must be positive"));
        }
        if !(0.0..=1.0).contains(&h.allowance) {
            return Err(invalid("harness.allowance", "must lie in [0, 1]"));
        }
        Ok(Experiment {
            config: self,
            fixture_name,
            mdp,
            spec,
            policy,
            estimator,
        })
    }
}

fn reward_spec(r: &RewardSection, mdp: &TokenMdp) -> Result<RewardSpec> {
    match r {
        RewardSection::CountToken { token, gamma } => RewardSpec::count_token(mdp, *token, *gamma),
        RewardSection::OutcomeBinary { targets } => {
            for t in targets {
                mdp.trajectory(t.clone())?;
            }
            RewardSpec::outcome_binary(targets.clone())
        }
        RewardSection::RandomTable { seed, low, high, gamma } => {
            if !(low.is_finite() && high.is_finite() && low <= high) {
                return Err(invalid("reward.low", "must not exceed reward.high"));
            }
            RewardSpec::hidden(TokenRewardTable::random(mdp, *seed, *low, *high)?, *gamma)
        }
        RewardSection::Constant { value } => RewardSpec::constant(mdp, *value),
    }
}

impl Experiment {
    pub fn train_options(&self, seed: u64, config_hash: String) -> TrainOptions {
        TrainOptions {
            batches: self.config.harness.batches,
            seed,
            record_wall_time: self.config.harness.record_wall_time,
            enumeration_budget: self.config.enumeration_budget,
            config_hash: Some(config_hash),
        }
    }
}
