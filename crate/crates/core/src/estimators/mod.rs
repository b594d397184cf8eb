//! Response-level policy gradient estimators and the machinery they share:
//! group baselines, the learned tabular critic with GAE, the clipped
//! surrogate and the DPO loss.

mod critic;
mod dpo;
mod sampled;
mod surrogate;

pub use critic::{fit_critic, gae_advantages, CriticFitConfig, CriticTable};
pub use dpo::{dpo_loss, DpoLoss};
pub use sampled::{CriticSource, Estimate, EstimatorConfig, EstimatorKind, PreparedEstimator};
pub use surrogate::{clipped_surrogate, clipped_surrogate_gradient, SurrogateStep};

use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::policy::{GradientVector, TabularPolicy};

/// Per-step advantages attached to a sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageProfile {
    trajectory: Trajectory,
    advantages: Vec<f64>,
}

impl AdvantageProfile {
    pub fn new(trajectory: Trajectory, advantages: Vec<f64>) -> Result<Self> {
        if advantages.len() != trajectory.len() {
            return Err(Error::LengthMismatch {
                expected: trajectory.len(),
                actual: advantages.len(),
            });
        }
        if let Some(bad) = advantages.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "advantage".into(),
                reason: format!("non-finite value {bad}"),
            });
        }
        Ok(Self {
            trajectory,
            advantages,
        })
    }

    /// The same advantage at every step.
    pub fn constant(trajectory: Trajectory, advantage: f64) -> Result<Self> {
        let n = trajectory.len();
        Self::new(trajectory, vec![advantage; n])
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn advantages_mut(&mut self) -> &mut [f64] {
        &mut self.advantages
    }

    /// `grad += scale * sum_t A_t grad log pi(w_t | W_{0,t-1})`.
    pub fn accumulate_score_gradient(
        &self,
        policy: &TabularPolicy,
        grad: &mut GradientVector,
        scale: f64,
    ) -> Result<()> {
        for ((state, token), a) in self.trajectory.steps().zip(&self.advantages) {
            policy.accumulate_grad_log_prob(grad, state, token, scale * a)?;
        }
        Ok(())
    }

    pub fn score_gradient(&self, policy: &TabularPolicy) -> Result<GradientVector> {
        let mut g = GradientVector::zeros(policy.param_count());
        self.accumulate_score_gradient(policy, &mut g, 1.0)?;
        Ok(g)
    }
}

/// `sum_t RM(W) grad log pi(w_t | W_{0,t-1})`.
pub fn reinforce_rm_gradient(
    policy: &TabularPolicy,
    trajectory: &Trajectory,
    rm_value: f64,
) -> Result<GradientVector> {
    AdvantageProfile::constant(trajectory.clone(), rm_value)?.score_gradient(policy)
}

fn check_group(rewards: &[f64], k: usize) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if k >= rewards.len() {
        return Err(Error::InvalidParameter {
            name: "k".into(),
            reason: format!("index {k} outside group of {}", rewards.len()),
        });
    }
    Ok(())
}

/// `(r_k - mean) / std` with the population standard deviation; zero when
/// the group has no spread.
pub fn grpo_advantage(rewards: &[f64], k: usize) -> Result<f64> {
    check_group(rewards, k)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return Ok(0.0);
    }
    Ok((rewards[k] - mean) / std)
}

/// `r_k - mean(r)` without rescaling.
pub fn group_mean_advantage(rewards: &[f64], k: usize) -> Result<f64> {
    check_group(rewards, k)?;
    Ok(rewards[k] - rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// `r_k - mean of the other K - 1 rewards`.
pub fn rloo_advantage(rewards: &[f64], k: usize) -> Result<f64> {
    check_group(rewards, k)?;
    let others: f64 = rewards.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, r)| r).sum();
    Ok(rewards[k] - others / (rewards.len() - 1) as f64)
}

pub fn remax_advantage(reward: f64, greedy_reward: f64) -> f64 {
    reward - greedy_reward
}

/// Rescales all advantages of a batch to zero mean and unit (population)
/// standard deviation. A batch without spread is only centered.
pub fn normalize_advantages(profiles: &mut [AdvantageProfile]) {
    let all: Vec<f64> = profiles.iter().flat_map(|p| p.advantages.iter().copied()).collect();
    if all.is_empty() {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for p in profiles {
        for a in &mut p.advantages {
            *a = (*a - mean) * scale;
        }
    }
}
