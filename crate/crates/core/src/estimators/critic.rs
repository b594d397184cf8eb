use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mdp::{Token, Trajectory};
use crate::oracle::ExactTables;
use crate::policy::TabularPolicy;
use crate::reward::RewardSpec;

use super::AdvantageProfile;

/// Fit settings. `epochs == 0` selects the closed-form least-squares
/// solution (the per-prefix mean of the targets); otherwise full-batch
/// gradient descent from zero runs for `epochs` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticFitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Discount for the zero-reward returns-to-go targets.
    pub gamma: f64,
}

impl Default for CriticFitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 0,
            gamma: 1.0,
        }
    }
}

/// Learned `V(prefix)`; terminal and unvisited prefixes read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTable {
    values: HashMap<Vec<Token>, f64>,
    fit_config: CriticFitConfig,
}

impl CriticTable {
    pub fn from_values(values: HashMap<Vec<Token>, f64>, fit_config: CriticFitConfig) -> Self {
        Self { values, fit_config }
    }

    /// A critic initialized from exact tables ("well-initialized").
    pub fn from_exact(policy: &TabularPolicy, tables: &ExactTables) -> Self {
        let values = policy
            .index()
            .contexts()
            .iter()
            .map(|c| (c.tokens().to_vec(), tables.v(c)))
            .collect();
        Self {
            values,
            fit_config: CriticFitConfig {
                gamma: tables.gamma(),
                ..CriticFitConfig::default()
            },
        }
    }

    pub fn value(&self, prefix: &[Token]) -> f64 {
        self.values.get(prefix).copied().unwrap_or(0.0)
    }

    pub fn fit_config(&self) -> &CriticFitConfig {
        &self.fit_config
    }
}

/// Least-squares fit of `V(prefix)` to zero-reward returns-to-go of
/// trajectories sampled from `policy`.
pub fn fit_critic<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    spec: &RewardSpec,
    samples: usize,
    fit_config: CriticFitConfig,
    rng: &mut R,
) -> Result<CriticTable> {
    if samples == 0 {
        return Err(invalid("samples", "critic fit needs at least one sample"));
    }
    if !(fit_config.gamma > 0.0 && fit_config.gamma <= 1.0) {
        return Err(invalid("gamma", "must lie in (0, 1]"));
    }
    let mut sums: HashMap<Vec<Token>, (f64, usize)> = HashMap::new();
    for _ in 0..samples {
        let traj = policy.sample_trajectory(&[], 1.0, rng)?;
        let rm = spec.rm_response(&traj);
        let n = traj.len();
        for t in 0..n {
            // only the final step is rewarded, so G_t = gamma^(T-t) RM
            let target = fit_config.gamma.powi((n - 1 - t) as i32) * rm;
            let e = sums.entry(traj[..t].to_vec()).or_insert((0.0, 0));
            e.0 += target;
            e.1 += 1;
        }
    }
    let values = if fit_config.epochs == 0 {
        sums.into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect()
    } else {
        let mut values = HashMap::new();
        for (k, (s, c)) in sums {
            let mean = s / c as f64;
            let mut v = 0.0;
            for _ in 0..fit_config.epochs {
                v -= fit_config.learning_rate * (v - mean);
            }
            values.insert(k, v);
        }
        values
    };
    Ok(CriticTable { values, fit_config })
}

/// GAE: `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)`,
/// `A_t = sum_{k >= t} (gamma lambda)^(k-t) delta_k`, with `V = 0` after
/// the final step.
pub fn gae_advantages(
    trajectory: &Trajectory,
    rewards: &[f64],
    critic: &CriticTable,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageProfile> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    let n = trajectory.len();
    if rewards.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: rewards.len(),
        });
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 == n { 0.0 } else { critic.value(&trajectory[..t + 1]) };
        let delta = rewards[t] + gamma * next - critic.value(&trajectory[..t]);
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    AdvantageProfile::new(trajectory.clone(), adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TokenMdp;
    use crate::oracle::exact_tables;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn canonical() -> (TokenMdp, TabularPolicy, RewardSpec) {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let policy = TabularPolicy::uniform(&mdp).unwrap();
        let spec = RewardSpec::count_token(&mdp, 0, 1.0).unwrap();
        (mdp, policy, spec)
    }

    fn critic(pairs: &[(&[Token], f64)]) -> CriticTable {
        CriticTable::from_values(
            pairs.iter().map(|(k, v)| (k.to_vec(), *v)).collect(),
            CriticFitConfig::default(),
        )
    }

    #[test]
    fn gae_examples() {
        let (mdp, _, _) = canonical();
        let t = mdp.trajectory(vec![0, 0]).unwrap();
        let c = critic(&[(&[], 1.0), (&[0], 1.5)]);
        let a = gae_advantages(&t, &[0.0, 2.0], &c, 1.0, 1.0).unwrap();
        assert_eq!(a.advantages(), &[1.0, 0.5]);
        let a0 = gae_advantages(&t, &[0.0, 2.0], &c, 1.0, 0.0).unwrap();
        assert_eq!(a0.advantages(), &[0.5, 0.5]);
        assert!(gae_advantages(&t, &[0.0], &c, 1.0, 1.0).is_err());
        assert!(gae_advantages(&t, &[0.0, 2.0], &c, 1.0, 1.5).is_err());
    }

    #[test]
    fn gae_with_exact_critic_is_return_minus_value() {
        let (mdp, policy, spec) = canonical();
        let tables = exact_tables(&policy, &spec, 1.0).unwrap();
        let c = CriticTable::from_exact(&policy, &tables);
        for t in mdp.enumerate_trajectories().unwrap() {
            let r = spec.token_rewards(&t).unwrap();
            let a = gae_advantages(&t, &r, &c, 1.0, 1.0).unwrap();
            for step in 0..t.len() {
                let g: f64 = r[step..].iter().sum();
                assert!((a.advantages()[step] - (g - tables.v(&t[..step]))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fitted_critic_approaches_oracle() {
        let (_, policy, spec) = canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = fit_critic(&policy, &spec, 100_000, CriticFitConfig::default(), &mut rng).unwrap();
        assert!((c.value(&[]) - 1.0).abs() < 0.05);
        assert!((c.value(&[0]) - 1.5).abs() < 0.05);
        let gd = fit_critic(
            &policy,
            &spec,
            10_000,
            CriticFitConfig { learning_rate: 0.5, epochs: 200, gamma: 1.0 },
            &mut rng,
        )
        .unwrap();
        assert!((gd.value(&[]) - 1.0).abs() < 0.05);
        assert!(fit_critic(&policy, &spec, 0, CriticFitConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn deterministic_policy_critic_is_exact() {
        let (mdp, _, spec) = canonical();
        let policy = TabularPolicy::from_logits(&mdp, vec![-800.0, 800.0, 0.0, 0.0, -800.0, 800.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = fit_critic(&policy, &spec, 1, CriticFitConfig::default(), &mut rng).unwrap();
        let tables = exact_tables(&policy, &spec, 1.0).unwrap();
        assert_eq!(c.value(&[]), tables.v(&[]));
        assert_eq!(c.value(&[1]), tables.v(&[1]));
    }

    #[test]
    fn exact_bypass_reproduces_oracle() {
        let mdp = TokenMdp::new(3, 3, None).unwrap();
        let policy = TabularPolicy::random(&mdp, 4, 1.0).unwrap();
        let spec = RewardSpec::count_token(&mdp, 1, 1.0).unwrap();
        let tables = exact_tables(&policy, &spec, 1.0).unwrap();
        let c = CriticTable::from_exact(&policy, &tables);
        for ctx in policy.index().contexts() {
            assert!((c.value(ctx) - tables.v(ctx)).abs() < 1e-12);
        }
    }
}
