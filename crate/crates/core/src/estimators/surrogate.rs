use crate::error::{invalid, Error, Result};
use crate::policy::{GradientVector, TabularPolicy};

use super::AdvantageProfile;

/// Value and gradient of the clipped surrogate for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateStep {
    pub value: f64,
    pub gradient: GradientVector,
    /// Steps whose clipped branch was active (zero gradient).
    pub clipped_steps: usize,
}

/// `sum_t min(rho_t A_t, clip(rho_t, 1 - eps, 1 + eps) A_t)` with
/// `rho_t = pi(w_t | s_t) / pi_old(w_t | s_t)`. The gradient of an unclipped
/// step is `rho_t A_t grad log pi(w_t | s_t)`.
pub fn clipped_surrogate(
    policy: &TabularPolicy,
    old_policy: &TabularPolicy,
    profile: &AdvantageProfile,
    epsilon: f64,
) -> Result<SurrogateStep> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(invalid("epsilon", format!("must be a finite non-negative number, got {epsilon}")));
    }
    if policy.param_count() != old_policy.param_count() {
        return Err(Error::DimensionMismatch {
            expected: old_policy.param_count(),
            actual: policy.param_count(),
        });
    }
    let mut gradient = GradientVector::zeros(policy.param_count());
    let mut value = 0.0;
    let mut clipped_steps = 0;
    for ((state, token), &a) in profile.trajectory().steps().zip(profile.advantages()) {
        let old = old_policy.log_prob(state, token)?;
        if old == f64::NEG_INFINITY {
            return Err(Error::ZeroOldProbability {
                prefix: state.to_vec(),
                token,
            });
        }
        let rho = (policy.log_prob(state, token)? - old).exp();
        let clipped_rho = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
        let unclipped = rho * a;
        let clipped = clipped_rho * a;
        if (a > 0.0 && rho > 1.0 + epsilon) || (a < 0.0 && rho < 1.0 - epsilon) {
            value += clipped;
            clipped_steps += 1;
        } else {
            value += unclipped.min(clipped);
            policy.accumulate_grad_log_prob(&mut gradient, state, token, rho * a)?;
        }
    }
    Ok(SurrogateStep {
        value,
        gradient,
        clipped_steps,
    })
}

pub fn clipped_surrogate_gradient(
    policy: &TabularPolicy,
    old_policy: &TabularPolicy,
    profile: &AdvantageProfile,
    epsilon: f64,
) -> Result<GradientVector> {
    Ok(clipped_surrogate(policy, old_policy, profile, epsilon)?.gradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TokenMdp;

    fn setup(ratio_logit: f64) -> (TabularPolicy, TabularPolicy, crate::mdp::Trajectory) {
        let mdp = TokenMdp::new(2, 1, None).unwrap();
        let old = TabularPolicy::uniform(&mdp).unwrap();
        let new = old.with_logits(vec![ratio_logit, 0.0]).unwrap();
        (new, old, mdp.trajectory(vec![0]).unwrap())
    }

    #[test]
    fn on_policy_gradient_is_score_times_advantage() {
        let (_, old, t) = setup(0.0);
        let p = AdvantageProfile::constant(t, 2.0).unwrap();
        let s = clipped_surrogate(&old, &old, &p, 0.2).unwrap();
        assert_eq!(s.gradient.values(), &[1.0, -1.0]);
        assert_eq!(s.value, 2.0);
        assert_eq!(s.clipped_steps, 0);
    }

    #[test]
    fn clipped_branch_blocks_gradient() {
        // pi(0) = 0.6 / 0.5 = 1.2 = 1 + 2 * 0.1
        let logit = (0.6f64 / 0.4).ln();
        let (new, old, t) = setup(logit);
        let up = AdvantageProfile::constant(t.clone(), 1.0).unwrap();
        let s = clipped_surrogate(&new, &old, &up, 0.1).unwrap();
        assert!(s.gradient.values().iter().all(|g| *g == 0.0));
        assert!((s.value - 1.1).abs() < 1e-12);
        let down = AdvantageProfile::constant(t, -1.0).unwrap();
        let s = clipped_surrogate(&new, &old, &down, 0.1).unwrap();
        assert!(s.gradient.values().iter().any(|g| *g != 0.0));
        assert!((s.value + 1.2).abs() < 1e-12);
    }

    #[test]
    fn low_ratio_with_negative_advantage_is_clipped() {
        let logit = (0.4f64 / 0.6).ln();
        let (new, old, t) = setup(logit);
        let p = AdvantageProfile::constant(t.clone(), -1.0).unwrap();
        assert_eq!(clipped_surrogate(&new, &old, &p, 0.1).unwrap().clipped_steps, 1);
        let q = AdvantageProfile::constant(t, 1.0).unwrap();
        assert_eq!(clipped_surrogate(&new, &old, &q, 0.1).unwrap().clipped_steps, 0);
    }

    #[test]
    fn zero_old_probability_is_an_error() {
        let (new, old, t) = setup(0.0);
        let old = old.with_logits(vec![f64::NEG_INFINITY, 0.0]).unwrap();
        let p = AdvantageProfile::constant(t, 1.0).unwrap();
        assert!(matches!(
            clipped_surrogate(&new, &old, &p, 0.2),
            Err(Error::ZeroOldProbability { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_when_unclipped() {
        let mdp = TokenMdp::new(3, 2, None).unwrap();
        let old = TabularPolicy::random(&mdp, 5, 0.5).unwrap();
        let new = TabularPolicy::random(&mdp, 6, 0.5).unwrap();
        let t = mdp.trajectory(vec![2, 1]).unwrap();
        let p = AdvantageProfile::new(t, vec![0.7, -0.3]).unwrap();
        // wide clip range keeps every step on the unclipped branch
        let g = clipped_surrogate_gradient(&new, &old, &p, 100.0).unwrap();
        let h = 1e-6;
        for i in 0..new.param_count() {
            let mut up = new.logits().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let f = |l: Vec<f64>| clipped_surrogate(&new.with_logits(l).unwrap(), &old, &p, 100.0).unwrap().value;
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", g[i]);
        }
    }
}
