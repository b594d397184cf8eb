use crate::error::{invalid, Result};
use crate::mdp::Trajectory;
use crate::policy::{GradientVector, TabularPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct DpoLoss {
    pub loss: f64,
    /// Gradient of the loss (not of the objective) with respect to the logits.
    pub gradient: GradientVector,
    pub margin: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigma(z)` with
/// `z = beta [(log pi - log pi_ref)(y_w) - (log pi - log pi_ref)(y_l)]`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    preferred: &Trajectory,
    rejected: &Trajectory,
    beta: f64,
) -> Result<DpoLoss> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid("beta", format!("must be positive, got {beta}")));
    }
    let log_ratio = |t: &Trajectory| -> Result<f64> {
        Ok(policy.trajectory_log_prob(t)? - reference.trajectory_log_prob(t)?)
    };
    let margin = beta * (log_ratio(preferred)? - log_ratio(rejected)?);
    let loss = softplus(-margin);
    let weight = -sigmoid(-margin) * beta;
    let mut gradient = GradientVector::zeros(policy.param_count());
    for (s, w) in preferred.steps() {
        policy.accumulate_grad_log_prob(&mut gradient, s, w, weight)?;
    }
    for (s, w) in rejected.steps() {
        policy.accumulate_grad_log_prob(&mut gradient, s, w, -weight)?;
    }
    Ok(DpoLoss {
        loss,
        gradient,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TokenMdp;

    #[test]
    fn identical_policies_give_log_two() {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let p = TabularPolicy::uniform(&mdp).unwrap();
        let d = dpo_loss(
            &p,
            &p,
            &mdp.trajectory(vec![0, 0]).unwrap(),
            &mdp.trajectory(vec![1, 1]).unwrap(),
            0.5,
        )
        .unwrap();
        assert!((d.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d.margin, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mdp = TokenMdp::new(3, 3, None).unwrap();
        let pol = TabularPolicy::random(&mdp, 1, 1.0).unwrap();
        let reference = TabularPolicy::random(&mdp, 2, 1.0).unwrap();
        let yw = mdp.trajectory(vec![0, 2, 1]).unwrap();
        let yl = mdp.trajectory(vec![0, 1, 1]).unwrap();
        let d = dpo_loss(&pol, &reference, &yw, &yl, 0.7).unwrap();
        let h = 1e-6;
        for i in 0..pol.param_count() {
            let mut up = pol.logits().to_vec();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let f = |l: Vec<f64>| dpo_loss(&pol.with_logits(l).unwrap(), &reference, &yw, &yl, 0.7).unwrap().loss;
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - d.gradient[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_margins_stay_finite() {
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn rejects_bad_beta() {
        let mdp = TokenMdp::new(2, 1, None).unwrap();
        let p = TabularPolicy::uniform(&mdp).unwrap();
        let t = mdp.trajectory(vec![0]).unwrap();
        assert!(dpo_loss(&p, &p, &t, &t, 0.0).is_err());
    }
}
