//! Exact ground truth by enumeration of the finite prefix tree: value and
//! Q tables, conditional expected response scores, the exact policy
//! gradient, exact expectations of gradient estimators, and the
//! variance-minimizing per-coordinate baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mdp::{format_tokens, Token, Trajectory, DEFAULT_ENUMERATION_BUDGET};
use crate::policy::{GradientVector, TabularPolicy};
use crate::reward::{RewardSpec, StepRewards, ZeroRewardProjection};

/// `V`, `Q` and `E[RM | prefix]` over the whole prefix tree.
///
/// Terminal prefixes have `V = 0` and `E[RM | W] = RM(W)`.
#[derive(Debug, Clone)]
pub struct ExactTables {
    gamma: f64,
    v: HashMap<Vec<Token>, f64>,
    q: HashMap<Vec<Token>, Vec<f64>>,
    expected_rm: ExpectedRm,
}

impl ExactTables {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn v(&self, prefix: &[Token]) -> f64 {
        self.v.get(prefix).copied().unwrap_or(0.0)
    }

    pub fn q(&self, prefix: &[Token], token: Token) -> f64 {
        self.q.get(prefix).map_or(0.0, |row| row[token])
    }

    pub fn expected_rm(&self) -> &ExpectedRm {
        &self.expected_rm
    }

    /// Tab-separated dump: `prefix V E[RM] Q(prefix, 0) .. Q(prefix, V-1)`,
    /// prefixes sorted.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.v.keys().collect();
        keys.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        let mut out = String::from("# prefix\tV\tE_rm\tQ...\n");
        for k in keys {
            let q = self.q[k]
                .iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join("\t");
            let _ = writeln!(
                out,
                "{}\t{:?}\t{:?}\t{q}",
                format_tokens(k),
                self.v[k],
                self.expected_rm.get(k)
            );
        }
        out
    }
}

/// `E_{W^{(t)}} RM(W^{(t)})` for every reachable prefix, using only the
/// response-level score.
#[derive(Debug, Clone)]
pub struct ExpectedRm {
    table: HashMap<Vec<Token>, f64>,
}

impl ExpectedRm {
    pub fn new(policy: &TabularPolicy, spec: &RewardSpec) -> Result<Self> {
        let mdp = policy.mdp();
        let mut table = HashMap::new();
        for ctx in policy.index().contexts().iter().rev() {
            let probs = policy.probs(ctx)?;
            let mut total = 0.0;
            for (w, p) in probs.iter().enumerate() {
                let mut child = ctx.tokens().to_vec();
                child.push(w);
                let value = if mdp.is_terminal(&child) {
                    let v = spec.rm_checked(mdp, &child)?;
                    table.insert(child, v);
                    v
                } else {
                    table[&child]
                };
                total += p * value;
            }
            table.insert(ctx.tokens().to_vec(), total);
        }
        Ok(Self { table })
    }

    pub fn get(&self, prefix: &[Token]) -> f64 {
        self.table
            .get(prefix)
            .copied()
            .unwrap_or_else(|| panic!("prefix {prefix:?} is not reachable"))
    }

    pub fn try_get(&self, prefix: &[Token]) -> Result<f64> {
        self.table
            .get(prefix)
            .copied()
            .ok_or_else(|| Error::UnknownContext(prefix.to_vec()))
    }
}

/// Backward induction with the hidden token rewards of `spec`.
pub fn exact_tables(policy: &TabularPolicy, spec: &RewardSpec, gamma: f64) -> Result<ExactTables> {
    exact_tables_with(policy, spec, spec, gamma)
}

/// Backward induction with an arbitrary per-step reward source.
pub fn exact_tables_with(
    policy: &TabularPolicy,
    rewards: &dyn StepRewards,
    spec: &RewardSpec,
    gamma: f64,
) -> Result<ExactTables> {
    let mdp = policy.mdp();
    let mut v: HashMap<Vec<Token>, f64> = HashMap::new();
    let mut q = HashMap::new();
    for ctx in policy.index().contexts().iter().rev() {
        let probs = policy.probs(ctx)?;
        let mut q_row = Vec::with_capacity(probs.len());
        let mut value = 0.0;
        for (w, p) in probs.iter().enumerate() {
            let mut child = ctx.tokens().to_vec();
            child.push(w);
            let next_v = if mdp.is_terminal(&child) { 0.0 } else { v[&child] };
            let qw = rewards.reward(ctx, w)? + gamma * next_v;
            value += p * qw;
            q_row.push(qw);
        }
        v.insert(ctx.tokens().to_vec(), value);
        q.insert(ctx.tokens().to_vec(), q_row);
    }
    Ok(ExactTables {
        gamma,
        v,
        q,
        expected_rm: ExpectedRm::new(policy, spec)?,
    })
}

/// Sum over completions `W` of `prefix` of `P(W | prefix) RM(W)`, by direct
/// enumeration of the subtree.
pub fn exact_expected_rm(policy: &TabularPolicy, spec: &RewardSpec, prefix: &[Token]) -> Result<f64> {
    let mdp = policy.mdp();
    mdp.validate(prefix)?;
    let remaining = mdp.horizon() - prefix.len();
    let bound = (mdp.vocab_size() as u128).saturating_pow(remaining as u32);
    if bound > DEFAULT_ENUMERATION_BUDGET as u128 {
        return Err(Error::BudgetExceeded {
            required: bound,
            budget: DEFAULT_ENUMERATION_BUDGET,
        });
    }
    fn walk(policy: &TabularPolicy, spec: &RewardSpec, tokens: &mut Vec<Token>, weight: f64, acc: &mut f64) -> Result<()> {
        let mdp = policy.mdp();
        if mdp.is_terminal(tokens) {
            *acc += weight * spec.rm_checked(mdp, tokens)?;
            return Ok(());
        }
        let probs = policy.probs(tokens)?;
        for (w, p) in probs.into_iter().enumerate() {
            tokens.push(w);
            walk(policy, spec, tokens, weight * p, acc)?;
            tokens.pop();
        }
        Ok(())
    }
    let mut acc = 0.0;
    walk(policy, spec, &mut prefix.to_vec(), 1.0, &mut acc)?;
    Ok(acc)
}

/// `J(theta) = E_W RM(W)`.
pub fn exact_objective(policy: &TabularPolicy, spec: &RewardSpec) -> Result<f64> {
    exact_expected_rm(policy, spec, &[])
}

/// `(trajectory, probability)` for the whole trajectory space.
pub fn trajectory_distribution(policy: &TabularPolicy) -> Result<Vec<(Trajectory, f64)>> {
    policy
        .mdp()
        .trajectories(DEFAULT_ENUMERATION_BUDGET)?
        .map(|t| {
            let p = policy.trajectory_log_prob(&t)?.exp();
            Ok((t, p))
        })
        .collect()
}

/// `E_W sum_t A_t(W) grad log pi(w_t | W_{0,t-1})` for a per-trajectory
/// advantage profile, by enumeration.
pub fn expected_score_gradient(
    policy: &TabularPolicy,
    mut advantages: impl FnMut(&Trajectory) -> Result<Vec<f64>>,
) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros(policy.param_count());
    for (traj, prob) in trajectory_distribution(policy)? {
        if prob == 0.0 {
            continue;
        }
        let adv = advantages(&traj)?;
        if adv.len() != traj.len() {
            return Err(Error::LengthMismatch {
                expected: traj.len(),
                actual: adv.len(),
            });
        }
        for ((state, token), a) in traj.steps().zip(adv) {
            policy.accumulate_grad_log_prob(&mut grad, state, token, prob * a)?;
        }
    }
    Ok(grad)
}

/// Policy gradient with hidden rewards:
/// `E_W sum_t outer_gamma^(t-1) Q_gamma(W_{0,t-1}, w_t) grad log pi`.
pub fn lemma1_gradient(
    policy: &TabularPolicy,
    rewards: &dyn StepRewards,
    spec: &RewardSpec,
    q_gamma: f64,
    outer_gamma: f64,
) -> Result<GradientVector> {
    let tables = exact_tables_with(policy, rewards, spec, q_gamma)?;
    expected_score_gradient(policy, |traj| {
        Ok(traj
            .steps()
            .enumerate()
            .map(|(i, (s, w))| outer_gamma.powi(i as i32) * tables.q(s, w))
            .collect())
    })
}

/// The exact gradient of `V_gamma(empty)` under the hidden rewards of `spec`.
pub fn exact_policy_gradient(policy: &TabularPolicy, spec: &RewardSpec, gamma: f64) -> Result<GradientVector> {
    lemma1_gradient(policy, spec, spec, gamma, gamma)
}

/// Central finite differences of a scalar function of the logits.
pub fn central_differences(
    policy: &TabularPolicy,
    step: f64,
    mut f: impl FnMut(&TabularPolicy) -> Result<f64>,
) -> Result<GradientVector> {
    let base = policy.logits().to_vec();
    let mut grad = GradientVector::zeros(base.len());
    for i in 0..base.len() {
        let mut up = base.clone();
        up[i] += step;
        let mut down = base.clone();
        down[i] -= step;
        grad[i] = (f(&policy.with_logits(up)?)? - f(&policy.with_logits(down)?)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Estimators whose expectation the oracle can compute exactly.
#[derive(Debug, Clone)]
pub enum ExactEstimator {
    /// `outer_gamma^(t-1) Q_q_gamma` weights from hidden rewards.
    LemmaOne { q_gamma: f64, outer_gamma: f64 },
    /// `c(W_{0,t-1}) + gamma^(t-1) Q_gamma` with an arbitrary state table.
    LemmaOneWithBaseline { gamma: f64, offsets: HashMap<Vec<Token>, f64> },
    /// `E[RM | W_{0,t}]`.
    TheoremOne,
    /// `E[RM | W_{0,t}] - E[RM | W_{0,t-1}]`.
    TheoremTwo,
    /// `gamma^-(t-1) E[RM | W_{0,t}]`, gamma taken from the reward model.
    GammaReweighted,
    /// `RM(W)` at every step.
    CorollaryOne,
    /// `RM(W) - RM(greedy)`.
    ReMax,
    /// `RM(W_k)` minus the mean of `k - 1` independent group members.
    Rloo { k: usize },
    /// `Q - V` from exact tables built under the Zero-Reward Assumption.
    ActorCriticZeroReward { gamma: f64 },
    /// Group-normalized advantages: not an enumerable transform.
    Grpo { k: usize },
}

impl ExactEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            ExactEstimator::LemmaOne { .. } => "lemma1",
            ExactEstimator::LemmaOneWithBaseline { .. } => "lemma1-baseline",
            ExactEstimator::TheoremOne => "theorem1",
            ExactEstimator::TheoremTwo => "theorem2",
            ExactEstimator::GammaReweighted => "gamma-reweighted",
            ExactEstimator::CorollaryOne => "corollary1",
            ExactEstimator::ReMax => "remax",
            ExactEstimator::Rloo { .. } => "rloo",
            ExactEstimator::ActorCriticZeroReward { .. } => "actor-critic-zero-reward",
            ExactEstimator::Grpo { .. } => "grpo",
        }
    }
}

/// The exact expected gradient of `estimator`. Estimators that only need
/// response scores see a sealed copy of `spec`.
pub fn exact_estimator_expectation(
    estimator: &ExactEstimator,
    policy: &TabularPolicy,
    spec: &RewardSpec,
) -> Result<GradientVector> {
    let sealed = spec.sealed();
    match estimator {
        ExactEstimator::LemmaOne { q_gamma, outer_gamma } => {
            lemma1_gradient(policy, spec, spec, *q_gamma, *outer_gamma)
        }
        ExactEstimator::LemmaOneWithBaseline { gamma, offsets } => {
            let tables = exact_tables(policy, spec, *gamma)?;
            expected_score_gradient(policy, |traj| {
                Ok(traj
                    .steps()
                    .enumerate()
                    .map(|(i, (s, w))| {
                        offsets.get(s).copied().unwrap_or(0.0) + gamma.powi(i as i32) * tables.q(s, w)
                    })
                    .collect())
            })
        }
        ExactEstimator::TheoremOne => {
            let e = ExpectedRm::new(policy, &sealed)?;
            expected_score_gradient(policy, |traj| {
                Ok((1..=traj.len()).map(|t| e.get(&traj[..t])).collect())
            })
        }
        ExactEstimator::TheoremTwo => {
            let e = ExpectedRm::new(policy, &sealed)?;
            expected_score_gradient(policy, |traj| {
                Ok((1..=traj.len())
                    .map(|t| e.get(&traj[..t]) - e.get(&traj[..t - 1]))
                    .collect())
            })
        }
        ExactEstimator::GammaReweighted => {
            let gamma = spec.gamma();
            let e = ExpectedRm::new(policy, &sealed)?;
            expected_score_gradient(policy, |traj| {
                Ok((1..=traj.len())
                    .map(|t| e.get(&traj[..t]) / gamma.powi(t as i32 - 1))
                    .collect())
            })
        }
        ExactEstimator::CorollaryOne => expected_score_gradient(policy, |traj| {
            Ok(vec![sealed.rm_response(traj); traj.len()])
        }),
        ExactEstimator::ReMax => {
            let greedy = sealed.rm_response(&policy.greedy_trajectory()?);
            expected_score_gradient(policy, |traj| {
                Ok(vec![sealed.rm_response(traj) - greedy; traj.len()])
            })
        }
        ExactEstimator::Rloo { k } => {
            if *k < 2 {
                return Err(Error::GroupTooSmall(*k));
            }
            // The leave-one-out mean is built from members independent of
            // the scored one, so its expectation factors out as E[RM].
            let mean_other = exact_objective(policy, &sealed)?;
            expected_score_gradient(policy, |traj| {
                Ok(vec![sealed.rm_response(traj) - mean_other; traj.len()])
            })
        }
        ExactEstimator::ActorCriticZeroReward { gamma } => {
            let projection = ZeroRewardProjection {
                spec: &sealed,
                mdp: policy.mdp(),
            };
            let tables = exact_tables_with(policy, &projection, &sealed, *gamma)?;
            expected_score_gradient(policy, |traj| {
                Ok(traj.steps().map(|(s, w)| tables.q(s, w) - tables.v(s)).collect())
            })
        }
        ExactEstimator::Grpo { .. } => Err(Error::NotEnumerable(estimator.name().into())),
    }
}

/// The two variates of the baseline derivation at one `(prefix, coordinate)`:
/// `X1 = E[RM | prefix + w]`, `X2 = d log pi(w | prefix) / d theta_coord`,
/// with their probabilities over `w ~ pi(. | prefix)`.
#[derive(Debug, Clone)]
pub struct BaselineVariates {
    pub probs: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl BaselineVariates {
    pub fn new(policy: &TabularPolicy, spec: &RewardSpec, prefix: &[Token], coordinate: usize) -> Result<Self> {
        let row = policy.row(prefix)?;
        let v = policy.vocab_size();
        if coordinate / v != row {
            return Err(Error::CoordinateOutsideRow {
                prefix: prefix.to_vec(),
                coordinate,
            });
        }
        let column = coordinate % v;
        let probs = policy.probs(prefix)?;
        let mut x1 = Vec::with_capacity(v);
        let mut x2 = Vec::with_capacity(v);
        for w in 0..v {
            let mut child = prefix.to_vec();
            child.push(w);
            x1.push(exact_expected_rm(policy, spec, &child)?);
            x2.push(if w == column { 1.0 } else { 0.0 } - probs[column]);
        }
        Ok(Self { probs, x1, x2 })
    }

    fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.probs.iter().enumerate().map(|(w, p)| p * f(w)).sum()
    }

    /// `Var(X1 X2 - b X2)` under `pi(. | prefix)`.
    pub fn variance_with_baseline(&self, b: f64) -> f64 {
        let y = |w: usize| (self.x1[w] - b) * self.x2[w];
        let mean = self.expect(y);
        self.expect(|w| (y(w) - mean).powi(2))
    }

    /// `Cov(X1 X2, X2) / Var(X2)`.
    pub fn optimal_baseline(&self) -> Result<f64> {
        let m12 = self.expect(|w| self.x1[w] * self.x2[w]);
        let m2 = self.expect(|w| self.x2[w]);
        let var2 = self.expect(|w| (self.x2[w] - m2).powi(2));
        if var2 <= 1e-14 {
            return Err(Error::UndefinedBaseline);
        }
        let cov = self.expect(|w| (self.x1[w] * self.x2[w] - m12) * (self.x2[w] - m2));
        Ok(cov / var2)
    }

    /// `E X1`, the baseline obtained when X1 and X2 are treated as
    /// independent.
    pub fn independent_baseline(&self) -> f64 {
        self.expect(|w| self.x1[w])
    }
}

pub fn exact_optimal_baseline(
    policy: &TabularPolicy,
    spec: &RewardSpec,
    prefix: &[Token],
    coordinate: usize,
) -> Result<f64> {
    BaselineVariates::new(policy, spec, prefix, coordinate)?.optimal_baseline()
}
