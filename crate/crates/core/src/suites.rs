//! Named verification suites. Each suite runs its checks on baked-in
//! fixtures and returns one row per check.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimators::{gae_advantages, CriticFitConfig, CriticTable, EstimatorConfig, EstimatorKind};
use crate::fixtures;
use crate::harness::{estimate_stats, unbiasedness_report, DEFAULT_ALLOWANCE, DEFAULT_Z_THRESHOLD};
use crate::mdp::{Token, TokenMdp};
use crate::oracle::{
    central_differences, exact_estimator_expectation, exact_expected_rm, exact_objective, exact_policy_gradient,
    expected_score_gradient, BaselineVariates, ExactEstimator, ExpectedRm,
};
use crate::policy::TabularPolicy;
use crate::reward::{RewardSpec, TokenRewardTable};
use crate::trepo::{calculate_advantage_with, TrepoConfig, ValueSource};

pub const SUITE_NAMES: [&str; 8] = [
    "lemma1",
    "lemma2",
    "theorem1",
    "theorem2",
    "gamma-remark",
    "main-theorem",
    "gae-endpoints",
    "corollary1",
];

/// Bonus added by the negative-control corruption.
const MUTATION_BONUS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub case: String,
    /// Measured error (absolute difference, or `|z|` for statistical rows).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub mutated: bool,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    fn new(suite: &str, mutated: bool) -> Self {
        Self {
            suite: suite.to_string(),
            mutated,
            rows: Vec::new(),
        }
    }

    fn check(&mut self, check: &str, case: impl Into<String>, value: f64, tolerance: f64) {
        self.rows.push(CheckRow {
            check: check.to_string(),
            case: case.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }

    fn flag(&mut self, check: &str, case: impl Into<String>, value: f64, tolerance: f64, passed: bool) {
        self.rows.push(CheckRow {
            check: check.to_string(),
            case: case.into(),
            value,
            tolerance,
            passed,
        });
    }

    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.passed).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,case,value,tolerance,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{}",
                r.check,
                r.case,
                r.value,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "suite {}{}: {} ({} checks, {} failed)",
            self.suite,
            if self.mutated { " [mutated]" } else { "" },
            if self.passed() { "PASS" } else { "FAIL" },
            self.rows.len(),
            self.failures()
        )
    }
}

/// Runs one named suite. `mutate` swaps in a response score that no longer
/// matches its hidden decomposition, and must make the reward-based suites
/// fail.
pub fn run_suite(name: &str, seed: u64, mutate: bool) -> Result<SuiteReport> {
    match name {
        "lemma1" => lemma1(seed, mutate),
        "lemma2" => lemma2(seed, mutate),
        "theorem1" => theorem1(seed, mutate),
        "theorem2" => theorem2(seed, mutate),
        "gamma-remark" => gamma_remark(seed, mutate),
        "main-theorem" => main_theorem(seed, mutate),
        "gae-endpoints" => gae_endpoints(seed, mutate),
        "corollary1" => corollary1(seed, mutate),
        other => Err(Error::UnknownSuite(other.to_string())),
    }
}

fn maybe_mutate(spec: &RewardSpec, mutate: bool) -> RewardSpec {
    if mutate {
        spec.corrupted(MUTATION_BONUS)
    } else {
        spec.clone()
    }
}

fn random_spec(mdp: &TokenMdp, seed: u64, gamma: f64) -> Result<RewardSpec> {
    RewardSpec::hidden(TokenRewardTable::random(mdp, seed, -1.0, 1.0)?, gamma)
}

fn small_mdps() -> Result<Vec<(&'static str, TokenMdp)>> {
    Ok(vec![
        ("v2t2", TokenMdp::new(2, 2, None)?),
        ("v3t3", TokenMdp::new(3, 3, None)?),
    ])
}

/// Exact gradient against central differences of `J`.
fn lemma1(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("lemma1", mutate);
    for (label, mdp) in small_mdps()? {
        for i in 0..20u64 {
            let k = seed.wrapping_mul(1000).wrapping_add(i);
            let policy = TabularPolicy::random(&mdp, k, 1.5)?;
            let gamma = [1.0, 0.9][i as usize % 2];
            let spec = maybe_mutate(&random_spec(&mdp, k + 500, gamma)?, mutate);
            let g = exact_policy_gradient(&policy, &spec, gamma)?;
            let fd = central_differences(&policy, 1e-5, |p| exact_objective(p, &spec))?;
            report.check("grad_vs_finite_diff", format!("{label}/policy{i}/gamma{gamma}"), g.max_abs_diff(&fd), 1e-6);
        }
    }
    Ok(report)
}

/// Per-context offsets leave the exact expectation unchanged.
fn lemma2(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("lemma2", mutate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (label, mdp) in small_mdps()? {
        let policy = TabularPolicy::random(&mdp, seed + 1, 1.0)?;
        let spec = maybe_mutate(&random_spec(&mdp, seed + 2, 1.0)?, mutate);
        let plain = exact_estimator_expectation(&ExactEstimator::LemmaOne { q_gamma: 1.0, outer_gamma: 1.0 }, &policy, &spec)?;
        for draw in 0..10 {
            let offsets: HashMap<Vec<Token>, f64> = policy
                .index()
                .contexts()
                .iter()
                .map(|c| (c.tokens().to_vec(), rng.gen_range(-5.0..5.0)))
                .collect();
            let shifted = exact_estimator_expectation(
                &ExactEstimator::LemmaOneWithBaseline { gamma: 1.0, offsets },
                &policy,
                &spec,
            )?;
            report.check("offset_invariance", format!("{label}/draw{draw}"), shifted.max_abs_diff(&plain), 1e-10);
        }
        let truth = exact_policy_gradient(&policy, &spec, 1.0)?;
        for k in [2, 4, 8] {
            let rloo = exact_estimator_expectation(&ExactEstimator::Rloo { k }, &policy, &spec)?;
            report.check("rloo_expectation", format!("{label}/k{k}"), rloo.max_abs_diff(&truth), 1e-10);
        }
        let remax = exact_estimator_expectation(&ExactEstimator::ReMax, &policy, &spec)?;
        report.check("remax_expectation", label, remax.max_abs_diff(&truth), 1e-10);
    }
    Ok(report)
}

/// The response-level form reproduces the hidden-reward gradient.
fn theorem1(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("theorem1", mutate);
    for (label, mdp) in small_mdps()? {
        for gamma in [0.5, 0.9, 1.0] {
            for i in 0..10u64 {
                let k = seed.wrapping_mul(7919).wrapping_add(i);
                let policy = TabularPolicy::random(&mdp, k, 1.0)?;
                let spec = random_spec(&mdp, k + 77, gamma)?;
                let truth = exact_policy_gradient(&policy, &spec, gamma)?;
                let scored = maybe_mutate(&spec, mutate);
                let response = exact_estimator_expectation(&ExactEstimator::TheoremOne, &policy, &scored)?;
                report.check(
                    "response_level_vs_hidden",
                    format!("{label}/gamma{gamma}/table{i}"),
                    response.max_abs_diff(&truth),
                    1e-10,
                );
            }
        }
    }
    Ok(report)
}

/// Optimal baseline minimizes the variance, the independence approximation
/// is the prefix expectation, and prefix-difference advantages stay unbiased.
fn theorem2(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("theorem2", mutate);
    for (label, mdp) in small_mdps()? {
        let policy = TabularPolicy::random(&mdp, seed + 10, 1.0)?;
        let hidden = random_spec(&mdp, seed + 20, 1.0)?;
        let spec = maybe_mutate(&hidden, mutate);
        let v = mdp.vocab_size();
        for ctx in policy.index().contexts() {
            let row = policy.row(ctx)?;
            for col in 0..v {
                let coord = row * v + col;
                let case = format!("{label}/{}/{col}", crate::mdp::format_tokens(ctx));
                let bv = BaselineVariates::new(&policy, &spec, ctx, coord)?;
                match bv.optimal_baseline() {
                    Ok(b) => {
                        let at = bv.variance_with_baseline(b);
                        let worst = [0.01, 0.1, 1.0]
                            .iter()
                            .flat_map(|d| [b + d, b - d])
                            .map(|bb| at - bv.variance_with_baseline(bb))
                            .fold(f64::NEG_INFINITY, f64::max);
                        let slack = 1e-12 * at.abs().max(1.0);
                        report.flag("optimal_baseline_minimizes", case.clone(), worst.max(0.0), slack, worst <= slack);
                    }
                    Err(Error::UndefinedBaseline) => {}
                    Err(e) => return Err(e),
                }
                let indep = bv.independent_baseline();
                let direct = exact_expected_rm(&policy, &spec, ctx)?;
                report.check("independent_baseline_is_prefix_value", case, (indep - direct).abs(), 1e-12);
            }
        }
        let truth = exact_policy_gradient(&policy, &hidden, 1.0)?;
        let e2 = exact_estimator_expectation(&ExactEstimator::TheoremTwo, &policy, &spec)?;
        report.check("prefix_difference_unbiased", label, e2.max_abs_diff(&truth), 1e-10);
        let table = ExpectedRm::new(&policy, &spec.sealed())?;
        let cfg = TrepoConfig {
            value_source: ValueSource::Exact,
            ..TrepoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sealed = spec.sealed();
        let g = expected_score_gradient(&policy, |w| {
            Ok(calculate_advantage_with(w, &cfg, &policy, &sealed, Some(&table), &mut rng)?
                .advantages()
                .to_vec())
        })?;
        report.check("trepo_exact_advantages_unbiased", label, g.max_abs_diff(&truth), 1e-10);
    }
    Ok(report)
}

/// The `gamma^-(t-1)` reweighted response-level estimator at gamma = 0.5
/// matches Lemma 1 with unit outer weight.
fn gamma_remark(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gamma-remark", mutate);
    let gamma = 0.5;
    for (label, mdp) in small_mdps()? {
        for i in 0..5u64 {
            let policy = TabularPolicy::random(&mdp, seed + 40 + i, 1.0)?;
            let spec = random_spec(&mdp, seed + 60 + i, gamma)?;
            let target = exact_estimator_expectation(
                &ExactEstimator::LemmaOne { q_gamma: gamma, outer_gamma: 1.0 },
                &policy,
                &spec,
            )?;
            let reweighted =
                exact_estimator_expectation(&ExactEstimator::GammaReweighted, &policy, &maybe_mutate(&spec, mutate))?;
            report.check("reweighted_vs_lemma1", format!("{label}/case{i}"), reweighted.max_abs_diff(&target), 1e-10);
        }
    }
    Ok(report)
}

/// Zero-reward-projected actor-critic advantages with an exact critic give
/// the hidden-reward gradient.
fn main_theorem(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("main-theorem", mutate);
    let canonical = fixtures::canonical()?;
    let mut cases = vec![("canonical".to_string(), canonical.mdp.clone(), canonical.spec.clone())];
    let v3 = TokenMdp::new(3, 3, None)?;
    for i in 0..3u64 {
        cases.push((format!("v3t3/table{i}"), v3.clone(), random_spec(&v3, seed + 90 + i, 1.0)?));
    }
    for (label, mdp, spec) in cases {
        for (pi, policy) in [TabularPolicy::uniform(&mdp)?, TabularPolicy::random(&mdp, seed + 3, 1.0)?]
            .iter()
            .enumerate()
        {
            let truth = exact_policy_gradient(policy, &spec, 1.0)?;
            let ac = exact_estimator_expectation(
                &ExactEstimator::ActorCriticZeroReward { gamma: 1.0 },
                policy,
                &maybe_mutate(&spec, mutate),
            )?;
            report.check("zero_reward_actor_critic", format!("{label}/policy{pi}"), ac.max_abs_diff(&truth), 1e-10);
        }
    }
    Ok(report)
}

/// GAE at lambda = 1 is return minus value, at lambda = 0 the one-step TD
/// error, for arbitrary critics.
fn gae_endpoints(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gae-endpoints", mutate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (label, mdp) in small_mdps()? {
        let policy = TabularPolicy::uniform(&mdp)?;
        for draw in 0..10 {
            let values: HashMap<Vec<Token>, f64> = policy
                .index()
                .contexts()
                .iter()
                .map(|c| (c.tokens().to_vec(), rng.gen_range(-3.0..3.0)))
                .collect();
            let critic = CriticTable::from_values(values, CriticFitConfig::default());
            let gamma = [1.0, 0.8][draw % 2];
            let mut worst_mc: f64 = 0.0;
            let mut worst_td: f64 = 0.0;
            for w in mdp.enumerate_trajectories()? {
                let r: Vec<f64> = (0..w.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let one = gae_advantages(&w, &r, &critic, gamma, 1.0)?;
                let zero = gae_advantages(&w, &r, &critic, gamma, 0.0)?;
                for t in 0..w.len() {
                    let ret: f64 = r[t..].iter().enumerate().map(|(k, x)| gamma.powi(k as i32) * x).sum();
                    worst_mc = worst_mc.max((one.advantages()[t] - (ret - critic.value(&w[..t]))).abs());
                    let next = if t + 1 == w.len() { 0.0 } else { critic.value(&w[..t + 1]) };
                    let td = r[t] + gamma * next - critic.value(&w[..t]);
                    worst_td = worst_td.max((zero.advantages()[t] - td).abs());
                }
            }
            report.check("lambda1_return_minus_value", format!("{label}/critic{draw}"), worst_mc, 1e-12);
            report.check("lambda0_td_error", format!("{label}/critic{draw}"), worst_td, 1e-12);
        }
    }
    Ok(report)
}

/// Statistical unbiasedness of the response-weighted estimators on the
/// canonical fixture: 10^5 samples per seed, 5 seeds.
fn corollary1(seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("corollary1", mutate);
    let f = fixtures::canonical()?;
    let policy = TabularPolicy::uniform(&f.mdp)?;
    let truth = exact_policy_gradient(&policy, &f.spec, 1.0)?;
    let scored = maybe_mutate(&f.spec, mutate);
    let estimators = [
        ("reinforce", EstimatorConfig::new(EstimatorKind::Reinforce)),
        ("rloo-k2", EstimatorConfig::new(EstimatorKind::Rloo).with_group_size(2)),
        ("rloo-k4", EstimatorConfig::new(EstimatorKind::Rloo).with_group_size(4)),
        ("rloo-k8", EstimatorConfig::new(EstimatorKind::Rloo).with_group_size(8)),
        ("remax", EstimatorConfig::new(EstimatorKind::Remax)),
    ];
    for (label, cfg) in &estimators {
        let mut flagged = 0;
        let mut total = 0;
        let mut hard = 0;
        let mut worst: f64 = 0.0;
        for s in 0..5u64 {
            let stats = estimate_stats(cfg, &policy, &scored, 100_000, seed.wrapping_add(s))?;
            let r = unbiasedness_report(&stats, &truth, DEFAULT_Z_THRESHOLD, DEFAULT_ALLOWANCE)?;
            flagged += r.flagged.len();
            hard += r.hard_failures.len();
            total += r.z.len();
            worst = worst.max(r.max_abs_z());
            // informational: the pass criterion is the pooled flag fraction below
            report.flag("max_abs_z", format!("{label}/seed{}", seed.wrapping_add(s)), r.max_abs_z(), f64::INFINITY, true);
        }
        let fraction = flagged as f64 / total as f64;
        report.flag(
            "flagged_fraction",
            *label,
            fraction,
            DEFAULT_ALLOWANCE,
            hard == 0 && fraction <= DEFAULT_ALLOWANCE,
        );
    }
    Ok(report)
}
