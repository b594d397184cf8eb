//! Statistical certification: sampled-gradient statistics, z-test
//! unbiasedness reports, variance comparisons and training runs.
//!
//! Every sample index draws from its own ChaCha stream derived from the
//! master seed, and work is split into fixed-size chunks merged in order,
//! so results do not depend on the number of worker threads.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::estimators::{
    clipped_surrogate_gradient, normalize_advantages, EstimatorConfig, EstimatorKind, PreparedEstimator,
};
use crate::mdp::DEFAULT_ENUMERATION_BUDGET;
use crate::oracle::ExpectedRm;
use crate::policy::{GradientVector, TabularPolicy};
use crate::reward::RewardSpec;

pub const TAG_ESTIMATE: u64 = 0x6573_7469_6d61_7465;
pub const TAG_SETUP: u64 = 0x0073_6574_7570;
pub const TAG_TRAIN: u64 = 0x0074_7261_696e;

const CHUNK: usize = 256;

/// Independent stream for `(master, a, b, tag)`.
pub fn stream_rng(master: u64, a: u64, b: u64, tag: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (i, v) in [master, a, b, tag].into_iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateStats {
    pub mean: GradientVector,
    /// Standard error of the mean, per coordinate.
    pub standard_error: GradientVector,
    /// Sum over coordinates of the per-sample variance.
    pub total_variance: f64,
    pub sample_count: usize,
    pub mean_rm: f64,
}

impl EstimateStats {
    /// Total variance of the sample mean.
    pub fn variance_of_mean(&self) -> f64 {
        self.total_variance / self.sample_count as f64
    }
}

/// Running mean and centered second moment.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    rm_sum: f64,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            rm_sum: 0.0,
        }
    }

    fn push(&mut self, x: &[f64], rm: f64) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
        self.rm_sum += rm;
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.n += other.n;
        self.rm_sum += other.rm_sum;
    }
}

/// Statistics of `n_samples` independent estimates from `config` at a fixed
/// policy. Sample `i` uses stream `(master_seed, i, 0, TAG_ESTIMATE)`.
pub fn estimate_stats(
    config: &EstimatorConfig,
    policy: &TabularPolicy,
    spec: &RewardSpec,
    n_samples: usize,
    master_seed: u64,
) -> Result<EstimateStats> {
    if n_samples < 2 {
        return Err(invalid("n_samples", "need at least two samples"));
    }
    let mut setup = stream_rng(master_seed, u64::MAX, 0, TAG_SETUP);
    let prepared = PreparedEstimator::new(config, policy, spec, &mut setup)?;
    let dim = policy.param_count();
    let chunks: Vec<Moments> = (0..n_samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(dim);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let mut rng = stream_rng(master_seed, i as u64, 0, TAG_ESTIMATE);
                let e = prepared.estimate(&mut rng)?;
                m.push(e.gradient.values(), e.mean_rm);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(dim);
    for c in &chunks {
        total.merge(c);
    }
    let n = total.n as f64;
    let var: Vec<f64> = total.m2.iter().map(|s| s / (n - 1.0)).collect();
    Ok(EstimateStats {
        mean: GradientVector::from_vec(total.mean),
        standard_error: GradientVector::from_vec(var.iter().map(|v| (v / n).sqrt()).collect()),
        total_variance: var.iter().sum(),
        sample_count: total.n,
        mean_rm: total.rm_sum / n,
    })
}

/// [`estimate_stats`] with the estimator chosen by name.
pub fn estimate_stats_by_name(
    name: &str,
    base: &EstimatorConfig,
    policy: &TabularPolicy,
    spec: &RewardSpec,
    n_samples: usize,
    master_seed: u64,
) -> Result<EstimateStats> {
    let config = EstimatorConfig {
        kind: EstimatorKind::parse(name)?,
        ..base.clone()
    };
    estimate_stats(&config, policy, spec, n_samples, master_seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    pub z: Vec<f64>,
    /// Coordinates with `|z| > z_threshold`.
    pub flagged: Vec<usize>,
    /// Coordinates with zero standard error yet a nonzero deviation.
    pub hard_failures: Vec<usize>,
    pub z_threshold: f64,
    pub allowance: f64,
}

impl UnbiasednessReport {
    pub fn flagged_fraction(&self) -> f64 {
        if self.z.is_empty() {
            0.0
        } else {
            self.flagged.len() as f64 / self.z.len() as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.hard_failures.is_empty() && self.flagged_fraction() <= self.allowance
    }

    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;
pub const DEFAULT_ALLOWANCE: f64 = 0.01;

/// Deviations below this count as exact agreement when the standard error is
/// zero.
const ZERO_SE_TOLERANCE: f64 = 1e-12;

pub fn unbiasedness_report(
    stats: &EstimateStats,
    oracle: &GradientVector,
    z_threshold: f64,
    allowance: f64,
) -> Result<UnbiasednessReport> {
    if stats.mean.len() != oracle.len() {
        return Err(Error::DimensionMismatch {
            expected: oracle.len(),
            actual: stats.mean.len(),
        });
    }
    let mut z = Vec::with_capacity(oracle.len());
    let mut flagged = Vec::new();
    let mut hard_failures = Vec::new();
    for i in 0..oracle.len() {
        let dev = stats.mean[i] - oracle[i];
        let se = stats.standard_error[i];
        let zi = if se > 0.0 {
            dev / se
        } else if dev.abs() <= ZERO_SE_TOLERANCE {
            0.0
        } else {
            hard_failures.push(i);
            f64::INFINITY * dev.signum()
        };
        if zi.is_finite() && zi.abs() > z_threshold {
            flagged.push(i);
        }
        z.push(zi);
    }
    Ok(UnbiasednessReport {
        z,
        flagged,
        hard_failures,
        z_threshold,
        allowance,
    })
}

/// Merges several reports (for example one per seed) into one.
pub fn combine_reports(reports: &[UnbiasednessReport]) -> Option<UnbiasednessReport> {
    let first = reports.first()?;
    let mut out = UnbiasednessReport {
        z: Vec::new(),
        flagged: Vec::new(),
        hard_failures: Vec::new(),
        z_threshold: first.z_threshold,
        allowance: first.allowance,
    };
    for r in reports {
        let base = out.z.len();
        out.flagged.extend(r.flagged.iter().map(|i| i + base));
        out.hard_failures.extend(r.hard_failures.iter().map(|i| i + base));
        out.z.extend(&r.z);
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub estimator: String,
    pub seed: u64,
    pub total_variance: f64,
    pub per_coordinate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTable {
    pub rows: Vec<VarianceRow>,
}

impl VarianceTable {
    pub fn variance(&self, estimator: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.seed == seed)
            .map(|r| r.total_variance)
    }

    /// Estimator labels for one seed, lowest variance first.
    pub fn ordering(&self, seed: u64) -> Vec<String> {
        let mut rows: Vec<&VarianceRow> = self.rows.iter().filter(|r| r.seed == seed).collect();
        rows.sort_by(|a, b| a.total_variance.total_cmp(&b.total_variance));
        rows.into_iter().map(|r| r.estimator.clone()).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// Whether `lower` has strictly lower total variance than `higher` for
    /// every seed.
    pub fn strictly_lower(&self, lower: &str, higher: &str) -> bool {
        self.seeds().iter().all(|&s| match (self.variance(lower, s), self.variance(higher, s)) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        })
    }
}

/// Total gradient variance of each labelled estimator at a shared policy for
/// every seed.
pub fn variance_comparison(
    estimators: &[(String, EstimatorConfig)],
    policy: &TabularPolicy,
    spec: &RewardSpec,
    n_samples: usize,
    seeds: &[u64],
) -> Result<VarianceTable> {
    if estimators.len() < 2 {
        return Err(invalid("estimators", "a comparison needs at least two estimators"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for (label, cfg) in estimators {
            let stats = estimate_stats(cfg, policy, spec, n_samples, seed)?;
            let n = stats.sample_count as f64;
            rows.push(VarianceRow {
                estimator: label.clone(),
                seed,
                total_variance: stats.total_variance,
                per_coordinate: stats.standard_error.values().iter().map(|se| se * se * n).collect(),
            });
        }
    }
    Ok(VarianceTable { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub batch: usize,
    pub exact_j: Option<f64>,
    pub mean_rm: f64,
    pub gradient_norm: f64,
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub estimator: String,
    pub seed: u64,
    pub config_hash: String,
    rows: Vec<RunRow>,
}

pub const RUNLOG_HEADER: &str = "batch,exact_J,mean_RM,gradient_norm,wall_time";

impl RunLog {
    pub fn new(estimator: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            estimator: estimator.into(),
            seed,
            config_hash: config_hash.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: RunRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.batch <= last.batch {
                return Err(invalid(
                    "batch",
                    format!("row {} does not follow row {}", row.batch, last.batch),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn final_exact_j(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.exact_j)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# trepo-lab runlog v1 estimator={} seed={} config_hash={}\n{RUNLOG_HEADER}\n",
            self.estimator, self.seed, self.config_hash
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.batch,
                opt(r.exact_j),
                r.mean_rm,
                r.gradient_norm,
                opt(r.wall_time)
            );
        }
        s
    }
}

/// Settings of a training run that are not estimator hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batches: usize,
    pub seed: u64,
    /// Fill the wall_time column; off by default so logs stay byte-stable.
    pub record_wall_time: bool,
    pub enumeration_budget: u64,
    pub config_hash: Option<String>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batches: 200,
            seed: 0,
            record_wall_time: false,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
            config_hash: None,
        }
    }
}

pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn exact_j(policy: &TabularPolicy, spec: &RewardSpec, budget: u64) -> Result<Option<f64>> {
    if policy.mdp().trajectory_count() > budget as u128 {
        return Ok(None);
    }
    Ok(Some(ExpectedRm::new(policy, spec)?.get(&[])))
}

/// Trains from `initial` for `options.batches` batches. Each batch draws
/// `trepo.batch_size` trajectories from the frozen snapshot, in groups of
/// `group_size`. Surrogate kinds take `optimization_num` clipped-surrogate
/// ascent steps per batch; the others take one plain ascent step with the
/// averaged estimate. Exact J is logged after every batch when enumeration
/// fits in the budget.
pub fn convergence_run(
    config: &EstimatorConfig,
    spec: &RewardSpec,
    initial: &TabularPolicy,
    options: &TrainOptions,
) -> Result<(TabularPolicy, RunLog)> {
    config.validate()?;
    let hash = options
        .config_hash
        .clone()
        .unwrap_or_else(|| hash_text(&format!("{config:?}")));
    let mut log = RunLog::new(config.kind.name(), options.seed, hash);
    let trepo = &config.trepo;
    let units = trepo.batch_size.div_ceil(config.group_size).max(1);
    let mut policy = initial.clone();
    let started = Instant::now();
    for batch in 1..=options.batches {
        let old = policy.clone();
        let mut setup = stream_rng(options.seed, batch as u64, u64::MAX, TAG_SETUP);
        let prepared = PreparedEstimator::new(config, &old, spec, &mut setup)?.with_reference(initial);
        let (gradient_norm, mean_rm) = if config.kind.uses_surrogate() {
            let groups: Vec<_> = (0..units)
                .into_par_iter()
                .map(|u| prepared.profiles(&mut stream_rng(options.seed, batch as u64, u as u64, TAG_TRAIN)))
                .collect::<Result<_>>()?;
            let mut profiles: Vec<_> = groups.into_iter().flatten().collect();
            if config.normalize_advantages {
                normalize_advantages(&mut profiles);
            }
            let mean_rm = prepared.mean_rm(&profiles);
            let scale = 1.0 / profiles.len() as f64;
            let mut first_norm = 0.0;
            for step in 0..trepo.optimization_num {
                let mut g = GradientVector::zeros(policy.param_count());
                for p in &profiles {
                    g.add_scaled(&clipped_surrogate_gradient(&policy, &old, p, trepo.epsilon_clip)?, scale);
                }
                if step == 0 {
                    first_norm = g.norm();
                }
                policy = policy.apply_gradient_step(&g, trepo.learning_rate)?;
            }
            (first_norm, mean_rm)
        } else {
            let estimates: Vec<_> = (0..units)
                .into_par_iter()
                .map(|u| prepared.estimate(&mut stream_rng(options.seed, batch as u64, u as u64, TAG_TRAIN)))
                .collect::<Result<_>>()?;
            let scale = 1.0 / estimates.len() as f64;
            let mut g = GradientVector::zeros(policy.param_count());
            let mut rm = 0.0;
            for e in &estimates {
                g.add_scaled(&e.gradient, scale);
                rm += e.mean_rm * scale;
            }
            policy = policy.apply_gradient_step(&g, trepo.learning_rate)?;
            (g.norm(), rm)
        };
        log.push(RunRow {
            batch,
            exact_j: exact_j(&policy, spec, options.enumeration_budget)?,
            mean_rm,
            gradient_norm,
            wall_time: options.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        })?;
    }
    Ok((policy, log))
}
