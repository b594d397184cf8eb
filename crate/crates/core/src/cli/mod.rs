//! Command-line front end.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{invalid, Error, Result};
use crate::estimators::EstimatorKind;
use crate::fixtures::{fixture, FIXTURE_NAMES};
use crate::mdp::format_tokens;
use crate::harness::{
    convergence_run, estimate_stats, hash_text, unbiasedness_report, VarianceRow, VarianceTable,
};
use crate::oracle::{exact_estimator_expectation, ExactEstimator};
use crate::suites::{run_suite, SUITE_NAMES};

pub use config::{Experiment, ExperimentConfig, Mode};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TREPO_LAB_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "trepo-runs";

#[derive(Debug, Parser)]
#[command(name = "trepo-lab", version, about = "Policy gradient estimators on finite token MDPs, checked against exact enumeration")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory; defaults to a subdirectory of $TREPO_LAB_OUT_ROOT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a named verification suite ("all" runs every suite).
    Verify {
        #[arg(long)]
        suite: String,
        /// Corrupt the response score (negative-control self-test).
        #[arg(long)]
        mutate: bool,
    },
    /// Run the training or estimation job described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Fill the wall_time column of run logs.
        #[arg(long)]
        wall_time: bool,
    },
    /// Compare estimators on the config's fixture.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated estimator names.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        estimators: Vec<String>,
        #[arg(long)]
        wall_time: bool,
    },
    /// List fixtures, suites and estimators.
    List,
}

/// Whether every check of a command passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| invalid("jobs", e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Verify { suite, mutate } => cmd_verify(suite, cli.seed.unwrap_or(0), *mutate, cli.out.as_deref()),
        Command::Run { config, wall_time } => cmd_run(config, cli.seed, *wall_time, cli.out.as_deref()),
        Command::Compare {
            config,
            estimators,
            wall_time,
        } => cmd_compare(config, estimators, cli.seed, *wall_time, cli.out.as_deref()),
        Command::List => {
            println!("fixtures:");
            for name in FIXTURE_NAMES {
                println!("  {name:<14} {}", fixture(name)?.description);
            }
            println!("suites: {}", SUITE_NAMES.join(", "));
            let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
            println!("estimators: {}", names.join(", "));
            Ok(Outcome::Pass)
        }
    })
}

fn out_dir(explicit: Option<&Path>, configured: Option<&str>, label: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = configured {
        return PathBuf::from(p);
    }
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| DEFAULT_OUT_ROOT.to_string());
    Path::new(&root).join(label)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

pub fn cmd_verify(suite: &str, seed: u64, mutate: bool, out: Option<&Path>) -> Result<Outcome> {
    let names: Vec<&str> = if suite == "all" {
        SUITE_NAMES.to_vec()
    } else if SUITE_NAMES.contains(&suite) {
        vec![suite]
    } else {
        return Err(Error::UnknownSuite(suite.to_string()));
    };
    let dir = out_dir(out, None, &format!("verify-{suite}"));
    let mut summary = String::new();
    let mut all_passed = true;
    for name in names {
        let report = run_suite(name, seed, mutate)?;
        write(&dir, &format!("verify_{name}.csv"), &report.to_csv())?;
        println!("{}", report.summary());
        let _ = writeln!(summary, "{}", report.summary());
        all_passed &= report.passed();
    }
    write(&dir, "summary.txt", &summary)?;
    Ok(if all_passed { Outcome::Pass } else { Outcome::Fail })
}

/// Reads and resolves a config, applying the seed override; returns the
/// experiment with its normalized text and hash.
fn load_config(path: &Path, seed: Option<u64>) -> Result<(Experiment, String, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut parsed = ExperimentConfig::parse(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        parsed.seed = s;
    }
    let normalized = parsed.to_toml()?;
    let hash = hash_text(&normalized);
    Ok((parsed.resolve()?, normalized, hash))
}

fn config_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

pub fn cmd_run(path: &Path, seed: Option<u64>, wall_time: bool, out: Option<&Path>) -> Result<Outcome> {
    let (exp, normalized, hash) = load_config(path, seed)?;
    let dir = out_dir(out, exp.config.out_dir.as_deref(), &config_label(path));
    write(&dir, "config.toml", &normalized)?;
    write(&dir, "config.hash", &format!("{hash}\n"))?;
    let seed = exp.config.seed;
    match exp.config.mode {
        Mode::Train => {
            let mut options = exp.train_options(seed, hash);
            options.record_wall_time |= wall_time;
            let (policy, log) = convergence_run(&exp.estimator, &exp.spec, &exp.policy, &options)?;
            write(&dir, "runlog.csv", &log.to_csv())?;
            write(&dir, "policy.snapshot", &policy.to_snapshot())?;
            let final_j = log
                .final_exact_j()
                .map(|j| j.to_string())
                .unwrap_or_else(|| "unavailable".to_string());
            let summary = format!(
                "fixture {} estimator {} seed {} batches {}\nfinal exact J {}\n",
                exp.fixture_name,
                exp.estimator.kind.name(),
                seed,
                log.rows().len(),
                final_j
            );
            print!("{summary}");
            write(&dir, "summary.txt", &summary)?;
            Ok(Outcome::Pass)
        }
        Mode::Estimate => {
            let h = &exp.config.harness;
            // Theorem 1 form: valid for any response score
            let oracle = exact_estimator_expectation(&ExactEstimator::TheoremOne, &exp.policy, &exp.spec)?;
            let mut csv = String::from("seed,coordinate,context,token,mean,standard_error,oracle,z\n");
            let mut summary = String::new();
            let mut passed = true;
            for &s in &h.seeds {
                let stats = estimate_stats(&exp.estimator, &exp.policy, &exp.spec, h.n_samples, s)?;
                let report = unbiasedness_report(&stats, &oracle, h.z_threshold, h.allowance)?;
                for i in 0..oracle.len() {
                    let (row, token) = exp.policy.index().coordinate(i);
                    let ctx = format_tokens(exp.policy.index().contexts()[row].tokens());
                    let _ = writeln!(
                        csv,
                        "{s},{i},{ctx},{token},{},{},{},{}",
                        stats.mean[i], stats.standard_error[i], oracle[i], report.z[i]
                    );
                }
                let _ = writeln!(
                    summary,
                    "seed {s}: {} (flagged {}/{}, max |z| {:.3}, total variance {})",
                    if report.passed() { "PASS" } else { "FAIL" },
                    report.flagged.len(),
                    report.z.len(),
                    report.max_abs_z(),
                    stats.total_variance
                );
                passed &= report.passed();
            }
            write(&dir, "estimate.csv", &csv)?;
            print!("{summary}");
            write(&dir, "summary.txt", &summary)?;
            Ok(if passed { Outcome::Pass } else { Outcome::Fail })
        }
    }
}

/// Group size shared by every compared estimator when the config leaves it
/// unset; equal trajectory budgets per estimate.
const COMPARE_GROUP_SIZE: usize = 4;

pub const COMPARE_HEADER: &str = "estimator,seed,metric,value,rank";

pub fn cmd_compare(
    path: &Path,
    estimators: &[String],
    seed: Option<u64>,
    wall_time: bool,
    out: Option<&Path>,
) -> Result<Outcome> {
    if estimators.is_empty() {
        return Err(invalid("estimators", "the estimator list is empty"));
    }
    let (exp, normalized, hash) = load_config(path, seed)?;
    let dir = out_dir(out, exp.config.out_dir.as_deref(), &format!("compare-{}", config_label(path)));
    write(&dir, "config.toml", &normalized)?;
    write(&dir, "config.hash", &format!("{hash}\n"))?;
    let h = &exp.config.harness;
    let mut configs = Vec::new();
    for name in estimators {
        let kind = EstimatorKind::parse(name)?;
        let mut cfg = exp.config.estimator_config(kind)?;
        cfg.group_size = exp.config.estimator.group_size.unwrap_or(COMPARE_GROUP_SIZE);
        cfg.validate()?;
        configs.push((name.clone(), cfg));
    }
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => h.seeds.clone(),
    };
    let mut table = VarianceTable { rows: Vec::new() };
    let mut final_j: Vec<(String, u64, Option<f64>)> = Vec::new();
    for &s in &seeds {
        for (label, cfg) in &configs {
            let stats = estimate_stats(cfg, &exp.policy, &exp.spec, h.n_samples.max(2), s)?;
            let n = stats.sample_count as f64;
            table.rows.push(VarianceRow {
                estimator: label.clone(),
                seed: s,
                total_variance: stats.total_variance,
                per_coordinate: stats.standard_error.values().iter().map(|se| se * se * n).collect(),
            });
            if h.batches > 0 {
                let mut options = exp.train_options(s, hash.clone());
                options.record_wall_time |= wall_time;
                let (_, log) = convergence_run(cfg, &exp.spec, &exp.policy, &options)?;
                write(&dir, &format!("runlog_{label}_seed{s}.csv"), &log.to_csv())?;
                final_j.push((label.clone(), s, log.final_exact_j()));
            }
        }
    }
    let mut csv = format!("{COMPARE_HEADER}\n");
    let mut outcome = Outcome::Pass;
    for &s in &seeds {
        let order = table.ordering(s);
        for row in table.rows.iter().filter(|r| r.seed == s) {
            let rank = order.iter().position(|e| *e == row.estimator).unwrap_or(0) + 1;
            let _ = writeln!(csv, "{},{s},total_variance,{},{rank}", row.estimator, row.total_variance);
            for (i, v) in row.per_coordinate.iter().enumerate() {
                let _ = writeln!(csv, "{},{s},variance_coord{i},{v},", row.estimator);
            }
        }
        let _ = writeln!(csv, "ordering,{s},variance_order,{},", order.join("<"));
        for (label, _, j) in final_j.iter().filter(|(_, fs, _)| *fs == s) {
            let v = j.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{label},{s},final_exact_J,{v},");
        }
        if exp.fixture_name == "trap" {
            let trepo = ["trepo-exact", "trepo"].into_iter().find(|t| estimators.iter().any(|e| e == t));
            if let (Some(t), true) = (trepo, estimators.iter().any(|e| e == "grpo")) {
                let ok = matches!((table.variance(t, s), table.variance("grpo", s)), (Some(a), Some(b)) if a < b);
                let _ = writeln!(csv, "assert,{s},{t}<grpo,{},", if ok { "PASS" } else { "FAIL" });
                if !ok {
                    outcome = Outcome::Fail;
                }
            }
        }
    }
    write(&dir, "compare.csv", &csv)?;
    let summary = format!(
        "fixture {} estimators {} seeds {:?}: {}\n",
        exp.fixture_name,
        estimators.join(","),
        seeds,
        if outcome == Outcome::Pass { "PASS" } else { "FAIL" }
    );
    print!("{summary}");
    write(&dir, "summary.txt", &summary)?;
    Ok(outcome)
}
