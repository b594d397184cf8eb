//! Tabular softmax policy: one logit row per reachable non-terminal prefix.
//!
//! Parameters are stored row-major: the coordinate of `(row, token)` is
//! `row * vocab_size + token`, with rows in [`TokenMdp::contexts`] order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::{Index, IndexMut};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{format_tokens, parse_tokens, Prefix, Token, TokenMdp, Trajectory, DEFAULT_ENUMERATION_BUDGET};

/// Bijection between reachable non-terminal prefixes and policy rows.
#[derive(Debug)]
pub struct ContextIndex {
    mdp: TokenMdp,
    contexts: Vec<Prefix>,
    rows: HashMap<Vec<Token>, usize>,
}

impl ContextIndex {
    pub fn new(mdp: &TokenMdp, budget: u64) -> Result<Self> {
        let contexts = mdp.contexts(budget)?;
        let rows = contexts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.tokens().to_vec(), i))
            .collect();
        Ok(Self {
            mdp: mdp.clone(),
            contexts,
            rows,
        })
    }

    pub fn mdp(&self) -> &TokenMdp {
        &self.mdp
    }

    pub fn row(&self, prefix: &[Token]) -> Result<usize> {
        self.rows
            .get(prefix)
            .copied()
            .ok_or_else(|| Error::UnknownContext(prefix.to_vec()))
    }

    pub fn contexts(&self) -> &[Prefix] {
        &self.contexts
    }

    pub fn row_count(&self) -> usize {
        self.contexts.len()
    }

    pub fn param_count(&self) -> usize {
        self.contexts.len() * self.mdp.vocab_size()
    }

    /// `(row, token)` for a flat parameter coordinate.
    pub fn coordinate(&self, index: usize) -> (usize, Token) {
        let v = self.mdp.vocab_size();
        (index / v, index % v)
    }
}

/// Flat real vector aligned to the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradientVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.extend(logits.iter().map(|&l| ((l - max) / temperature).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
}

fn log_softmax_at(logits: &[f64], token: Token) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits[token] - lse
}

/// Lowest index among maximal entries.
fn argmax(values: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TabularPolicy {
    index: Arc<ContextIndex>,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(mdp: &TokenMdp) -> Result<Self> {
        Self::uniform_with_budget(mdp, DEFAULT_ENUMERATION_BUDGET)
    }

    pub fn uniform_with_budget(mdp: &TokenMdp, budget: u64) -> Result<Self> {
        let index = Arc::new(ContextIndex::new(mdp, budget)?);
        let logits = vec![0.0; index.param_count()];
        Ok(Self { index, logits })
    }

    /// Logits drawn uniformly from `[-scale, scale]` with a seeded generator.
    pub fn random(mdp: &TokenMdp, seed: u64, scale: f64) -> Result<Self> {
        let mut policy = Self::uniform(mdp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut policy.logits {
            *l = rng.gen_range(-scale..=scale);
        }
        Ok(policy)
    }

    pub fn from_logits(mdp: &TokenMdp, logits: Vec<f64>) -> Result<Self> {
        let policy = Self::uniform(mdp)?;
        policy.with_logits(logits)
    }

    /// Same context index, new parameters.
    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: logits.len(),
            });
        }
        Ok(Self {
            index: Arc::clone(&self.index),
            logits,
        })
    }

    pub fn mdp(&self) -> &TokenMdp {
        self.index.mdp()
    }

    pub fn index(&self) -> &ContextIndex {
        &self.index
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.index.mdp().vocab_size()
    }

    pub fn row(&self, prefix: &[Token]) -> Result<usize> {
        self.index.row(prefix)
    }

    pub fn row_logits(&self, row: usize) -> &[f64] {
        let v = self.vocab_size();
        &self.logits[row * v..(row + 1) * v]
    }

    pub fn row_logits_mut(&mut self, row: usize) -> &mut [f64] {
        let v = self.vocab_size();
        &mut self.logits[row * v..(row + 1) * v]
    }

    pub fn param_index(&self, row: usize, token: Token) -> usize {
        row * self.vocab_size() + token
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token >= self.vocab_size() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// `pi(. | prefix)` as a probability vector.
    pub fn probs(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        let row = self.row(prefix)?;
        let mut out = Vec::with_capacity(self.vocab_size());
        softmax_into(self.row_logits(row), 1.0, &mut out);
        Ok(out)
    }

    pub fn prob(&self, prefix: &[Token], token: Token) -> Result<f64> {
        Ok(self.log_prob(prefix, token)?.exp())
    }

    pub fn log_prob(&self, prefix: &[Token], token: Token) -> Result<f64> {
        self.check_token(token)?;
        let row = self.row(prefix)?;
        Ok(log_softmax_at(self.row_logits(row), token))
    }

    /// `grad += scale * d/dtheta log pi(token | prefix)`.
    pub fn accumulate_grad_log_prob(
        &self,
        grad: &mut GradientVector,
        prefix: &[Token],
        token: Token,
        scale: f64,
    ) -> Result<()> {
        self.check_token(token)?;
        if grad.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: grad.len(),
            });
        }
        let row = self.row(prefix)?;
        let mut probs = Vec::with_capacity(self.vocab_size());
        softmax_into(self.row_logits(row), 1.0, &mut probs);
        let base = row * self.vocab_size();
        for (k, p) in probs.iter().enumerate() {
            let indicator = if k == token { 1.0 } else { 0.0 };
            grad[base + k] += scale * (indicator - p);
        }
        Ok(())
    }

    /// Score function of one step; nonzero only in the prefix's row.
    pub fn grad_log_prob(&self, prefix: &[Token], token: Token) -> Result<GradientVector> {
        let mut g = GradientVector::zeros(self.param_count());
        self.accumulate_grad_log_prob(&mut g, prefix, token, 1.0)?;
        Ok(g)
    }

    /// Greedy (lowest-index argmax) at temperature 0, softmax(logits / tau)
    /// otherwise.
    pub fn sample_token<R: Rng + ?Sized>(
        &self,
        prefix: &[Token],
        temperature: f64,
        rng: &mut R,
    ) -> Result<Token> {
        let row = self.row(prefix)?;
        let logits = self.row_logits(row);
        if temperature <= 0.0 {
            return Ok(argmax(logits));
        }
        let mut probs = Vec::with_capacity(logits.len());
        softmax_into(logits, temperature, &mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(k);
            }
        }
        // u landed in the rounding gap above the cumulative sum
        Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
    }

    /// Samples a completion of `prefix` until the MDP terminates.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        prefix: &[Token],
        temperature: f64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mdp = self.mdp();
        mdp.validate(prefix)?;
        let mut tokens = prefix.to_vec();
        while !mdp.is_terminal(&tokens) {
            let tok = self.sample_token(&tokens, temperature, rng)?;
            tokens.push(tok);
        }
        Ok(Trajectory::from_tokens_unchecked(tokens))
    }

    /// The temperature-0 completion of the empty prefix.
    pub fn greedy_trajectory(&self) -> Result<Trajectory> {
        // rng is never consulted at temperature 0
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.sample_trajectory(&[], 0.0, &mut rng)
    }

    pub fn trajectory_log_prob(&self, trajectory: &[Token]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..trajectory.len() {
            total += self.log_prob(&trajectory[..i], trajectory[i])?;
        }
        Ok(total)
    }

    /// Sum of per-step score functions along a trajectory.
    pub fn trajectory_grad_log_prob(&self, trajectory: &[Token]) -> Result<GradientVector> {
        let mut g = GradientVector::zeros(self.param_count());
        for i in 0..trajectory.len() {
            self.accumulate_grad_log_prob(&mut g, &trajectory[..i], trajectory[i], 1.0)?;
        }
        Ok(g)
    }

    /// `logits + learning_rate * grad` as a new policy.
    pub fn apply_gradient_step(&self, grad: &GradientVector, learning_rate: f64) -> Result<Self> {
        if grad.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: grad.len(),
            });
        }
        let logits = self
            .logits
            .iter()
            .zip(grad.values())
            .map(|(l, g)| l + learning_rate * g)
            .collect();
        self.with_logits(logits)
    }

    /// Flat text snapshot: header comments, then one tab-separated line per
    /// row with the row index, the context tokens and the logits.
    pub fn to_snapshot(&self) -> String {
        let mdp = self.mdp();
        let mut out = String::new();
        out.push_str("# trepo-lab policy snapshot v1\n");
        let _ = writeln!(
            out,
            "# vocab_size={} horizon={} eos={} prompt={}",
            mdp.vocab_size(),
            mdp.horizon(),
            mdp.eos().map_or("-".to_string(), |e| e.to_string()),
            mdp.prompt()
        );
        for (row, ctx) in self.index.contexts().iter().enumerate() {
            let logits = self
                .row_logits(row)
                .iter()
                .map(|l| format!("{l:?}"))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(out, "{row}\t{}\t{logits}", format_tokens(ctx));
        }
        out
    }

    pub fn from_snapshot(mdp: &TokenMdp, text: &str) -> Result<Self> {
        let mut policy = Self::uniform(mdp)?;
        let mut seen = vec![false; policy.index.row_count()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse(format!("snapshot line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let row: usize = fields[0].parse().map_err(|e| err(format!("row index: {e}")))?;
            let ctx = parse_tokens(fields[1])?;
            if policy.row(&ctx)? != row {
                return Err(err(format!("context {} is not row {row}", fields[1])));
            }
            let logits: Vec<f64> = fields[2]
                .split(' ')
                .map(|s| s.parse::<f64>().map_err(|e| err(format!("logit `{s}`: {e}"))))
                .collect::<Result<_>>()?;
            if logits.len() != mdp.vocab_size() {
                return Err(err(format!("expected {} logits", mdp.vocab_size())));
            }
            policy.row_logits_mut(row).copy_from_slice(&logits);
            seen[row] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse(format!("snapshot is missing row {missing}")));
        }
        Ok(policy)
    }
}
