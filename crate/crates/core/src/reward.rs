//! Response-level reward models. A model may be backed by hidden per-token
//! rewards whose discounted sum is the response score; those hidden rewards
//! are only reachable through a [`RewardSpec`] that has not been sealed.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::mdp::{format_tokens, parse_tokens, Token, TokenMdp, Trajectory, DEFAULT_ENUMERATION_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    HiddenTokenDecomposable,
    OutcomeBinary,
    PrefixScorable,
    Composite,
}

/// Hidden `r(state, token)` table; absent entries are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenRewardTable {
    rows: HashMap<Vec<Token>, Vec<f64>>,
}

impl TokenRewardTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, state: &[Token], token: Token, reward: f64) {
        let row = self.rows.entry(state.to_vec()).or_default();
        if row.len() <= token {
            row.resize(token + 1, 0.0);
        }
        row[token] = reward;
    }

    pub fn get(&self, state: &[Token], token: Token) -> f64 {
        self.rows
            .get(state)
            .and_then(|r| r.get(token))
            .copied()
            .unwrap_or(0.0)
    }

    /// Builds a table by evaluating `f` on every reachable `(state, token)`.
    pub fn from_fn(mdp: &TokenMdp, mut f: impl FnMut(&[Token], Token) -> f64) -> Result<Self> {
        let mut table = Self::new();
        for ctx in mdp.contexts(DEFAULT_ENUMERATION_BUDGET)? {
            for tok in 0..mdp.vocab_size() {
                let r = f(&ctx, tok);
                if r != 0.0 {
                    table.set(&ctx, tok, r);
                }
            }
        }
        Ok(table)
    }

    /// `value` for every occurrence of `token`, zero otherwise.
    pub fn count_token(mdp: &TokenMdp, token: Token, value: f64) -> Result<Self> {
        Self::from_fn(mdp, |_, t| if t == token { value } else { 0.0 })
    }

    /// Independent uniform rewards in `[low, high]` for every reachable step.
    pub fn random(mdp: &TokenMdp, seed: u64, low: f64, high: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(mdp, |_, _| rng.gen_range(low..=high))
    }

    /// Text form: `state<TAB>token<TAB>reward` per line, `#` comments,
    /// states as comma-separated token ids or `-` for the empty state.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |m: &str| Error::Parse(format!("reward table line {}: {m}", lineno + 1));
            if fields.len() != 3 {
                return Err(err("expected `state token reward`"));
            }
            let state = parse_tokens(fields[0])?;
            let token: Token = fields[1].parse().map_err(|_| err("bad token"))?;
            let reward: f64 = fields[2].parse().map_err(|_| err("bad reward"))?;
            table.set(&state, token, reward);
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.rows.keys().collect();
        keys.sort();
        let mut out = String::from("# state\ttoken\treward\n");
        for k in keys {
            for (tok, r) in self.rows[k].iter().enumerate() {
                if *r != 0.0 {
                    let _ = writeln!(out, "{}\t{tok}\t{r:?}", format_tokens(k));
                }
            }
        }
        out
    }
}

/// Scores for partial and full trajectories; absent entries are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrefixScores {
    scores: HashMap<Vec<Token>, f64>,
}

impl PrefixScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, prefix: &[Token], score: f64) {
        self.scores.insert(prefix.to_vec(), score);
    }

    pub fn get(&self, prefix: &[Token]) -> f64 {
        self.scores.get(prefix).copied().unwrap_or(0.0)
    }

    /// Text form: `prefix<TAB>score` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse(format!(
                    "prefix score line {}: expected `prefix score`",
                    lineno + 1
                )));
            }
            let score: f64 = fields[1]
                .parse()
                .map_err(|_| Error::Parse(format!("prefix score line {}: bad score", lineno + 1)))?;
            scores.set(&parse_tokens(fields[0])?, score);
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// `RM(W) = sum_t gamma^(t-1) r(W_{0,t-1}, w_t)`.
    HiddenToken { table: TokenRewardTable, gamma: f64 },
    /// 1 if the trajectory is one of the targets, else 0.
    OutcomeBinary { targets: Vec<Vec<Token>> },
    PrefixScorable(PrefixScores),
    /// Sum of component scores.
    Composite(Vec<RewardModel>),
    /// Negative control: adds `bonus` to the response score when the last
    /// token is 0, without touching the hidden token rewards.
    Corrupted { base: Box<RewardModel>, bonus: f64 },
}

impl RewardModel {
    fn rm(&self, tokens: &[Token]) -> f64 {
        match self {
            RewardModel::HiddenToken { table, gamma } => {
                let mut total = 0.0;
                let mut discount = 1.0;
                for i in 0..tokens.len() {
                    total += discount * table.get(&tokens[..i], tokens[i]);
                    discount *= gamma;
                }
                total
            }
            RewardModel::OutcomeBinary { targets } => {
                if targets.iter().any(|t| t.as_slice() == tokens) {
                    1.0
                } else {
                    0.0
                }
            }
            RewardModel::PrefixScorable(scores) => scores.get(tokens),
            RewardModel::Composite(parts) => parts.iter().map(|p| p.rm(tokens)).sum(),
            RewardModel::Corrupted { base, bonus } => {
                base.rm(tokens) + if tokens.last() == Some(&0) { *bonus } else { 0.0 }
            }
        }
    }

    /// (table, gamma) pairs if every contribution is token decomposable.
    fn hidden_parts(&self) -> Option<Vec<(&TokenRewardTable, f64)>> {
        match self {
            RewardModel::HiddenToken { table, gamma } => Some(vec![(table, *gamma)]),
            RewardModel::Composite(parts) => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.hidden_parts()?);
                }
                Some(out)
            }
            RewardModel::Corrupted { base, .. } => base.hidden_parts(),
            _ => None,
        }
    }

    fn common_gamma(&self) -> Option<f64> {
        let parts = self.hidden_parts()?;
        let first = parts.first()?.1;
        parts.iter().all(|(_, g)| *g == first).then_some(first)
    }

    fn prefix_score(&self, prefix: &[Token]) -> Result<f64> {
        match self {
            RewardModel::HiddenToken { .. } => Ok(self.rm(prefix)),
            RewardModel::PrefixScorable(scores) => Ok(scores.get(prefix)),
            RewardModel::Composite(parts) => parts.iter().map(|p| p.prefix_score(prefix)).sum(),
            RewardModel::Corrupted { base, .. } => base.prefix_score(prefix),
            RewardModel::OutcomeBinary { .. } => Err(Error::PrefixScoringUnavailable),
        }
    }
}

/// A reward model together with the access flag for its hidden rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    model: RewardModel,
    hidden_access: bool,
}

impl RewardSpec {
    pub fn new(model: RewardModel) -> Result<Self> {
        fn check(m: &RewardModel) -> Result<()> {
            match m {
                RewardModel::HiddenToken { gamma, .. } if !(*gamma > 0.0 && *gamma <= 1.0) => {
                    Err(invalid("gamma", format!("must lie in (0, 1], got {gamma}")))
                }
                RewardModel::Composite(parts) => parts.iter().try_for_each(check),
                RewardModel::Corrupted { base, .. } => check(base),
                _ => Ok(()),
            }
        }
        check(&model)?;
        Ok(Self {
            model,
            hidden_access: true,
        })
    }

    pub fn hidden(table: TokenRewardTable, gamma: f64) -> Result<Self> {
        Self::new(RewardModel::HiddenToken { table, gamma })
    }

    /// One reward unit per occurrence of `token`.
    pub fn count_token(mdp: &TokenMdp, token: Token, gamma: f64) -> Result<Self> {
        Self::hidden(TokenRewardTable::count_token(mdp, token, 1.0)?, gamma)
    }

    /// `RM(W) = c` for every trajectory, carried by the first step.
    pub fn constant(mdp: &TokenMdp, value: f64) -> Result<Self> {
        Self::hidden(
            TokenRewardTable::from_fn(mdp, |s, _| if s.is_empty() { value } else { 0.0 })?,
            1.0,
        )
    }

    pub fn outcome_binary(targets: Vec<Vec<Token>>) -> Result<Self> {
        Self::new(RewardModel::OutcomeBinary { targets })
    }

    pub fn composite(components: Vec<RewardSpec>) -> Result<Self> {
        Self::new(RewardModel::Composite(
            components.into_iter().map(|c| c.model).collect(),
        ))
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn kind(&self) -> RewardKind {
        match &self.model {
            RewardModel::HiddenToken { .. } => RewardKind::HiddenTokenDecomposable,
            RewardModel::OutcomeBinary { .. } => RewardKind::OutcomeBinary,
            RewardModel::PrefixScorable(_) => RewardKind::PrefixScorable,
            RewardModel::Composite(_) => RewardKind::Composite,
            RewardModel::Corrupted { base, .. } => Self {
                model: (**base).clone(),
                hidden_access: true,
            }
            .kind(),
        }
    }

    /// Discount of the hidden decomposition; 1 when there is none.
    pub fn gamma(&self) -> f64 {
        self.model.common_gamma().unwrap_or(1.0)
    }

    pub fn is_decomposable(&self) -> bool {
        self.model.common_gamma().is_some()
    }

    /// A copy whose hidden token rewards cannot be read.
    pub fn sealed(&self) -> Self {
        Self {
            model: self.model.clone(),
            hidden_access: false,
        }
    }

    pub fn is_sealed(&self) -> bool {
        !self.hidden_access
    }

    /// Negative-control copy whose response score no longer matches its
    /// hidden decomposition.
    pub fn corrupted(&self, bonus: f64) -> Self {
        Self {
            model: RewardModel::Corrupted {
                base: Box::new(self.model.clone()),
                bonus,
            },
            hidden_access: self.hidden_access,
        }
    }

    pub fn rm_response(&self, trajectory: &Trajectory) -> f64 {
        self.model.rm(trajectory)
    }

    /// Like [`rm_response`](Self::rm_response) for raw tokens, rejecting
    /// non-terminal input.
    pub fn rm_checked(&self, mdp: &TokenMdp, tokens: &[Token]) -> Result<f64> {
        mdp.validate(tokens)?;
        if !mdp.is_terminal(tokens) {
            return Err(Error::NotTerminal(tokens.to_vec()));
        }
        Ok(self.model.rm(tokens))
    }

    /// One hidden reward `r(W_{0,t-1}, w_t)`.
    pub fn step_reward(&self, state: &[Token], token: Token) -> Result<f64> {
        if !self.hidden_access {
            return Err(Error::HiddenRewardsUnavailable);
        }
        let parts = self.model.hidden_parts().ok_or(Error::HiddenRewardsUnavailable)?;
        if self.model.common_gamma().is_none() {
            return Err(Error::HiddenRewardsUnavailable);
        }
        Ok(parts.iter().map(|(t, _)| t.get(state, token)).sum())
    }

    /// Hidden per-step rewards along a trajectory.
    pub fn token_rewards(&self, trajectory: &Trajectory) -> Result<Vec<f64>> {
        trajectory
            .steps()
            .map(|(s, w)| self.step_reward(s, w))
            .collect()
    }

    /// Zero everywhere except the last step, which carries `RM(W)`.
    pub fn zero_reward_projection(&self, trajectory: &Trajectory) -> Vec<f64> {
        let mut out = vec![0.0; trajectory.len()];
        if let Some(last) = out.last_mut() {
            *last = self.rm_response(trajectory);
        }
        out
    }

    /// Score of a partial trajectory.
    pub fn rm_prefix(&self, prefix: &[Token]) -> Result<f64> {
        self.model.prefix_score(prefix)
    }

    /// Difference shaping: entry `t` is `RM(W_{0,t}) - RM(W_{0,t-1})`.
    pub fn r3hf_shape(&self, trajectory: &Trajectory) -> Result<Vec<f64>> {
        let mut prev = self.rm_prefix(&[])?;
        let mut out = Vec::with_capacity(trajectory.len());
        for t in 1..=trajectory.len() {
            let cur = self.rm_prefix(&trajectory[..t])?;
            out.push(cur - prev);
            prev = cur;
        }
        Ok(out)
    }
}

/// Per-step reward source for exact backward induction.
pub trait StepRewards {
    fn reward(&self, state: &[Token], token: Token) -> Result<f64>;
}

impl StepRewards for RewardSpec {
    fn reward(&self, state: &[Token], token: Token) -> Result<f64> {
        self.step_reward(state, token)
    }
}

/// Rewards under the Zero-Reward Assumption: the step that terminates the
/// trajectory receives `RM(W)`, every other step receives zero. Only the
/// response score is consulted.
pub struct ZeroRewardProjection<'a> {
    pub spec: &'a RewardSpec,
    pub mdp: &'a TokenMdp,
}

impl StepRewards for ZeroRewardProjection<'_> {
    fn reward(&self, state: &[Token], token: Token) -> Result<f64> {
        let mut next = state.to_vec();
        next.push(token);
        if self.mdp.is_terminal(&next) {
            self.spec.rm_checked(self.mdp, &next)
        } else {
            Ok(0.0)
        }
    }
}
