//! Finite token MDP: states are token prefixes following a fixed prompt
//! symbol, actions are tokens, and transitions append deterministically.

use std::fmt;
use std::ops::Deref;

use crate::error::{Error, Result};

/// Token index in `0..vocab_size`.
pub type Token = usize;

/// Default cap on the number of trajectories an enumeration may visit.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenMdp {
    vocab_size: usize,
    prompt: String,
    horizon: usize,
    eos: Option<Token>,
}

impl TokenMdp {
    pub fn new(vocab_size: usize, horizon: usize, eos: Option<Token>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidMdp(format!(
                "vocab_size must be at least 2, got {vocab_size}"
            )));
        }
        if horizon < 1 {
            return Err(Error::InvalidMdp("horizon must be at least 1".into()));
        }
        if let Some(e) = eos {
            if e >= vocab_size {
                return Err(Error::InvalidMdp(format!(
                    "eos token {e} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(Self {
            vocab_size,
            prompt: "w0".to_string(),
            horizon,
            eos,
        })
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt = prompt.into();
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn eos(&self) -> Option<Token> {
        self.eos
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    /// True iff the token sequence has reached the horizon or ends with eos.
    pub fn is_terminal(&self, tokens: &[Token]) -> bool {
        tokens.len() >= self.horizon
            || matches!((self.eos, tokens.last()), (Some(e), Some(&last)) if e == last)
    }

    /// Checks that `tokens` is a reachable prefix: in-vocabulary, within the
    /// horizon, with eos only in final position.
    pub fn validate(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.horizon {
            return Err(Error::InvalidMdp(format!(
                "sequence of length {} exceeds horizon {}",
                tokens.len(),
                self.horizon
            )));
        }
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    vocab_size: self.vocab_size,
                });
            }
            if Some(tok) == self.eos && i + 1 != tokens.len() {
                return Err(Error::InvalidMdp(format!(
                    "eos appears before the end of {tokens:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn prefix(&self, tokens: Vec<Token>) -> Result<Prefix> {
        self.validate(&tokens)?;
        Ok(Prefix(tokens))
    }

    pub fn trajectory(&self, tokens: Vec<Token>) -> Result<Trajectory> {
        self.validate(&tokens)?;
        if !self.is_terminal(&tokens) {
            return Err(Error::NotTerminal(tokens));
        }
        Ok(Trajectory(tokens))
    }

    /// Appends `token` to a non-terminal prefix.
    pub fn extend(&self, prefix: &Prefix, token: Token) -> Result<Prefix> {
        if self.is_terminal(prefix) {
            return Err(Error::TerminalPrefix {
                prefix: prefix.0.clone(),
            });
        }
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size,
            });
        }
        let mut tokens = prefix.0.clone();
        tokens.push(token);
        Ok(Prefix(tokens))
    }

    /// `vocab_size^horizon`, the size of the no-eos trajectory space and an
    /// upper bound otherwise. Saturates at `u128::MAX`.
    pub fn trajectory_bound(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.horizon {
            n = n.saturating_mul(self.vocab_size as u128);
        }
        n
    }

    /// Closed-form size of the trajectory space.
    pub fn trajectory_count(&self) -> u128 {
        match self.eos {
            None => self.trajectory_bound(),
            Some(_) => {
                let branch = (self.vocab_size - 1) as u128;
                let mut count: u128 = 0;
                let mut non_eos_paths: u128 = 1;
                for _ in 1..self.horizon {
                    // an eos appended to any non-eos path of this length
                    count = count.saturating_add(non_eos_paths);
                    non_eos_paths = non_eos_paths.saturating_mul(branch);
                }
                count.saturating_add(non_eos_paths.saturating_mul(self.vocab_size as u128))
            }
        }
    }

    fn check_budget(&self, budget: u64) -> Result<()> {
        let required = self.trajectory_bound();
        if required > budget as u128 {
            return Err(Error::BudgetExceeded { required, budget });
        }
        Ok(())
    }

    /// Lexicographic iterator over every terminal trajectory.
    pub fn trajectories(&self, budget: u64) -> Result<Trajectories<'_>> {
        self.check_budget(budget)?;
        Ok(Trajectories {
            mdp: self,
            current: Vec::with_capacity(self.horizon),
            started: false,
            done: false,
        })
    }

    pub fn enumerate_trajectories(&self) -> Result<Vec<Trajectory>> {
        Ok(self.trajectories(DEFAULT_ENUMERATION_BUDGET)?.collect())
    }

    /// Every reachable non-terminal prefix, ordered by length and then
    /// lexicographically. This is the row order of a tabular policy.
    pub fn contexts(&self, budget: u64) -> Result<Vec<Prefix>> {
        self.check_budget(budget)?;
        let mut out = vec![Prefix::empty()];
        let mut frontier = vec![Vec::new()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for p in &frontier {
                for tok in 0..self.vocab_size {
                    let mut child: Vec<Token> = p.clone();
                    child.push(tok);
                    if !self.is_terminal(&child) {
                        next.push(child);
                    }
                }
            }
            out.extend(next.iter().cloned().map(Prefix));
            frontier = next;
        }
        Ok(out)
    }
}

/// Partial output following the prompt symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Prefix(Vec<Token>);

impl Prefix {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.0
    }
}

impl Deref for Prefix {
    type Target = [Token];
    fn deref(&self) -> &[Token] {
        &self.0
    }
}

/// A complete (terminal) output sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trajectory(Vec<Token>);

impl Trajectory {
    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    /// Always true: trajectories are constructed terminal.
    pub fn terminal(&self) -> bool {
        true
    }

    /// The state `W_{0,t-1}` before emitting step `t` (1-based).
    pub fn state_before(&self, t: usize) -> &[Token] {
        &self.0[..t - 1]
    }

    pub fn as_prefix(&self) -> Prefix {
        Prefix(self.0.clone())
    }

    /// `(state, token)` pairs in generation order.
    pub fn steps(&self) -> impl Iterator<Item = (&[Token], Token)> + '_ {
        (0..self.0.len()).map(move |i| (&self.0[..i], self.0[i]))
    }

    pub(crate) fn from_tokens_unchecked(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }
}

impl Deref for Trajectory {
    type Target = [Token];
    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_tokens(&self.0))
    }
}

/// Comma-separated token ids, `-` for the empty sequence.
pub fn format_tokens(tokens: &[Token]) -> String {
    if tokens.is_empty() {
        "-".to_string()
    } else {
        tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    let s = s.trim();
    if s == "-" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<Token>()
                .map_err(|e| Error::Parse(format!("bad token `{p}`: {e}")))
        })
        .collect()
}

pub struct Trajectories<'a> {
    mdp: &'a TokenMdp,
    current: Vec<Token>,
    started: bool,
    done: bool,
}

impl Trajectories<'_> {
    fn descend(&mut self) {
        while !self.mdp.is_terminal(&self.current) {
            self.current.push(0);
        }
    }
}

impl Iterator for Trajectories<'_> {
    type Item = Trajectory;

    fn next(&mut self) -> Option<Trajectory> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            self.descend();
            return Some(Trajectory(self.current.clone()));
        }
        let last_token = self.mdp.vocab_size - 1;
        while self.current.last() == Some(&last_token) {
            self.current.pop();
        }
        match self.current.last_mut() {
            None => {
                self.done = true;
                None
            }
            Some(tok) => {
                *tok += 1;
                self.descend();
                Some(Trajectory(self.current.clone()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(t: &Trajectory) -> Vec<Token> {
        t.tokens().to_vec()
    }

    #[test]
    fn extend_appends() {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let p = mdp.extend(&Prefix::empty(), 0).unwrap();
        assert_eq!(p.tokens(), &[0]);
        let p2 = mdp.extend(&p, 1).unwrap();
        assert_eq!(p2.tokens(), &[0, 1]);
        assert_eq!(p.tokens(), &[0]);
    }

    #[test]
    fn extend_terminal_is_error() {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let p = mdp.prefix(vec![0, 1]).unwrap();
        assert!(matches!(
            mdp.extend(&p, 0),
            Err(Error::TerminalPrefix { .. })
        ));
        assert!(matches!(
            mdp.extend(&Prefix::empty(), 2),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn terminal_rule() {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        assert!(!mdp.is_terminal(&[0]));
        assert!(mdp.is_terminal(&[0, 1]));
        let eos = TokenMdp::new(2, 2, Some(1)).unwrap();
        assert!(eos.is_terminal(&[1]));
        assert!(!eos.is_terminal(&[]));
    }

    #[test]
    fn invalid_mdps() {
        assert!(TokenMdp::new(1, 2, None).is_err());
        assert!(TokenMdp::new(2, 0, None).is_err());
        assert!(TokenMdp::new(2, 2, Some(2)).is_err());
    }

    #[test]
    fn enumerates_small_spaces() {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let all: Vec<_> = mdp.enumerate_trajectories().unwrap().iter().map(toks).collect();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);

        let mdp = TokenMdp::new(3, 1, None).unwrap();
        let all: Vec<_> = mdp.enumerate_trajectories().unwrap().iter().map(toks).collect();
        assert_eq!(all, vec![vec![0], vec![1], vec![2]]);

        // vocab {a, e}, eos = e: aa, ae, e
        let mdp = TokenMdp::new(2, 2, Some(1)).unwrap();
        let all: Vec<_> = mdp.enumerate_trajectories().unwrap().iter().map(toks).collect();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![1]]);
    }

    #[test]
    fn budget_refusal_names_budget() {
        let mdp = TokenMdp::new(10, 8, None).unwrap();
        let err = mdp.trajectories(1000).err().unwrap();
        assert_eq!(
            err,
            Error::BudgetExceeded {
                required: 100_000_000,
                budget: 1000
            }
        );
        assert!(err.to_string().contains("1000"));
    }

    #[test]
    fn contexts_in_row_order() {
        let mdp = TokenMdp::new(2, 2, None).unwrap();
        let ctx: Vec<Vec<Token>> = mdp
            .contexts(DEFAULT_ENUMERATION_BUDGET)
            .unwrap()
            .into_iter()
            .map(Prefix::into_tokens)
            .collect();
        assert_eq!(ctx, vec![vec![], vec![0], vec![1]]);

        let eos = TokenMdp::new(3, 3, Some(2)).unwrap();
        let ctx = eos.contexts(DEFAULT_ENUMERATION_BUDGET).unwrap();
        // 1 + 2 + 4 non-terminal prefixes
        assert_eq!(ctx.len(), 7);
        assert!(ctx.iter().all(|p| !eos.is_terminal(p)));
    }

    #[test]
    fn closed_form_counts() {
        for (v, t, eos) in [(2, 2, None), (3, 3, None), (2, 3, Some(1)), (4, 4, Some(0)), (3, 1, Some(2))] {
            let mdp = TokenMdp::new(v, t, eos).unwrap();
            let n = mdp.enumerate_trajectories().unwrap().len() as u128;
            assert_eq!(n, mdp.trajectory_count(), "v={v} t={t} eos={eos:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::HashSet;

        proptest! {
            #[test]
            fn enumeration_is_a_sorted_bijection(v in 2usize..5, t in 1usize..5, eos in proptest::option::of(0usize..5)) {
                let eos = eos.filter(|&e| e < v);
                let mdp = TokenMdp::new(v, t, eos).unwrap();
                let all = mdp.enumerate_trajectories().unwrap();
                prop_assert_eq!(all.len() as u128, mdp.trajectory_count());
                let set: HashSet<_> = all.iter().cloned().collect();
                prop_assert_eq!(set.len(), all.len());
                prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
                for tr in &all {
                    prop_assert!(mdp.validate(tr).is_ok());
                    prop_assert!(mdp.is_terminal(tr));
                }
                // a prefix is reachable iff it prefixes some enumerated trajectory
                for ctx in mdp.contexts(DEFAULT_ENUMERATION_BUDGET).unwrap() {
                    prop_assert!(all.iter().any(|tr| tr.starts_with(&ctx)));
                }
                if eos.is_none() {
                    prop_assert_eq!(all.len() as u128, (v as u128).pow(t as u32));
                }
            }
        }
    }
}
