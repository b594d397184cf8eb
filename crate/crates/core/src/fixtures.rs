//! Named MDP and reward pairs baked into the binary.

use crate::error::{Error, Result};
use crate::mdp::{Token, TokenMdp};
use crate::reward::{RewardSpec, TokenRewardTable};

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub description: &'static str,
    pub mdp: TokenMdp,
    pub spec: RewardSpec,
}

pub const FIXTURE_NAMES: [&str; 6] = ["canonical", "v3t3", "trap", "target-match", "constant", "eos"];

/// Target of the target-match fixture.
pub const TARGET: [Token; 4] = [2, 0, 3, 1];

pub fn fixture(name: &str) -> Result<Fixture> {
    match name {
        "canonical" => canonical(),
        "v3t3" => v3t3(),
        "trap" => trap(),
        "target-match" => target_match(),
        "constant" => constant(),
        "eos" => eos(),
        other => Err(Error::UnknownFixture(other.to_string())),
    }
}

/// Two tokens, two steps, one point per `a` (token 0).
pub fn canonical() -> Result<Fixture> {
    let mdp = TokenMdp::new(2, 2, None)?.with_prompt("canonical");
    let spec = RewardSpec::count_token(&mdp, 0, 1.0)?;
    Ok(Fixture {
        name: "canonical",
        description: "vocab 2, T=2, reward = count of token 0",
        mdp,
        spec,
    })
}

/// Three tokens, three steps, hidden rewards drawn uniformly from [-1, 1].
pub fn v3t3() -> Result<Fixture> {
    let mdp = TokenMdp::new(3, 3, None)?.with_prompt("v3t3");
    let spec = RewardSpec::hidden(TokenRewardTable::random(&mdp, 33, -1.0, 1.0)?, 1.0)?;
    Ok(Fixture {
        name: "v3t3",
        description: "vocab 3, T=3, seeded random hidden token rewards",
        mdp,
        spec,
    })
}

/// The first token picks a good or a bad state. In the good state later
/// tokens earn up to 1 each, in the bad state at most 0.1, so the achievable
/// range depends on the first token while a global baseline straddles both.
pub fn trap() -> Result<Fixture> {
    let mdp = TokenMdp::new(2, 3, None)?.with_prompt("trap");
    let table = TokenRewardTable::from_fn(&mdp, |state, token| match (state.first(), token) {
        (None, 0) => 1.0,
        (None, _) => 0.0,
        (Some(0), 0) => 1.0,
        (Some(0), _) => 0.0,
        (Some(_), 0) => 0.1,
        (Some(_), _) => 0.0,
    })?;
    Ok(Fixture {
        name: "trap",
        description: "vocab 2, T=3, good/bad state chosen by the first token",
        mdp,
        spec: RewardSpec::hidden(table, 1.0)?,
    })
}

/// Reward 1 only for the single target trajectory.
pub fn target_match() -> Result<Fixture> {
    let mdp = TokenMdp::new(4, 4, None)?.with_prompt("target-match");
    Ok(Fixture {
        name: "target-match",
        description: "vocab 4, T=4, outcome reward 1 for the target sequence 2,0,3,1",
        mdp,
        spec: RewardSpec::outcome_binary(vec![TARGET.to_vec()])?,
    })
}

pub fn constant() -> Result<Fixture> {
    let mdp = TokenMdp::new(2, 2, None)?.with_prompt("constant");
    let spec = RewardSpec::constant(&mdp, 1.0)?;
    Ok(Fixture {
        name: "constant",
        description: "vocab 2, T=2, every trajectory scores 1",
        mdp,
        spec,
    })
}

/// Token 2 ends the response early.
pub fn eos() -> Result<Fixture> {
    let mdp = TokenMdp::new(3, 3, Some(2))?.with_prompt("eos");
    let spec = RewardSpec::count_token(&mdp, 0, 0.9)?;
    Ok(Fixture {
        name: "eos",
        description: "vocab 3, T=3, token 2 terminates, discounted count of token 0",
        mdp,
        spec,
    })
}
