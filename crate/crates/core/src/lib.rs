//! Exact and statistical verification of response-level policy gradient
//! estimators on finite token MDPs with tabular softmax policies.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod fixtures;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod reward;
pub mod suites;
pub mod trepo;

pub use error::{Error, Result};
pub use mdp::{Prefix, Token, TokenMdp, Trajectory};
pub use policy::{GradientVector, TabularPolicy};
pub use reward::{RewardKind, RewardSpec};
pub use estimators::{EstimatorConfig, EstimatorKind};
pub use trepo::TrepoConfig;
