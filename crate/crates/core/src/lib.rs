//! Confidence-orchestrated self-evolution.
//!
//! A single policy plays four roles. The Proposer writes questions and the
//! Validator scores them; the Solver answers questions replayed from a buffer
//! and the Judge scores the answers. Validator and Judge confidence, taken
//! from the entropy of their token distributions, scales each PPO sample and
//! each question's replay priority. Only the Proposer and Solver are ever
//! optimized.
//!
//! The crate runs this loop end to end against [`world`], a seedable
//! synthetic environment whose Validator/Judge error rate is coupled to the
//! entropy of their emissions.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod confidence;
pub mod credit;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod orchestrator;
pub mod ppo;
pub mod replay;
pub mod rng;
pub mod world;

pub use error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Proposer,
    Validator,
    Solver,
    Judge,
}

impl Role {
    /// Roles whose trajectories receive a policy-gradient loss.
    pub fn is_optimized(self) -> bool {
        matches!(self, Role::Proposer | Role::Solver)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Proposer => "proposer",
            Role::Validator => "validator",
            Role::Solver => "solver",
            Role::Judge => "judge",
        })
    }
}
