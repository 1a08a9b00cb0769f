//! Confidence weights and cross-role rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::learnability;
use crate::Role;

pub const WEIGHT_FLOOR: f64 = 0.1;
pub const WEIGHT_CEILING: f64 = 1.0;

/// Per-sample multiplier on the surrogate loss, always in `[0.1, 1.0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateWeight {
    pub value: f64,
    pub role: Role,
}

impl UpdateWeight {
    /// Weight 1.0, used when confidence weighting is ablated away.
    pub fn unit(role: Role) -> Self {
        Self { value: 1.0, role }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub value: f64,
    pub role: Role,
    pub format_ok: bool,
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} = {x} outside [0, 1]")))
    }
}

fn clip_weight(x: f64) -> f64 {
    x.clamp(WEIGHT_FLOOR, WEIGHT_CEILING)
}

pub fn proposer_weight(v: f64, c_v: f64) -> Result<UpdateWeight> {
    check_unit("v", v)?;
    check_unit("c_v", c_v)?;
    Ok(UpdateWeight {
        value: clip_weight(v * c_v),
        role: Role::Proposer,
    })
}

pub fn solver_weight(v: f64, c_v: f64, c_j: f64) -> Result<UpdateWeight> {
    check_unit("v", v)?;
    check_unit("c_v", c_v)?;
    check_unit("c_j", c_j)?;
    Ok(UpdateWeight {
        value: clip_weight(v * c_v * c_j),
        role: Role::Solver,
    })
}

pub fn solver_reward(format_ok: bool, p_qa: f64) -> Result<RewardRecord> {
    check_unit("p_qa", p_qa)?;
    Ok(RewardRecord {
        value: if format_ok { p_qa } else { 0.0 },
        role: Role::Solver,
        format_ok,
    })
}

pub fn proposer_reward(format_ok: bool, v: f64, p_q: f64) -> Result<RewardRecord> {
    check_unit("v", v)?;
    check_unit("p_q", p_q)?;
    Ok(RewardRecord {
        value: if format_ok {
            (v + learnability(p_q)) / 2.0
        } else {
            0.0
        },
        role: Role::Proposer,
        format_ok,
    })
}
