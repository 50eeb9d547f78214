//! Deterministic simulation of cooperative diagnosis of quality-requirement
//! violations in multiagent service chains.

pub mod behavior;
pub mod domain;
pub mod protocol;
pub mod sim;
pub mod stats;
