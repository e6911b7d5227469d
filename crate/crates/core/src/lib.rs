//! Simulation of a three-pool lending protocol and a deep Q-learning agent
//! that governs its collateral factors.

pub mod agent;
pub mod checkpoint;
pub mod env;
pub mod harness;
pub mod market;
pub mod plot;
pub mod protocol;
pub mod user;
