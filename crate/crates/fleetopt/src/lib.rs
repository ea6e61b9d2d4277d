//! Blackboard-coordinated rightsizing and security recommender.
//!
//! The numerical pieces live in `fleetopt-core`; this crate adds the
//! persistent blackboard, file adapters, the two agents, proposal workflow,
//! the fleet simulator and the command line.

pub mod blackboard;
pub mod cli;
pub mod config;
pub mod observer;
pub mod rightsizing;
pub mod security;
pub mod timefmt;
pub mod workflow;
pub mod sim;
