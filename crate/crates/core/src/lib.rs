//! Simulation library for agents that optimize a credo: a convex mix of
//! their own reward, their team's mean reward and the population's mean
//! reward.
//!
//! Modules mirror the pipeline: [`credo`] defines reward mixing,
//! [`incentive`] evaluates the stage-game cooperation incentive in closed
//! form, [`ipd`] and [`cleanup`] are the two learning environments,
//! [`learners`] holds the agents, [`metrics`] the summaries, and [`runner`]
//! turns configs into CSV results.

pub mod cleanup;
pub mod credo;
pub mod error;
pub mod incentive;
pub mod ipd;
pub mod learners;
pub mod metrics;
pub mod runner;

pub use credo::{AgentId, CredoVector, TeamStructure};
pub use error::{Error, Result};
