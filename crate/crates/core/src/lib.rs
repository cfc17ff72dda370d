//! Safe exploration on lava-crossing gridworlds.
//!
//! The crate is organised bottom-up:
//!
//! * [`gridworld`] generates crossing layouts, simulates moves and labels states.
//! * [`solver`] computes exact optimal Q-tables by value iteration.
//! * [`priors`] aggregates task Q-tables into a prior Q-function.
//! * [`nn`] is a small dense-network toolkit with analytic gradients and Adam.
//! * [`latent`] trains the contrastive autoencoder over observations.
//! * [`shield`] gates the prior action check behind a latent distance test.
//! * [`agent`] holds the learners and the episode loop.
//! * [`harness`] wires everything into the command line tool.

pub mod agent;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod latent;
pub mod nn;
pub mod priors;
pub mod rng;
pub mod shield;
pub mod solver;

pub use error::{Error, Result};
pub use gridworld::{Action, AgentState, CellKind, Direction, GridSpec, Observation, SafetyLabel, Transition};
pub use solver::QFunction;
