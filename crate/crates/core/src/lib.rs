//! Dual reinforcement-learning toolkit for adaptive time-pressure feedback
//! on a modular-arithmetic judgement task.
//!
//! A simulation agent learns how time pressure changes a user's response
//! time; a regulation agent then learns when to switch pressure on, first
//! against the simulation and later against real or synthetic users.

pub mod answer_agent;
pub mod baseline;
pub mod checkpoint;
mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod regulation_env;
pub mod regulation_agent;
pub mod sim_env;
pub mod simulation;
pub mod stimulus;
pub mod synthetic_user;
pub mod task;

pub use error::{Error, Result};
