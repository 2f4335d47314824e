//! Demand-response mechanism lab.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod audit;
pub mod baseline_only;
pub mod bounds;
pub mod caiso;
pub mod dist;
pub mod domain;
pub mod error;
pub mod harness;
pub mod srbm;
pub mod srbm_ci;

pub use domain::{Agent, AgentId, EventResult, MarketParams, Pod, PodStructure, Pricing, Report, SimulationSummary};
pub use error::{MechError, Result};
