//! Cost-aware VM placement and frequency scaling across geographically
//! distributed datacenters.
//!
//! The crate simulates a fleet of hosts over discrete time steps. At each
//! step a controller decides placements, migrations, suspensions and CPU
//! frequencies; the engine then applies them, checks the resulting state and
//! accounts for energy, electricity cost and service revenue.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod config;
pub mod controllers;
pub mod engine;
pub mod model;
pub mod power;
pub mod pricing;
pub mod report;
pub mod traces;

pub use config::SimulationConfig;
pub use controllers::ControllerKind;
pub use engine::{run_simulation, SimulationReport};
