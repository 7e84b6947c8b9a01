//! Time-stepped microscopic simulation of one intersection under a chosen
//! access method.

pub mod config;
pub mod policy;
pub mod safety;
pub mod world;

use thiserror::Error;

use crate::controller::ControllerError;
use crate::layout::LayoutError;
use crate::planner::PlanError;
use crate::protocol::ProtocolError;

pub use config::{default_negotiation_length, CarFollowing, Method, ScenarioConfig, SignalTiming, VehicleOverrides};
pub use safety::SafetyReport;
pub use world::{FailureCounts, LogEvent, LogKind, SimResult, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<ProtocolError> for SimError {
    fn from(e: ProtocolError) -> Self {
        SimError::Protocol(e.to_string())
    }
}

/// Runs one scenario to completion. Identical configs give identical results.
pub fn run(cfg: &ScenarioConfig) -> Result<SimResult, SimError> {
    World::new(cfg)?.run()
}
