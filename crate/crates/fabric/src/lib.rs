//! Runtime side of the quantum network fabric: scenario files, the REST
//! control surface, switch control connections over TCP, a socket data
//! plane for live runs and ledger export. The model itself lives in
//! `qfabric-core`.

pub mod api;
pub mod config;
pub mod control;
pub mod ledger;
pub mod live;
pub mod node;
pub mod service;

use qfabric_core::scenario::{run_scenario, run_scenario_with, RunReport, Scenario, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("live transport: {0}")]
    Io(#[from] std::io::Error),
}

/// Runs a scenario in memory, or with data frames over loopback TCP.
pub fn run(scenario: &Scenario, live: bool) -> Result<RunReport, RunError> {
    if !live {
        return Ok(run_scenario(scenario)?);
    }
    let mut transport = live::TcpTransport::bind(scenario.topology.nodes.iter().map(|n| n.id))?;
    Ok(run_scenario_with(scenario, &mut transport)?)
}
