//! A running controller node: REST API, switch control listeners and a
//! periodic evaluation tick.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use qfabric_core::net::NodeId;
use qfabric_core::scenario::Scenario;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::api::router;
use crate::control::ControlHub;
use crate::service::{Service, ServiceHandle};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub http: SocketAddr,
    /// Node `n`'s switch connects to `control_host:control_base_port + n`;
    /// a base of 0 gives every node an ephemeral port.
    pub control_host: std::net::IpAddr,
    pub control_base_port: u16,
    pub token: Option<String>,
    pub stats_period: Duration,
    pub evaluate_period: Duration,
}

impl Default for NodeConfig {
    fn default() -> NodeConfig {
        NodeConfig {
            http: ([127, 0, 0, 1], 8080).into(),
            control_host: [127, 0, 0, 1].into(),
            control_base_port: 6650,
            token: None,
            stats_period: Duration::from_secs(1),
            evaluate_period: Duration::from_secs(1),
        }
    }
}

pub struct RunningNode {
    pub http: SocketAddr,
    pub control: BTreeMap<NodeId, SocketAddr>,
    pub service: ServiceHandle,
    pub hub: Arc<ControlHub>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningNode {
    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }

    /// Blocks until the HTTP server stops.
    pub async fn wait(mut self) {
        if let Some(t) = self.tasks.pop() {
            let _ = t.await;
        }
    }
}

/// Starts the controller described by the scenario's topology and
/// controller sections. Must be called inside a tokio runtime.
pub async fn start(scenario: &Scenario, cfg: NodeConfig) -> io::Result<RunningNode> {
    let invalid = |e: crate::service::ApiError| io::Error::new(io::ErrorKind::InvalidInput, e.to_string());
    let encoders = scenario.controller.channels.iter().map(|c| (c.id, c.endpoints.0)).collect();
    let nodes: Vec<NodeId> = scenario.topology.nodes.iter().map(|n| n.id).collect();
    let hub = ControlHub::new(nodes.iter().copied(), encoders, cfg.stats_period);
    let service = Service::new(&scenario.topology, scenario.controller.clone(), scenario.seed)
        .map_err(invalid)?
        .with_hub(hub.clone())
        .spawn();

    let mut tasks = Vec::new();
    let mut control = BTreeMap::new();
    for n in nodes {
        let port = if cfg.control_base_port == 0 { 0 } else { cfg.control_base_port.saturating_add(n.0) };
        let listener = TcpListener::bind((cfg.control_host, port)).await?;
        control.insert(n, listener.local_addr()?);
        tasks.push(hub.clone().serve(n, listener, service.clone()));
    }

    let ticker = service.clone();
    let period = cfg.evaluate_period;
    tasks.push(tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        tick.tick().await;
        loop {
            tick.tick().await;
            if ticker.evaluate().await.is_err() {
                break;
            }
        }
    }));

    let listener = TcpListener::bind(cfg.http).await?;
    let http = listener.local_addr()?;
    let app = router(service.clone(), cfg.token);
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("http server: {e}");
        }
    }));
    Ok(RunningNode { http, control, service, hub, tasks })
}
