//! The controller as a running service.
//!
//! One task owns the [`Controller`] and the physical plant model and handles
//! requests strictly in arrival order. HTTP handlers and switch connections
//! talk to it through a [`ServiceHandle`]; every request is answered once
//! the event has been applied.

use std::sync::Arc;
use std::time::Instant;

use qfabric_core::controller::{Command, CommandBatch, Controller, ControllerConfig, ControllerError, EncryptionMode};
use qfabric_core::net::{ChannelId, Fault, LinkId, Topology, TopologyError, TopologySpec, DEFAULT_NOISE_BOUND_DB};
use qfabric_core::SimTime;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use crate::control::ControlHub;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("controller is not running")]
    Gone,
}

impl From<ControllerError> for ApiError {
    fn from(e: ControllerError) -> ApiError {
        match e {
            ControllerError::UnknownChannel(_) | ControllerError::NoKeyPool(_) => ApiError::NotFound(e.to_string()),
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatus {
    pub channel: ChannelId,
    pub mode: EncryptionMode,
    /// Whether the QKD device last reported the quantum channel usable.
    pub eligible: bool,
    pub route: String,
    pub pool_bits: u64,
}

impl std::fmt::Display for ChannelStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "channel {}", self.channel)?;
        writeln!(f, "mode {}", self.mode)?;
        writeln!(f, "eligible {}", self.eligible as u8)?;
        writeln!(f, "route {}", self.route)?;
        writeln!(f, "pool_bits {}", self.pool_bits)
    }
}

#[derive(Debug)]
enum Request {
    Status { channel: ChannelId, up: bool },
    Qkey { channel: ChannelId, hex: String },
    Fault { link: LinkId, fault: Fault },
    Traffic { channel: ChannelId, bytes: u64 },
    Evaluate,
    Map,
    Channel(ChannelId),
    Log,
}

#[derive(Debug)]
enum Reply {
    Done,
    Text(String),
    Channel(ChannelStatus),
}

type Envelope = (Request, oneshot::Sender<Result<Reply, ApiError>>);

pub struct Service {
    ctl: Controller,
    /// The fibers as they really are; faults land here and reach the
    /// controller through loss measurements.
    plant: Topology,
    rng: ChaCha8Rng,
    noise_db: f64,
    started: Instant,
    log: Vec<String>,
    hub: Option<Arc<ControlHub>>,
}

impl Service {
    pub fn new(topology: &TopologySpec, config: ControllerConfig, seed: u64) -> Result<Service, ApiError> {
        let plant = Topology::build(topology).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let ctl = Controller::new(config, plant.clone(), SimTime::ZERO)?;
        Ok(Service {
            ctl,
            plant,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_db: DEFAULT_NOISE_BOUND_DB,
            started: Instant::now(),
            log: Vec::new(),
            hub: None,
        })
    }

    pub fn with_hub(mut self, hub: Arc<ControlHub>) -> Service {
        self.hub = Some(hub);
        self
    }

    fn now(&self) -> SimTime {
        SimTime(self.started.elapsed().as_micros() as u64)
    }

    fn apply(&mut self, batch: CommandBatch) {
        for cmd in &batch.commands {
            let line = format!("{} v{} {} {}", batch.time, batch.map_version, batch.trigger, cmd);
            log::info!("{line}");
            self.log.push(line);
            if let (Command::FlowMod { node, flow_mod }, Some(hub)) = (cmd, &self.hub) {
                hub.send_flow_mod(*node, *flow_mod);
            }
        }
    }

    fn handle(&mut self, req: Request) -> Result<Reply, ApiError> {
        let now = self.now();
        match req {
            Request::Status { channel, up } => {
                let b = self.ctl.on_qchannel_status(channel, up, now)?;
                self.apply(b);
                Ok(Reply::Done)
            }
            Request::Qkey { channel, hex } => {
                let b = self.ctl.on_qkey(channel, &hex, now)?;
                self.apply(b);
                Ok(Reply::Done)
            }
            Request::Fault { link, fault } => {
                self.plant.inject_fault(link, fault).map_err(|e| match e {
                    TopologyError::UnknownLink(_) => ApiError::NotFound(e.to_string()),
                    other => ApiError::BadRequest(other.to_string()),
                })?;
                let report = self
                    .plant
                    .measure_loss(link, self.noise_db, &mut self.rng, now)
                    .map_err(|e| ApiError::BadRequest(e.to_string()))?;
                let b = self.ctl.on_loss_report(report, now);
                self.apply(b);
                Ok(Reply::Done)
            }
            Request::Traffic { channel, bytes } => {
                self.ctl.on_traffic(channel, bytes, now)?;
                Ok(Reply::Done)
            }
            Request::Evaluate => {
                let b = self.ctl.evaluate(now);
                self.apply(b);
                Ok(Reply::Done)
            }
            Request::Map => Ok(Reply::Text(self.ctl.map().render(now))),
            Request::Channel(channel) => {
                let s = self.ctl.channel(channel).ok_or_else(|| ApiError::NotFound(format!("unknown channel {channel}")))?;
                Ok(Reply::Channel(ChannelStatus {
                    channel,
                    mode: s.mode,
                    eligible: s.eligible,
                    route: s.route.to_string(),
                    pool_bits: s.pool_level(),
                }))
            }
            Request::Log => {
                let mut text = self.log.join("\n");
                if !text.is_empty() {
                    text.push('\n');
                }
                Ok(Reply::Text(text))
            }
        }
    }

    /// Starts the controller and its request loop.
    pub fn spawn(mut self) -> ServiceHandle {
        let (tx, mut rx) = mpsc::channel::<Envelope>(256);
        let init = self.ctl.start(self.now());
        self.apply(init);
        tokio::spawn(async move {
            while let Some((req, reply)) = rx.recv().await {
                let _ = reply.send(self.handle(req));
            }
        });
        ServiceHandle { tx }
    }
}

#[derive(Clone)]
pub struct ServiceHandle {
    tx: mpsc::Sender<Envelope>,
}

impl ServiceHandle {
    async fn call(&self, req: Request) -> Result<Reply, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send((req, tx)).await.map_err(|_| ApiError::Gone)?;
        rx.await.map_err(|_| ApiError::Gone)?
    }

    async fn done(&self, req: Request) -> Result<(), ApiError> {
        self.call(req).await.map(|_| ())
    }

    async fn text(&self, req: Request) -> Result<String, ApiError> {
        match self.call(req).await? {
            Reply::Text(t) => Ok(t),
            other => unreachable!("text request answered with {other:?}"),
        }
    }

    pub async fn qchannel_status(&self, channel: ChannelId, up: bool) -> Result<(), ApiError> {
        self.done(Request::Status { channel, up }).await
    }

    pub async fn qkey(&self, channel: ChannelId, hex: String) -> Result<(), ApiError> {
        self.done(Request::Qkey { channel, hex }).await
    }

    pub async fn fault(&self, link: LinkId, fault: Fault) -> Result<(), ApiError> {
        self.done(Request::Fault { link, fault }).await
    }

    pub async fn traffic(&self, channel: ChannelId, bytes: u64) -> Result<(), ApiError> {
        self.done(Request::Traffic { channel, bytes }).await
    }

    pub async fn evaluate(&self) -> Result<(), ApiError> {
        self.done(Request::Evaluate).await
    }

    pub async fn map(&self) -> Result<String, ApiError> {
        self.text(Request::Map).await
    }

    pub async fn command_log(&self) -> Result<String, ApiError> {
        self.text(Request::Log).await
    }

    pub async fn channel(&self, channel: ChannelId) -> Result<ChannelStatus, ApiError> {
        match self.call(Request::Channel(channel)).await? {
            Reply::Channel(s) => Ok(s),
            other => unreachable!("status request answered with {other:?}"),
        }
    }
}
