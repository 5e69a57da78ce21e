//! Discrete-event scenario engine.
//!
//! A [`Scenario`] describes a topology, channel policies, QKD pairs, data
//! streams and a timeline of faults. [`run_scenario`] drives the whole stack
//! on a simulated clock (QKD pairs feed the pools, the controller steers the
//! switches, streams go through switch, codec, frame and transport and are
//! checked on arrival) and returns a [`RunReport`].
//!
//! Each tick runs, in order: timeline events, loss measurement, key
//! generation, traffic, a FLOW_STATS poll feeding the controller's traffic
//! estimate, and one evaluation round. Every command batch is applied as soon
//! as it is produced.

mod engine;
mod report;
mod transport;

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::CodecKind;
use crate::controller::{ControllerConfig, ControllerError, EncryptionMode};
use crate::net::{ChannelId, Fault, LinkId, TopologyError, TopologySpec, DEFAULT_NOISE_BOUND_DB};
use crate::qkd::QkdModel;

pub use engine::{run_scenario, run_scenario_with};
pub use report::{
    ChannelReport, CheckResult, ExposureRecord, ReportFormat, RouteRecord, RunReport, StreamReport, UnknownFormat,
};
pub use transport::{InMemoryTransport, Transport, TransportError};

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub channel: ChannelId,
    /// Fiber the pair is installed on; defaults to the channel's primary
    /// link, then to the lowest-numbered link joining its endpoints.
    #[cfg_attr(feature = "serde", serde(default))]
    pub link: Option<LinkId>,
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub sidebands: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub eavesdropper: bool,
}

#[cfg(feature = "serde")]
fn one() -> usize {
    1
}

impl PairConfig {
    pub fn new(channel: u16) -> PairConfig {
        PairConfig { channel: ChannelId(channel), link: None, sidebands: 1, eavesdropper: false }
    }
}

/// Constant-rate application traffic over one channel.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub name: String,
    pub channel: ChannelId,
    /// Payload bits per second.
    pub rate_bps: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_frame_bytes"))]
    pub frame_bytes: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub start_s: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub stop_s: Option<f64>,
}

pub const DEFAULT_FRAME_BYTES: usize = 512;

#[cfg(feature = "serde")]
fn default_frame_bytes() -> usize {
    DEFAULT_FRAME_BYTES
}

impl StreamConfig {
    pub fn new(name: &str, channel: u16, rate_bps: f64) -> StreamConfig {
        StreamConfig {
            name: name.into(),
            channel: ChannelId(channel),
            rate_bps,
            frame_bytes: DEFAULT_FRAME_BYTES,
            start_s: 0.0,
            stop_s: None,
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "do", rename_all = "kebab-case"))]
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Fault { link: LinkId, fault: Fault },
    Eavesdrop { channel: ChannelId, on: bool },
    StreamRate { stream: String, rate_bps: f64 },
    /// Status report as a QC device would send it over the REST API.
    QchannelStatus { channel: ChannelId, up: bool },
    Qkey { channel: ChannelId, hex: String },
    AddSideband { channel: ChannelId },
    DropSideband { channel: ChannelId, index: u8 },
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    pub at_s: f64,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub action: Action,
}

/// Scenario-specific pass conditions, checked after the run.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "check", rename_all = "kebab-case"))]
#[derive(Debug, Clone, PartialEq)]
pub enum Expectation {
    FinalMode { channel: ChannelId, mode: EncryptionMode },
    Transition { channel: ChannelId, from: EncryptionMode, to: EncryptionMode, after_s: f64, before_s: f64 },
    OnlyCodec { stream: String, kind: CodecKind },
    MinFrames { stream: String, frames: u64 },
    FinalRoute { channel: ChannelId, path: Vec<LinkId> },
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub description: String,
    #[cfg_attr(feature = "serde", serde(default = "default_seed"))]
    pub seed: u64,
    pub duration_s: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_tick"))]
    pub tick_s: f64,
    /// Reflectometer period; zero measures every tick.
    #[cfg_attr(feature = "serde", serde(default))]
    pub measure_every_s: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_noise"))]
    pub loss_noise_db: f64,
    /// Expected key rate under which a pair counts as dead.
    #[cfg_attr(feature = "serde", serde(default = "default_dead_rate"))]
    pub dead_rate_bps: f64,
    pub topology: TopologySpec,
    #[cfg_attr(feature = "serde", serde(default))]
    pub model: QkdModel,
    #[cfg_attr(feature = "serde", serde(default))]
    pub controller: ControllerConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub pairs: Vec<PairConfig>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub streams: Vec<StreamConfig>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub timeline: Vec<TimedEvent>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub expect: Vec<Expectation>,
}

pub const DEFAULT_TICK_S: f64 = 0.1;
pub const DEFAULT_DEAD_RATE_BPS: f64 = 10_000.0;

#[cfg(feature = "serde")]
fn default_seed() -> u64 {
    1
}
#[cfg(feature = "serde")]
fn default_tick() -> f64 {
    DEFAULT_TICK_S
}
#[cfg(feature = "serde")]
fn default_noise() -> f64 {
    DEFAULT_NOISE_BOUND_DB
}
#[cfg(feature = "serde")]
fn default_dead_rate() -> f64 {
    DEFAULT_DEAD_RATE_BPS
}

impl Scenario {
    pub fn new(name: &str, topology: TopologySpec, duration_s: f64) -> Scenario {
        Scenario {
            name: name.into(),
            description: String::new(),
            seed: 1,
            duration_s,
            tick_s: DEFAULT_TICK_S,
            measure_every_s: 0.0,
            loss_noise_db: DEFAULT_NOISE_BOUND_DB,
            dead_rate_bps: DEFAULT_DEAD_RATE_BPS,
            topology,
            model: QkdModel::default(),
            controller: ControllerConfig::default(),
            pairs: Vec::new(),
            streams: Vec::new(),
            timeline: Vec::new(),
            expect: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("controller: {0}")]
    Controller(#[from] ControllerError),
    #[error("duration and tick must be positive and finite")]
    BadClock,
    #[error("timeline is not sorted by time (event {0})")]
    UnsortedTimeline(usize),
    #[error("timeline event {index}: {reason}")]
    BadEvent { index: usize, reason: String },
    #[error("pair for channel {channel}: {reason}")]
    BadPair { channel: ChannelId, reason: String },
    #[error("stream {name}: {reason}")]
    BadStream { name: String, reason: String },
    #[error("expectation {index}: {reason}")]
    BadExpectation { index: usize, reason: String },
}
