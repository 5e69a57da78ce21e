//! The central controller: network map, mode and route policy, and the
//! command batches it sends to switches, codecs and QKD devices.
//!
//! Every handler takes one event, updates the map, re-evaluates what the
//! event can have changed and returns one [`CommandBatch`]. Handlers are
//! deterministic: the same event sequence always yields the same batches.

mod policy;
mod relay;
mod route;

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use thiserror::Error;

pub use policy::{
    apply_watermark, select_mode, ChannelPolicy, EncryptionMode, ModeInputs, Qos, RelayMode,
    DEFAULT_DIRECT_PREFERENCE_MARGIN_DB,
};
pub use relay::{relay_key, KeyRelayRecord, RelayError, RelayPlan, RelayVia};
pub use route::{compute_route, RouteDecision, RouteError, RouteReason};

use crate::codec::{CodecKind, Direction, EntrancePoint};
use crate::flow::{FlowAction, FlowMatch, FlowMod, RuleSpec};
use crate::keystore::{decode_hex_key, KeyError, MirroredPools};
use crate::net::{ChannelId, LinkId, LinkStatus, LossReading, LossReport, NodeId, NodeRole, Topology, TopologyError};
use crate::qkd::{KeyBlock, MuPolicy};
use crate::SimTime;

pub const DEFAULT_REROUTE_THRESHOLD_DB: f64 = 10.0;
pub const DEFAULT_REENTRY_WATERMARK_BITS: u64 = 128;
pub const DEFAULT_WINDOW_S: f64 = 10.0;
pub const DEFAULT_FLOW_PRIORITY: u16 = 100;
pub const DEFAULT_MU: f64 = 0.2;

/// Where a node's codec for one kind and direction listens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntranceConfig {
    pub node: NodeId,
    pub kind: CodecKind,
    pub direction: Direction,
    pub address: Ipv4Addr,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelConfig {
    pub id: ChannelId,
    /// (encoder side, decoder side)
    pub endpoints: (NodeId, NodeId),
    #[cfg_attr(feature = "serde", serde(default))]
    pub primary_link: Option<LinkId>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub critical: bool,
    pub qos: Qos,
    #[cfg_attr(feature = "serde", serde(default = "unlimited"))]
    pub traffic_threshold_bps: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_margin"))]
    pub direct_preference_margin_db: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub relay_mode: RelayMode,
    /// Set for channels served through a trusted node.
    #[cfg_attr(feature = "serde", serde(default))]
    pub relay: Option<RelayVia>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub mu_policy: MuPolicy,
    #[cfg_attr(feature = "serde", serde(default = "default_mu"))]
    pub mu: f64,
}

#[cfg(feature = "serde")]
fn unlimited() -> u64 {
    u64::MAX
}
#[cfg(feature = "serde")]
fn default_margin() -> f64 {
    DEFAULT_DIRECT_PREFERENCE_MARGIN_DB
}
#[cfg(feature = "serde")]
fn default_mu() -> f64 {
    DEFAULT_MU
}

impl ChannelConfig {
    pub fn new(id: u16, encoder: u16, decoder: u16, qos: Qos) -> ChannelConfig {
        ChannelConfig {
            id: ChannelId(id),
            endpoints: (NodeId(encoder), NodeId(decoder)),
            primary_link: None,
            critical: false,
            qos,
            traffic_threshold_bps: u64::MAX,
            direct_preference_margin_db: DEFAULT_DIRECT_PREFERENCE_MARGIN_DB,
            relay_mode: RelayMode::DataRelay,
            relay: None,
            mu_policy: MuPolicy::default(),
            mu: DEFAULT_MU,
        }
    }

    pub fn policy(&self) -> ChannelPolicy {
        ChannelPolicy {
            channel: self.id,
            critical: self.critical,
            qos: self.qos,
            traffic_threshold_bps: self.traffic_threshold_bps,
            direct_preference_margin_db: self.direct_preference_margin_db,
            relay_mode: self.relay_mode,
        }
    }

    /// A data-relay channel has no key of its own; its segments carry it.
    pub fn is_data_relay(&self) -> bool {
        self.relay.is_some() && self.relay_mode == RelayMode::DataRelay
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ControllerConfig {
    pub channels: Vec<ChannelConfig>,
    pub entrance_points: Vec<EntranceConfig>,
    /// Loss change that makes routes be recomputed.
    pub reroute_threshold_db: f64,
    /// Pool level required before moving up into a quantum mode.
    pub reentry_watermark_bits: u64,
    /// Sliding window for traffic and key-rate estimates.
    pub window_s: f64,
    pub flow_priority: u16,
    pub mu_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            channels: Vec::new(),
            entrance_points: Vec::new(),
            reroute_threshold_db: DEFAULT_REROUTE_THRESHOLD_DB,
            reentry_watermark_bits: DEFAULT_REENTRY_WATERMARK_BITS,
            window_s: DEFAULT_WINDOW_S,
            flow_priority: DEFAULT_FLOW_PRIORITY,
            mu_max: 1.0,
        }
    }
}

impl ControllerConfig {
    /// Entrance point of `node`'s codec; unlisted ones default to
    /// `10.0.0.<node>:<7000 + 10 * kind + direction>`.
    pub fn entrance(&self, node: NodeId, kind: CodecKind, direction: Direction) -> EntrancePoint {
        match self
            .entrance_points
            .iter()
            .find(|e| e.node == node && e.kind == kind && e.direction == direction)
        {
            Some(e) => EntrancePoint { address: e.address, port: e.port, kind, direction },
            None => EntrancePoint {
                address: Ipv4Addr::new(10, 0, 0, node.0 as u8),
                port: 7000 + 10 * kind as u16 + direction as u16,
                kind,
                direction,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("duplicate channel {0}")]
    DuplicateChannel(ChannelId),
    #[error("channel {0} has no key pool of its own")]
    NoKeyPool(ChannelId),
    #[error("invalid key: {0}")]
    InvalidKey(KeyError),
    #[error("channel {channel}: {source}")]
    Topology { channel: ChannelId, source: TopologyError },
    #[error("channel {channel}: primary link {link} does not join its endpoints")]
    BadPrimary { channel: ChannelId, link: LinkId },
    #[error("route: {0}")]
    Route(#[from] RouteError),
    #[error("relay: {0}")]
    Relay(#[from] RelayError),
}

/// Sum of samples over a trailing window, as a per-second rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateWindow {
    window: SimTime,
    origin: SimTime,
    samples: VecDeque<(SimTime, u64)>,
}

impl RateWindow {
    pub fn new(window_s: f64, origin: SimTime) -> RateWindow {
        RateWindow { window: SimTime::from_secs_f64(window_s), origin, samples: VecDeque::new() }
    }

    pub fn add(&mut self, now: SimTime, amount: u64) {
        while self.samples.front().is_some_and(|&(t, _)| t + self.window <= now) {
            self.samples.pop_front();
        }
        if amount > 0 {
            self.samples.push_back((now, amount));
        }
    }

    /// Rate over `min(window, time since origin)`.
    pub fn rate(&self, now: SimTime) -> f64 {
        let sum: u64 = self
            .samples
            .iter()
            .filter(|&&(t, _)| t + self.window > now)
            .fold(0u64, |acc, &(_, a)| acc.saturating_add(a));
        if sum == 0 {
            return 0.0;
        }
        let span = now.saturating_sub(self.origin).as_micros().min(self.window.as_micros()).max(1_000);
        sum as f64 * 1e6 / span as f64
    }
}

/// What woke the controller up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Init,
    QchannelStatus { channel: ChannelId, up: bool },
    QKey(ChannelId),
    KeyArrival(ChannelId),
    LossReport,
    ChannelDead(ChannelId),
    KeyStarvation(ChannelId),
    Evaluate,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::Init => f.write_str("init"),
            Trigger::QchannelStatus { up, .. } => write!(f, "qchannel-status-{}", *up as u8),
            Trigger::QKey(_) => f.write_str("qkey"),
            Trigger::KeyArrival(_) => f.write_str("key-arrival"),
            Trigger::LossReport => f.write_str("loss-report"),
            Trigger::ChannelDead(_) => f.write_str("channel-dead"),
            Trigger::KeyStarvation(_) => f.write_str("key-starvation"),
            Trigger::Evaluate => f.write_str("evaluate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Goes to `node`'s flow switch as a FLOW_MOD.
    FlowMod { node: NodeId, flow_mod: FlowMod },
    /// Both codec ends of a channel switch protection level.
    SetMode { channel: ChannelId, mode: EncryptionMode },
    /// Transmitter of the channel's QKD pair.
    SetMeanPhoton { channel: ChannelId, mu: f64 },
    /// Optical switches steer the channel's quantum signal onto `path`.
    SetOpticalPath { channel: ChannelId, path: Vec<LinkId> },
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::FlowMod { node, flow_mod: FlowMod::Add(r) } => {
                write!(f, "flow-add node={node} cookie={:#x} prio={}", r.cookie, r.priority)?;
                if let FlowAction::ForwardTo(ep) = r.action {
                    write!(f, " to={ep}")?;
                }
                Ok(())
            }
            Command::FlowMod { node, flow_mod: FlowMod::Delete { cookie } } => {
                write!(f, "flow-del node={node} cookie={cookie:#x}")
            }
            Command::SetMode { channel, mode } => write!(f, "set-mode ch={channel} {mode}"),
            Command::SetMeanPhoton { channel, mu } => write!(f, "set-mu ch={channel} {mu:.4}"),
            Command::SetOpticalPath { channel, path } => {
                write!(f, "set-path ch={channel}")?;
                for l in path {
                    write!(f, " {l}")?;
                }
                Ok(())
            }
        }
    }
}

/// All commands caused by one event; applied together.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandBatch {
    pub time: SimTime,
    pub map_version: u64,
    pub trigger: Trigger,
    pub commands: Vec<Command>,
}

impl CommandBatch {
    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Mode { from: EncryptionMode, to: EncryptionMode },
    Route { path: String },
    MeanPhoton { mu: f64 },
    Status { up: bool },
    KeyPush { bits: u64 },
    LinkStatus { link: LinkId, status: LinkStatus },
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub time: SimTime,
    pub map_version: u64,
    pub channel: Option<ChannelId>,
    pub trigger: Trigger,
    pub decision: Decision,
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} v{} ", self.time, self.map_version)?;
        match self.channel {
            Some(c) => write!(f, "ch{c} ")?,
            None => f.write_str("- ")?,
        }
        match &self.decision {
            Decision::Mode { from, to } => write!(f, "mode {from} -> {to}")?,
            Decision::Route { path } => write!(f, "route {path}")?,
            Decision::MeanPhoton { mu } => write!(f, "mu {mu:.4}")?,
            Decision::Status { up } => write!(f, "status {}", *up as u8)?,
            Decision::KeyPush { bits } => write!(f, "key +{bits}")?,
            Decision::LinkStatus { link, status } => write!(f, "link {link} {status}")?,
        }
        write!(f, " ({})", self.trigger)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeTransition {
    pub time: SimTime,
    pub channel: ChannelId,
    pub from: EncryptionMode,
    pub to: EncryptionMode,
    pub reason: Trigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InstalledFlows {
    cookie: u64,
    kind: CodecKind,
}

/// Controller-side state of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub config: ChannelConfig,
    /// Absent for data-relay channels.
    pub pools: Option<MirroredPools>,
    /// Last status reported by the QKD device.
    pub eligible: bool,
    pub mode: EncryptionMode,
    pub route: RouteDecision,
    pub mu: f64,
    traffic: RateWindow,
    keys: RateWindow,
    /// Bits a starved encoder asked for; blocks one-time pad until met.
    starved_need: Option<u64>,
    installed: Option<InstalledFlows>,
}

impl ChannelState {
    pub fn pool_level(&self) -> u64 {
        self.pools.as_ref().map_or(0, |p| p.level())
    }

    pub fn traffic_bps(&self, now: SimTime) -> f64 {
        self.traffic.rate(now) * 8.0
    }

    pub fn refill_bps(&self, now: SimTime) -> f64 {
        self.keys.rate(now)
    }
}

/// The controller's picture of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMap {
    pub version: u64,
    /// Link statuses and losses as the controller believes them.
    pub topology: Topology,
    pub reports: BTreeMap<LinkId, LossReport>,
    /// Loss reading at the time a link was marked degraded.
    suspect: BTreeMap<LinkId, f64>,
    pub channels: BTreeMap<ChannelId, ChannelState>,
}

impl NetworkMap {
    /// Structured text, one record per line.
    pub fn render(&self, now: SimTime) -> String {
        use core::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "version {}", self.version);
        for (id, role) in self.topology.nodes() {
            let role = match role {
                NodeRole::Endpoint => "endpoint",
                NodeRole::TrustedRelay => "trusted-relay",
            };
            let _ = writeln!(out, "node {id} {role}");
        }
        for l in self.topology.links() {
            let _ = write!(
                out,
                "link {} {}-{} {} loss_db {:.3}",
                l.id,
                l.endpoints.0,
                l.endpoints.1,
                l.status,
                l.total_loss_db()
            );
            match self.reports.get(&l.id).map(|r| r.reading) {
                Some(LossReading::Measured(db)) => {
                    let _ = write!(out, " reported {db:.3}");
                }
                Some(LossReading::Unreachable) => out.push_str(" reported unreachable"),
                None => {}
            }
            out.push('\n');
        }
        for (id, ch) in &self.channels {
            let _ = writeln!(
                out,
                "channel {id} {}-{} mode {} route {} status {} pool_bits {} traffic_bps {:.0} refill_bps {:.0}",
                ch.config.endpoints.0,
                ch.config.endpoints.1,
                ch.mode,
                ch.route,
                ch.eligible as u8,
                ch.pool_level(),
                ch.traffic_bps(now),
                ch.refill_bps(now),
            );
        }
        out
    }
}

pub struct Controller {
    config: ControllerConfig,
    map: NetworkMap,
    audit: Vec<AuditEntry>,
    transitions: Vec<ModeTransition>,
    generation: u32,
}

impl Controller {
    pub fn new(config: ControllerConfig, topology: Topology, now: SimTime) -> Result<Controller, ControllerError> {
        let mut channels = BTreeMap::new();
        for c in &config.channels {
            for n in [c.endpoints.0, c.endpoints.1] {
                topology
                    .role(n)
                    .ok_or(ControllerError::Topology { channel: c.id, source: TopologyError::NoSuchNode(n) })?;
            }
            if let Some(link) = c.primary_link {
                let l = topology.link(link).map_err(|source| ControllerError::Topology { channel: c.id, source })?;
                if l.other_end(c.endpoints.0) != Some(c.endpoints.1) {
                    return Err(ControllerError::BadPrimary { channel: c.id, link });
                }
            }
            let state = ChannelState {
                pools: (!c.is_data_relay()).then(|| MirroredPools::new(c.id)),
                eligible: true,
                mode: EncryptionMode::ClassicalOnly,
                route: RouteDecision::none(c.id),
                mu: c.mu,
                traffic: RateWindow::new(config.window_s, now),
                keys: RateWindow::new(config.window_s, now),
                starved_need: None,
                installed: None,
                config: c.clone(),
            };
            if channels.insert(c.id, state).is_some() {
                return Err(ControllerError::DuplicateChannel(c.id));
            }
        }
        for c in &config.channels {
            if let Some(via) = c.relay {
                check_relay(&topology, &channels, c, via)?;
            }
        }
        let map = NetworkMap { version: 0, topology, reports: BTreeMap::new(), suspect: BTreeMap::new(), channels };
        Ok(Controller { config, map, audit: Vec::new(), transitions: Vec::new(), generation: 0 })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn map(&self) -> &NetworkMap {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut NetworkMap {
        &mut self.map
    }

    pub fn channel(&self, id: ChannelId) -> Option<&ChannelState> {
        self.map.channels.get(&id)
    }

    pub fn channel_ids(&self) -> Vec<ChannelId> {
        self.map.channels.keys().copied().collect()
    }

    pub fn pools_mut(&mut self, id: ChannelId) -> Option<&mut MirroredPools> {
        self.map.channels.get_mut(&id)?.pools.as_mut()
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn transitions(&self) -> &[ModeTransition] {
        &self.transitions
    }

    /// Initial routes, modes and flow rules for every channel.
    pub fn start(&mut self, now: SimTime) -> CommandBatch {
        self.map.version += 1;
        self.evaluate_all(now, Trigger::Init)
    }

    /// Periodic evaluation round; quiet when nothing changed.
    pub fn evaluate(&mut self, now: SimTime) -> CommandBatch {
        self.evaluate_all(now, Trigger::Evaluate)
    }

    /// Device-reported status of a channel's quantum link.
    pub fn on_qchannel_status(&mut self, channel: ChannelId, up: bool, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let trigger = Trigger::QchannelStatus { channel, up };
        let ch = self.known(channel)?;
        if ch.eligible == up {
            return Ok(self.empty_batch(now, trigger));
        }
        ch.eligible = up;
        let path = ch.route.path.clone();
        self.map.version += 1;
        self.log(now, Some(channel), trigger, Decision::Status { up });
        if up {
            for link in path {
                self.clear_suspect(link, now, trigger);
            }
        }
        Ok(self.evaluate_all(now, trigger))
    }

    /// Hex key uploaded for a channel; fills both ends' pools.
    pub fn on_qkey(&mut self, channel: ChannelId, hex_key: &str, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let bytes = decode_hex_key(hex_key).map_err(ControllerError::InvalidKey)?;
        self.push_key(KeyBlock { channel, bits: bytes, qber: 0.0, produced_at: now }, Trigger::QKey(channel), now)
    }

    /// Key block delivered by the channel's QKD pair.
    pub fn on_key_block(&mut self, block: KeyBlock, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let trigger = Trigger::KeyArrival(block.channel);
        self.push_key(block, trigger, now)
    }

    /// Everything one pair delivered in a tick, handled as a single arrival.
    pub fn on_key_blocks(&mut self, blocks: Vec<KeyBlock>, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let Some(first) = blocks.first() else {
            return Ok(self.empty_batch(now, Trigger::Evaluate));
        };
        let trigger = Trigger::KeyArrival(first.channel);
        for b in &blocks {
            let ch = self.known(b.channel)?;
            ch.pools.as_ref().ok_or(ControllerError::NoKeyPool(b.channel))?;
        }
        for b in blocks {
            let ch = self.map.channels.get_mut(&b.channel).expect("checked above");
            let bits = ch.pools.as_mut().expect("checked above").push_block(b);
            ch.keys.add(now, bits);
        }
        self.map.version += 1;
        Ok(self.evaluate_all(now, trigger))
    }

    fn push_key(&mut self, block: KeyBlock, trigger: Trigger, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let channel = block.channel;
        let ch = self.known(channel)?;
        let pools = ch.pools.as_mut().ok_or(ControllerError::NoKeyPool(channel))?;
        let bits = pools.push_block(block);
        ch.keys.add(now, bits);
        self.map.version += 1;
        if matches!(trigger, Trigger::QKey(_)) {
            self.log(now, Some(channel), trigger, Decision::KeyPush { bits });
        }
        Ok(self.evaluate_all(now, trigger))
    }

    /// Loss readings from the reflectometers, handled as one event.
    pub fn on_loss_reports(&mut self, reports: &[LossReport], now: SimTime) -> CommandBatch {
        let trigger = Trigger::LossReport;
        let mut batch = self.empty_batch(now, trigger);
        let mut changed = false;
        for report in reports {
            let Ok(link) = self.map.topology.link(report.link) else {
                log::warn!("loss report for unknown link {}", report.link);
                continue;
            };
            let (base, status, routed) = (link.base_loss_db, link.status, link.total_loss_db());
            self.map.reports.insert(report.link, *report);
            let new_status = match report.reading {
                LossReading::Unreachable => LinkStatus::Down,
                LossReading::Measured(db) => {
                    let suspect = self.map.suspect.get(&report.link).copied();
                    match suspect {
                        Some(at) if db > at - self.config.reroute_threshold_db => LinkStatus::Degraded,
                        _ => {
                            self.map.suspect.remove(&report.link);
                            LinkStatus::Up
                        }
                    }
                }
            };
            if new_status != status {
                let _ = self.map.topology.set_status(report.link, new_status);
                self.log(now, None, trigger, Decision::LinkStatus { link: report.link, status: new_status });
                changed = true;
            }
            if let LossReading::Measured(db) = report.reading {
                if libm::fabs(db - routed) >= self.config.reroute_threshold_db {
                    let _ = self.map.topology.set_extra_loss(report.link, (db - base).max(0.0));
                    changed = true;
                }
            }
        }
        self.map.version += 1;
        self.adjust_mu(now, trigger, &mut batch);
        if changed {
            let more = self.evaluate_all(now, trigger);
            batch.commands.extend(more.commands);
        }
        batch.map_version = self.map.version;
        batch
    }

    pub fn on_loss_report(&mut self, report: LossReport, now: SimTime) -> CommandBatch {
        self.on_loss_reports(&[report], now)
    }

    /// The channel's QKD pair produces (next to) nothing: treat the quantum
    /// link as failed and mark its fibers degraded.
    pub fn on_channel_dead(&mut self, channel: ChannelId, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let trigger = Trigger::ChannelDead(channel);
        let ch = self.known(channel)?;
        let path = ch.route.path.clone();
        let was_eligible = core::mem::replace(&mut ch.eligible, false);
        let mut changed = was_eligible;
        if was_eligible {
            self.log(now, Some(channel), trigger, Decision::Status { up: false });
        }
        // a cut fiber already explains the failure
        let any_down = path
            .iter()
            .any(|l| self.map.topology.link(*l).map_or(true, |s| s.status == LinkStatus::Down));
        if !any_down {
            for link in path {
                if self.map.topology.link(link).map(|s| s.status) == Ok(LinkStatus::Up) {
                    let at = self
                        .map
                        .reports
                        .get(&link)
                        .and_then(|r| r.measured_loss_db())
                        .or_else(|| self.map.topology.link(link).ok().map(|l| l.total_loss_db()))
                        .unwrap_or(0.0);
                    self.map.suspect.insert(link, at);
                    let _ = self.map.topology.set_status(link, LinkStatus::Degraded);
                    self.log(now, None, trigger, Decision::LinkStatus { link, status: LinkStatus::Degraded });
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(self.empty_batch(now, trigger));
        }
        self.map.version += 1;
        Ok(self.evaluate_all(now, trigger))
    }

    /// An encoder found the pool short of `needed_bits`.
    pub fn on_key_starvation(&mut self, channel: ChannelId, needed_bits: u64, now: SimTime) -> Result<CommandBatch, ControllerError> {
        let trigger = Trigger::KeyStarvation(channel);
        let ch = self.known(channel)?;
        ch.starved_need = Some(ch.starved_need.unwrap_or(0).max(needed_bits));
        self.map.version += 1;
        Ok(self.evaluate_all(now, trigger))
    }

    /// Bytes the channel's encoder-side switch forwarded since the last
    /// sample.
    pub fn on_traffic(&mut self, channel: ChannelId, bytes: u64, now: SimTime) -> Result<(), ControllerError> {
        self.known(channel)?.traffic.add(now, bytes);
        Ok(())
    }

    /// Checks that a relayed channel can run now.
    pub fn plan_trusted_relay(&self, channel: ChannelId) -> Result<RelayPlan, ControllerError> {
        let ch = self.map.channels.get(&channel).ok_or(ControllerError::UnknownChannel(channel))?;
        let via = ch.config.relay.ok_or(RelayError::NotRelayed(channel))?;
        check_relay(&self.map.topology, &self.map.channels, &ch.config, via)?;
        for seg in via.segments {
            if self.map.channels[&seg].pool_level() == 0 {
                return Err(RelayError::EmptyPool(seg).into());
            }
        }
        Ok(RelayPlan { channel, relay: via.node, segments: via.segments, mode: ch.config.relay_mode })
    }

    /// Forwards as much whole-block key as both segments can spare into a
    /// key-relay channel's pool.
    pub fn relay_keys(&mut self, channel: ChannelId, block_bytes: usize, now: SimTime) -> Result<Option<(KeyRelayRecord, CommandBatch)>, ControllerError> {
        let ch = self.map.channels.get(&channel).ok_or(ControllerError::UnknownChannel(channel))?;
        let via = ch.config.relay.ok_or(RelayError::NotRelayed(channel))?;
        if ch.config.relay_mode != RelayMode::KeyRelay {
            return Err(ControllerError::NoKeyPool(channel));
        }
        let [a, b] = via.segments;
        let level = |id: ChannelId| {
            self.map.channels[&id].pools.as_ref().map_or(0, |p| p.near.pool_level().min(p.far.pool_level()))
        };
        let bytes = (level(a).min(level(b)) / 8) as usize / block_bytes.max(1) * block_bytes.max(1);
        if bytes == 0 {
            return Ok(None);
        }
        let mut first = self.map.channels.get_mut(&a).and_then(|c| c.pools.take()).ok_or(ControllerError::NoKeyPool(a))?;
        let mut second = match self.map.channels.get_mut(&b).and_then(|c| c.pools.take()) {
            Some(p) => p,
            None => {
                if let Some(c) = self.map.channels.get_mut(&a) {
                    c.pools = Some(first);
                }
                return Err(ControllerError::NoKeyPool(b));
            }
        };
        let ch = self.map.channels.get_mut(&channel).expect("checked above");
        let result = match ch.pools.as_mut() {
            Some(e2e) => relay_key(channel, &mut first, &mut second, e2e, bytes, now).map_err(ControllerError::from),
            None => Err(ControllerError::NoKeyPool(channel)),
        };
        if result.is_ok() {
            ch.keys.add(now, bytes as u64 * 8);
        }
        self.map.channels.get_mut(&a).expect("segment").pools = Some(first);
        self.map.channels.get_mut(&b).expect("segment").pools = Some(second);
        let record = result?;
        self.map.version += 1;
        let batch = self.evaluate_all(now, Trigger::KeyArrival(channel));
        Ok(Some((record, batch)))
    }

    fn known(&mut self, channel: ChannelId) -> Result<&mut ChannelState, ControllerError> {
        match self.map.channels.get_mut(&channel) {
            Some(c) => Ok(c),
            None => {
                log::warn!("event for unknown channel {channel}");
                Err(ControllerError::UnknownChannel(channel))
            }
        }
    }

    fn empty_batch(&self, now: SimTime, trigger: Trigger) -> CommandBatch {
        CommandBatch { time: now, map_version: self.map.version, trigger, commands: Vec::new() }
    }

    fn log(&mut self, time: SimTime, channel: Option<ChannelId>, trigger: Trigger, decision: Decision) {
        let entry = AuditEntry { time, map_version: self.map.version, channel, trigger, decision };
        log::info!("{entry}");
        self.audit.push(entry);
    }

    fn clear_suspect(&mut self, link: LinkId, now: SimTime, trigger: Trigger) {
        if self.map.suspect.remove(&link).is_some()
            && self.map.topology.link(link).map(|l| l.status) == Ok(LinkStatus::Degraded)
        {
            let _ = self.map.topology.set_status(link, LinkStatus::Up);
            self.log(now, None, trigger, Decision::LinkStatus { link, status: LinkStatus::Up });
        }
    }

    fn adjust_mu(&mut self, now: SimTime, trigger: Trigger, batch: &mut CommandBatch) {
        let ids = self.channel_ids();
        for id in ids {
            let ch = &self.map.channels[&id];
            if ch.config.mu_policy.is_empty() || ch.route.path.is_empty() {
                continue;
            }
            let worst = ch
                .route
                .path
                .iter()
                .filter_map(|l| self.map.reports.get(l).and_then(|r| r.measured_loss_db()))
                .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
            let mu = ch.config.mu_policy.select(ch.mu, worst, self.config.mu_max);
            if mu != ch.mu {
                self.map.channels.get_mut(&id).expect("listed").mu = mu;
                self.log(now, Some(id), trigger, Decision::MeanPhoton { mu });
                batch.commands.push(Command::SetMeanPhoton { channel: id, mu });
            }
        }
    }

    fn evaluate_all(&mut self, now: SimTime, trigger: Trigger) -> CommandBatch {
        let mut batch = self.empty_batch(now, trigger);
        let ids = self.channel_ids();
        // plain channels first: relayed ones read their segments' state
        for pass in [false, true] {
            for &id in &ids {
                if self.map.channels[&id].config.relay.is_some() == pass {
                    self.evaluate_channel(id, now, trigger, &mut batch);
                }
            }
        }
        batch.map_version = self.map.version;
        batch
    }

    fn evaluate_channel(&mut self, id: ChannelId, now: SimTime, trigger: Trigger, batch: &mut CommandBatch) {
        let route = match self.map.channels[&id].config.relay {
            None => {
                let c = &self.map.channels[&id].config;
                compute_route(&self.map.topology, id, c.endpoints.0, c.endpoints.1, c.primary_link, c.direct_preference_margin_db)
                    .unwrap_or_else(|_| RouteDecision::none(id))
            }
            Some(via) => self.relayed_route(id, via),
        };
        let segments_alive = match self.map.channels[&id].config.relay {
            None => true,
            Some(via) => via.segments.iter().all(|s| self.map.channels.get(s).is_some_and(|c| c.eligible)),
        };
        let watermark = self.config.reentry_watermark_bits;
        let ch = self.map.channels.get_mut(&id).expect("listed");
        if route.path != ch.route.path || route.reason != ch.route.reason {
            let optical = route.has_quantum_path() && route.path != ch.route.path && ch.config.relay.is_none();
            ch.route = route.clone();
            let entry = Decision::Route { path: alloc::format!("{route}") };
            if optical {
                batch.commands.push(Command::SetOpticalPath { channel: id, path: route.path.clone() });
            }
            self.log(now, Some(id), trigger, entry);
        }

        // the weaker segment bounds a data-relay channel's protection
        let segment_floor = self.map.channels[&id].config.relay.map(|via| {
            via.segments
                .iter()
                .filter_map(|s| self.map.channels.get(s).map(|c| c.mode))
                .min()
                .unwrap_or(EncryptionMode::ClassicalOnly)
        });
        let ch = self.map.channels.get_mut(&id).expect("listed");
        let proposed = if ch.config.is_data_relay() {
            segment_floor.unwrap_or(EncryptionMode::ClassicalOnly)
        } else {
            let pool_bits = ch.pool_level();
            if ch.starved_need.is_some_and(|need| pool_bits >= need.max(watermark)) {
                ch.starved_need = None;
            }
            let inputs = ModeInputs {
                pool_bits,
                traffic_bps: ch.traffic_bps(now),
                refill_bps: ch.refill_bps(now),
                quantum_path_alive: ch.eligible && segments_alive && ch.route.has_quantum_path(),
            };
            let mut m = select_mode(&ch.config.policy(), &inputs);
            if ch.starved_need.is_some() && m == EncryptionMode::DirectOtp {
                m = EncryptionMode::QuantumWrappedClassical;
            }
            apply_watermark(ch.mode, m, pool_bits, watermark)
        };
        let first = ch.installed.is_none() && !ch.config.is_data_relay();
        if proposed == ch.mode && !first {
            return;
        }
        let from = ch.mode;
        ch.mode = proposed;
        if from != proposed {
            batch.commands.push(Command::SetMode { channel: id, mode: proposed });
            self.transitions.push(ModeTransition { time: now, channel: id, from, to: proposed, reason: trigger });
            self.log(now, Some(id), trigger, Decision::Mode { from, to: proposed });
        }
        self.steer(id, batch);
    }

    /// Points both ends' switches at the codec for the channel's mode:
    /// new rules first, then removal of the old ones, all in one batch.
    fn steer(&mut self, id: ChannelId, batch: &mut CommandBatch) {
        let ch = &self.map.channels[&id];
        if ch.config.is_data_relay() {
            return;
        }
        let kind = ch.mode.codec();
        if ch.installed.is_some_and(|f| f.kind == kind) {
            return;
        }
        self.generation = self.generation.wrapping_add(1);
        let cookie = (u64::from(id.0) << 32) | u64::from(self.generation);
        let (enc, dec) = ch.config.endpoints;
        let old = ch.installed;
        for (node, direction) in [(enc, Direction::Encoder), (dec, Direction::Decoder)] {
            let rule = RuleSpec {
                cookie,
                priority: self.config.flow_priority,
                matcher: FlowMatch { channel: Some(id), ..FlowMatch::default() },
                action: FlowAction::ForwardTo(self.config.entrance(node, kind, direction)),
            };
            batch.commands.push(Command::FlowMod { node, flow_mod: FlowMod::Add(rule) });
        }
        if let Some(old) = old {
            for node in [enc, dec] {
                batch.commands.push(Command::FlowMod { node, flow_mod: FlowMod::Delete { cookie: old.cookie } });
            }
        }
        self.map.channels.get_mut(&id).expect("listed").installed = Some(InstalledFlows { cookie, kind });
    }

    fn relayed_route(&self, id: ChannelId, via: RelayVia) -> RouteDecision {
        let mut path = Vec::new();
        let mut loss = 0.0;
        for seg in via.segments {
            match self.map.channels.get(&seg) {
                Some(c) if c.route.has_quantum_path() => {
                    path.extend_from_slice(&c.route.path);
                    loss += c.route.loss_db;
                }
                _ => return RouteDecision::none(id),
            }
        }
        RouteDecision { channel: id, path, via_trusted: alloc::vec![via.node], reason: RouteReason::Direct, loss_db: loss }
    }
}

fn check_relay(
    topology: &Topology,
    channels: &BTreeMap<ChannelId, ChannelState>,
    c: &ChannelConfig,
    via: RelayVia,
) -> Result<(), ControllerError> {
    if topology.role(via.node) != Some(NodeRole::TrustedRelay) {
        return Err(RelayError::NotTrusted(via.node).into());
    }
    let [a, b] = via.segments;
    let seg = |s: ChannelId| channels.get(&s).ok_or(RelayError::MissingSegment(s));
    let (sa, sb) = (seg(a)?, seg(b)?);
    if sa.config.relay.is_some() || sb.config.relay.is_some() {
        return Err(RelayError::MissingSegment(if sa.config.relay.is_some() { a } else { b }).into());
    }
    if sa.config.endpoints != (c.endpoints.0, via.node) {
        return Err(RelayError::SegmentMismatch { segment: a, relay: via.node }.into());
    }
    if sb.config.endpoints != (via.node, c.endpoints.1) {
        return Err(RelayError::SegmentMismatch { segment: b, relay: via.node }.into());
    }
    Ok(())
}
