use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{ChannelReport, CheckResult, ExposureRecord, RouteRecord, RunReport, StreamReport};
use super::transport::{InMemoryTransport, Transport};
use super::{Action, Expectation, Scenario, ScenarioError, StreamConfig};
use crate::codec::{
    deframe, BootstrapSecret, ChannelDecoder, ChannelEncoder, ClassicalSession, CodecError, CodecKind, DataFrame,
    Protection, CHECKSUM_LEN, DEFAULT_REKEY_AFTER_BYTES,
};
use crate::controller::{Command, CommandBatch, Controller, Decision, EncryptionMode};
use crate::flow::wire::{decode_control, encode_control};
use crate::flow::{ControlMessage, FlowAction, FlowSwitch, MessageBody, PacketMeta};
use crate::keystore::{decode_hex_key, KeyPool};
use crate::net::{ChannelId, LinkId, NodeId, Topology};
use crate::qkd::{Emission, Generation, KeyBlock, QcPair};
use crate::SimTime;

/// Destination port of application traffic entering a switch.
const APP_PORT: u16 = 5000;
const MAX_FRAME_BYTES: usize = 60_000;

/// Runs a scenario over lossless in-memory links.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    run_scenario_with(scenario, &mut InMemoryTransport::default())
}

/// Runs a scenario with data frames carried by `transport`.
pub fn run_scenario_with<T: Transport>(scenario: &Scenario, transport: &mut T) -> Result<RunReport, ScenarioError> {
    validate(scenario)?;
    let mut engine = Engine::new(scenario, transport)?;
    engine.run();
    Ok(engine.finish())
}

fn bad_event(index: usize, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::BadEvent { index, reason: reason.into() }
}

fn pair_link(s: &Scenario, topology: &Topology, channel: ChannelId, link: Option<LinkId>) -> Result<LinkId, ScenarioError> {
    let bad = |reason: &str| ScenarioError::BadPair { channel, reason: reason.into() };
    let cfg = s.controller.channels.iter().find(|c| c.id == channel).ok_or_else(|| bad("no such channel"))?;
    if cfg.relay.is_some() {
        return Err(bad("relayed channels get their key through the relay"));
    }
    let (a, b) = cfg.endpoints;
    let link = match link.or(cfg.primary_link) {
        Some(l) => l,
        None => topology
            .links()
            .find(|l| l.other_end(a) == Some(b))
            .map(|l| l.id)
            .ok_or_else(|| bad("no link joins the channel's endpoints"))?,
    };
    let state = topology.link(link)?;
    if state.other_end(a) != Some(b) {
        return Err(bad("link does not join the channel's endpoints"));
    }
    Ok(link)
}

fn validate(s: &Scenario) -> Result<(), ScenarioError> {
    let finite_pos = |x: f64| x.is_finite() && x > 0.0;
    if !finite_pos(s.duration_s) || !finite_pos(s.tick_s) || s.measure_every_s < 0.0 || !s.measure_every_s.is_finite() {
        return Err(ScenarioError::BadClock);
    }
    let topology = Topology::build(&s.topology)?;
    Controller::new(s.controller.clone(), topology.clone(), SimTime::ZERO)?;
    let channel = |id: ChannelId| s.controller.channels.iter().find(|c| c.id == id);

    let mut paired = BTreeSet::new();
    for p in &s.pairs {
        pair_link(s, &topology, p.channel, p.link)?;
        if !paired.insert(p.channel) {
            return Err(ScenarioError::BadPair { channel: p.channel, reason: "duplicate pair".into() });
        }
        if p.sidebands == 0 || p.sidebands > s.model.max_sidebands {
            return Err(ScenarioError::BadPair { channel: p.channel, reason: "sideband count out of range".into() });
        }
    }
    let mut names = BTreeSet::new();
    for st in &s.streams {
        let bad = |reason: &str| ScenarioError::BadStream { name: st.name.clone(), reason: reason.into() };
        if channel(st.channel).is_none() {
            return Err(bad("unknown channel"));
        }
        if !names.insert(st.name.as_str()) {
            return Err(bad("duplicate name"));
        }
        if !(st.rate_bps >= 0.0 && st.rate_bps.is_finite()) {
            return Err(bad("rate must be finite and non-negative"));
        }
        if st.frame_bytes == 0 || st.frame_bytes > MAX_FRAME_BYTES {
            return Err(bad("frame size out of range"));
        }
    }
    let mut last = 0.0;
    for (i, ev) in s.timeline.iter().enumerate() {
        if !(ev.at_s >= 0.0 && ev.at_s.is_finite()) {
            return Err(bad_event(i, "time must be finite and non-negative"));
        }
        if ev.at_s < last {
            return Err(ScenarioError::UnsortedTimeline(i));
        }
        last = ev.at_s;
        match &ev.action {
            Action::Fault { link, .. } => {
                topology.link(*link).map_err(|e| bad_event(i, e.to_string()))?;
            }
            Action::Eavesdrop { channel: c, .. } | Action::AddSideband { channel: c } | Action::DropSideband { channel: c, .. } => {
                if !paired.contains(c) {
                    return Err(bad_event(i, format!("channel {c} has no QKD pair")));
                }
            }
            Action::StreamRate { stream, rate_bps } => {
                if !names.contains(stream.as_str()) {
                    return Err(bad_event(i, format!("unknown stream {stream}")));
                }
                if !(*rate_bps >= 0.0 && rate_bps.is_finite()) {
                    return Err(bad_event(i, "rate must be finite and non-negative"));
                }
            }
            Action::QchannelStatus { channel: c, .. } => {
                if channel(*c).is_none() {
                    return Err(bad_event(i, format!("unknown channel {c}")));
                }
            }
            Action::Qkey { channel: c, hex } => {
                if channel(*c).is_none() {
                    return Err(bad_event(i, format!("unknown channel {c}")));
                }
                decode_hex_key(hex).map_err(|e| bad_event(i, e.to_string()))?;
            }
        }
    }
    for (i, e) in s.expect.iter().enumerate() {
        let bad = |reason: String| ScenarioError::BadExpectation { index: i, reason };
        match e {
            Expectation::FinalMode { channel: c, .. }
            | Expectation::Transition { channel: c, .. }
            | Expectation::FinalRoute { channel: c, .. } => {
                if channel(*c).is_none() {
                    return Err(bad(format!("unknown channel {c}")));
                }
            }
            Expectation::OnlyCodec { stream, .. } | Expectation::MinFrames { stream, .. } => {
                if !names.contains(stream.as_str()) {
                    return Err(bad(format!("unknown stream {stream}")));
                }
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct PairStats {
    produced_bits: u64,
    blocks: u64,
    discards: u64,
    discarded_bits: u64,
    under_attack: u64,
    qber_sum: f64,
    qber_n: u64,
    first_discard: Option<SimTime>,
    status: Vec<(SimTime, bool)>,
    dead_events: Vec<SimTime>,
}

struct PairRun {
    pair: QcPair,
    dead: bool,
    reported_up: bool,
}

struct Codecs {
    enc: ChannelEncoder,
    dec: ChannelDecoder,
    tx: Option<ClassicalSession>,
    rx: Option<ClassicalSession>,
    /// Mode the classical session was set up for.
    mode: EncryptionMode,
}

struct StreamRun {
    cfg: StreamConfig,
    hops: Vec<ChannelId>,
    carry: f64,
    report: StreamReport,
}

enum Lost {
    NoRule,
    Starved,
    Transport,
    Corrupt,
}

struct Engine<'a, T> {
    sc: &'a Scenario,
    transport: &'a mut T,
    world: Topology,
    ctl: Controller,
    pairs: BTreeMap<ChannelId, PairRun>,
    stats: BTreeMap<ChannelId, PairStats>,
    switches: BTreeMap<NodeId, FlowSwitch>,
    codecs: BTreeMap<ChannelId, Codecs>,
    streams: Vec<StreamRun>,
    key_relay: Vec<ChannelId>,
    relayed_bits: BTreeMap<ChannelId, u64>,
    rng_qkd: ChaCha8Rng,
    rng_loss: ChaCha8Rng,
    rng_data: ChaCha8Rng,
    rng_session: ChaCha8Rng,
    bootstrap: BootstrapSecret,
    xid: u32,
    counters: BTreeMap<(NodeId, u64), u64>,
    exposures: BTreeMap<(NodeId, ChannelId), ExposureRecord>,
    commands: Vec<String>,
    control_errors: u64,
    bytes_by_codec: BTreeMap<CodecKind, u64>,
    total_bytes: u64,
    ticks: u64,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<'a, T: Transport> Engine<'a, T> {
    fn new(sc: &'a Scenario, transport: &'a mut T) -> Result<Self, ScenarioError> {
        let world = Topology::build(&sc.topology)?;
        let ctl = Controller::new(sc.controller.clone(), world.clone(), SimTime::ZERO)?;
        let mut pairs = BTreeMap::new();
        for p in &sc.pairs {
            let link = pair_link(sc, &world, p.channel, p.link)?;
            let cfg = &ctl.channel(p.channel).expect("validated").config;
            let mut pair = QcPair::new(p.channel, cfg.endpoints.0, cfg.endpoints.1, link, cfg.mu);
            for _ in 1..p.sidebands {
                pair.add_sideband_channel(&sc.model).map_err(|e| ScenarioError::BadPair {
                    channel: p.channel,
                    reason: e.to_string(),
                })?;
            }
            pair.eavesdropper_present = p.eavesdropper;
            pairs.insert(p.channel, PairRun { pair, dead: false, reported_up: true });
        }
        let mut codecs = BTreeMap::new();
        let mut key_relay = Vec::new();
        for id in ctl.channel_ids() {
            let cfg = &ctl.channel(id).expect("listed").config;
            if cfg.relay.is_some() && !cfg.is_data_relay() {
                key_relay.push(id);
            }
            if !cfg.is_data_relay() {
                codecs.insert(
                    id,
                    Codecs {
                        enc: ChannelEncoder::new(id),
                        dec: ChannelDecoder::new(id),
                        tx: None,
                        rx: None,
                        mode: EncryptionMode::ClassicalOnly,
                    },
                );
            }
        }
        let streams = sc
            .streams
            .iter()
            .map(|st| {
                let cfg = &ctl.channel(st.channel).expect("validated").config;
                let hops = match cfg.relay {
                    Some(via) if cfg.is_data_relay() => via.segments.to_vec(),
                    _ => alloc::vec![st.channel],
                };
                StreamRun {
                    cfg: st.clone(),
                    hops,
                    carry: 0.0,
                    report: StreamReport {
                        name: st.name.clone(),
                        channel: st.channel,
                        frames_sent: 0,
                        frames_delivered: 0,
                        integrity_failures: 0,
                        dropped_no_rule: 0,
                        dropped_starved: 0,
                        dropped_transport: 0,
                        bytes_sent: 0,
                        bytes_by_codec: BTreeMap::new(),
                        security_violations: 0,
                    },
                }
            })
            .collect();
        let mut secret = [0u8; 32];
        rng(sc.seed, 4).fill_bytes(&mut secret);
        let switches = world.nodes().map(|(n, _)| (n, FlowSwitch::new())).collect();
        let stats = ctl.channel_ids().into_iter().map(|id| (id, PairStats::default())).collect();
        Ok(Engine {
            sc,
            transport,
            world,
            ctl,
            pairs,
            stats,
            switches,
            codecs,
            streams,
            key_relay,
            relayed_bits: BTreeMap::new(),
            rng_qkd: rng(sc.seed, 0),
            rng_loss: rng(sc.seed, 1),
            rng_data: rng(sc.seed, 2),
            rng_session: rng(sc.seed, 3),
            bootstrap: BootstrapSecret(secret),
            xid: 0,
            counters: BTreeMap::new(),
            exposures: BTreeMap::new(),
            commands: Vec::new(),
            control_errors: 0,
            bytes_by_codec: BTreeMap::new(),
            total_bytes: 0,
            ticks: 0,
        })
    }

    fn run(&mut self) {
        let nodes: Vec<NodeId> = self.switches.keys().copied().collect();
        for n in nodes {
            self.control(n, MessageBody::Hello, SimTime::ZERO);
        }
        let init = self.ctl.start(SimTime::ZERO);
        self.apply(init);

        let tick = SimTime::from_secs_f64(self.sc.tick_s).as_micros().max(1);
        let end = SimTime::from_secs_f64(self.sc.duration_s).as_micros();
        let measure = SimTime::from_secs_f64(self.sc.measure_every_s).as_micros();
        let mut next_event = 0;
        let mut last_measure: Option<u64> = None;
        let mut prev = 0u64;
        while prev < end {
            let now_us = (prev + tick).min(end);
            let now = SimTime(now_us);
            let dt = (now_us - prev) as f64 / 1e6;
            while next_event < self.sc.timeline.len()
                && SimTime::from_secs_f64(self.sc.timeline[next_event].at_s).as_micros() <= prev
            {
                let action = self.sc.timeline[next_event].action.clone();
                self.act(action, now);
                next_event += 1;
            }
            if last_measure.is_none_or(|t| now_us - t >= measure) {
                self.measure(now);
                last_measure = Some(now_us);
            }
            self.generate(dt, now);
            self.relay_keys(now);
            self.traffic(prev, dt, now);
            self.poll_stats(now);
            let batch = self.ctl.evaluate(now);
            self.apply(batch);
            self.ticks += 1;
            prev = now_us;
        }
    }

    fn apply(&mut self, batch: CommandBatch) {
        for cmd in batch.commands {
            self.commands.push(format!("{} v{} {} {}", batch.time, batch.map_version, batch.trigger, cmd));
            match cmd {
                Command::FlowMod { node, flow_mod } => {
                    self.control(node, MessageBody::FlowMod(flow_mod), batch.time);
                }
                Command::SetMode { channel, mode } => {
                    if let Some(c) = self.codecs.get_mut(&channel) {
                        if c.mode != mode {
                            c.tx = None;
                            c.rx = None;
                            c.mode = mode;
                        }
                    }
                }
                Command::SetMeanPhoton { channel, mu } => {
                    if let Some(p) = self.pairs.get_mut(&channel) {
                        p.pair.mu = mu.min(self.sc.model.mu_max);
                    }
                }
                Command::SetOpticalPath { channel, path } => {
                    if let Some(p) = self.pairs.get_mut(&channel) {
                        p.pair.path = path;
                    }
                }
            }
        }
    }

    /// Sends one control message to a node's switch over the wire format.
    fn control(&mut self, node: NodeId, body: MessageBody, now: SimTime) -> Option<ControlMessage> {
        self.xid = self.xid.wrapping_add(1);
        let msg = ControlMessage::new(self.xid, body);
        let Some(sw) = self.switches.get_mut(&node) else {
            log::warn!("no switch at node {node}");
            self.control_errors += 1;
            return None;
        };
        let bytes = match encode_control(&msg) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("control message to node {node}: {e}");
                self.control_errors += 1;
                return None;
            }
        };
        let reply = decode_control(&sw.handle_bytes(&bytes, now)?).ok()?;
        if let MessageBody::Error { code, .. } = &reply.body {
            log::warn!("switch {node} rejected xid {}: error {}", reply.xid, code.0);
            self.control_errors += 1;
        }
        Some(reply)
    }

    fn act(&mut self, action: Action, now: SimTime) {
        match action {
            Action::Fault { link, fault } => {
                if let Err(e) = self.world.inject_fault(link, fault) {
                    log::warn!("fault on link {link}: {e}");
                }
            }
            Action::Eavesdrop { channel, on } => {
                if let Some(p) = self.pairs.get_mut(&channel) {
                    p.pair.eavesdropper_present = on;
                }
            }
            Action::StreamRate { stream, rate_bps } => {
                if let Some(s) = self.streams.iter_mut().find(|s| s.cfg.name == stream) {
                    s.cfg.rate_bps = rate_bps;
                }
            }
            Action::QchannelStatus { channel, up } => self.status(channel, up, now),
            Action::Qkey { channel, hex } => match self.ctl.on_qkey(channel, &hex, now) {
                Ok(b) => self.apply(b),
                Err(e) => log::warn!("qkey for channel {channel}: {e}"),
            },
            Action::AddSideband { channel } => {
                if let Some(p) = self.pairs.get_mut(&channel) {
                    if let Err(e) = p.pair.add_sideband_channel(&self.sc.model) {
                        log::warn!("channel {channel}: {e}");
                    }
                }
            }
            Action::DropSideband { channel, index } => {
                if let Some(p) = self.pairs.get_mut(&channel) {
                    if let Err(e) = p.pair.drop_sideband_channel(index) {
                        log::warn!("channel {channel}: {e}");
                    }
                }
            }
        }
    }

    fn status(&mut self, channel: ChannelId, up: bool, now: SimTime) {
        if let Some(s) = self.stats.get_mut(&channel) {
            s.status.push((now, up));
        }
        if let Some(p) = self.pairs.get_mut(&channel) {
            p.reported_up = up;
        }
        match self.ctl.on_qchannel_status(channel, up, now) {
            Ok(b) => self.apply(b),
            Err(e) => log::warn!("status for channel {channel}: {e}"),
        }
    }

    fn measure(&mut self, now: SimTime) {
        let ids: Vec<LinkId> = self.world.links().map(|l| l.id).collect();
        let reports: Vec<_> = ids
            .into_iter()
            .filter_map(|id| self.world.measure_loss(id, self.sc.loss_noise_db, &mut self.rng_loss, now).ok())
            .collect();
        let batch = self.ctl.on_loss_reports(&reports, now);
        self.apply(batch);
    }

    fn mark_dead(&mut self, channel: ChannelId, now: SimTime) {
        let Some(p) = self.pairs.get_mut(&channel) else { return };
        if p.dead {
            return;
        }
        p.dead = true;
        p.reported_up = false;
        if let Some(s) = self.stats.get_mut(&channel) {
            s.dead_events.push(now);
        }
        match self.ctl.on_channel_dead(channel, now) {
            Ok(b) => self.apply(b),
            Err(e) => log::warn!("channel {channel}: {e}"),
        }
    }

    fn flush(&mut self, pending: &mut Vec<KeyBlock>, now: SimTime) {
        if pending.is_empty() {
            return;
        }
        match self.ctl.on_key_blocks(core::mem::take(pending), now) {
            Ok(b) => self.apply(b),
            Err(e) => log::warn!("key blocks: {e}"),
        }
    }

    fn generate(&mut self, dt: f64, now: SimTime) {
        let ids: Vec<ChannelId> = self.pairs.keys().copied().collect();
        for id in ids {
            let p = self.pairs.get_mut(&id).expect("listed");
            let generation = p.pair.generate_key_block(&self.sc.model, &self.world, dt, now, &mut self.rng_qkd);
            let emissions = match generation {
                Ok(Generation::Emitted(e)) => e,
                Ok(Generation::ChannelDead) => {
                    self.mark_dead(id, now);
                    continue;
                }
                Err(e) => {
                    log::warn!("pair {id}: {e}");
                    continue;
                }
            };
            let expected = p
                .pair
                .effective_loss_db(&self.world)
                .ok()
                .flatten()
                .and_then(|loss| p.pair.sifted_rate(&self.sc.model, loss).ok())
                .unwrap_or(0.0);
            let under_attack = p.pair.eavesdropper_present;
            if expected < self.sc.dead_rate_bps {
                self.mark_dead(id, now);
            } else {
                self.pairs.get_mut(&id).expect("listed").dead = false;
            }
            let mut pending = Vec::new();
            for e in emissions {
                let sample = e.sample();
                let st = self.stats.get_mut(&id).expect("every channel has stats");
                st.qber_sum += sample.qber;
                st.qber_n += 1;
                match e {
                    Emission::Block(b) => {
                        st.produced_bits += b.bits.len() as u64 * 8;
                        st.blocks += 1;
                        if under_attack {
                            st.under_attack += 1;
                        }
                        let p = &self.pairs[&id];
                        if !p.reported_up && !p.dead {
                            self.flush(&mut pending, now);
                            self.status(id, true, now);
                        }
                        pending.push(b);
                    }
                    Emission::Discard(d) => {
                        st.produced_bits += d.bits as u64;
                        st.discards += 1;
                        st.discarded_bits += d.bits as u64;
                        st.first_discard.get_or_insert(now);
                        if self.pairs[&id].reported_up {
                            self.flush(&mut pending, now);
                            self.status(id, false, now);
                        }
                    }
                }
            }
            self.flush(&mut pending, now);
        }
    }

    fn relay_keys(&mut self, now: SimTime) {
        for id in self.key_relay.clone() {
            match self.ctl.relay_keys(id, self.sc.model.block_bytes, now) {
                Ok(Some((rec, batch))) => {
                    *self.relayed_bits.entry(id).or_default() += rec.bytes as u64 * 8;
                    self.apply(batch);
                }
                Ok(None) => {}
                Err(e) => log::warn!("key relay for channel {id}: {e}"),
            }
        }
    }

    fn traffic(&mut self, prev: u64, dt: f64, now: SimTime) {
        for i in 0..self.streams.len() {
            let s = &mut self.streams[i];
            let started = SimTime::from_secs_f64(s.cfg.start_s).as_micros() <= prev;
            let stopped = s.cfg.stop_s.is_some_and(|t| SimTime::from_secs_f64(t).as_micros() <= prev);
            if !started || stopped {
                continue;
            }
            s.carry += s.cfg.rate_bps * dt / 8.0 / s.cfg.frame_bytes as f64;
            let n = libm::floor(s.carry);
            s.carry -= n;
            let size = s.cfg.frame_bytes;
            for _ in 0..n as u64 {
                let mut payload = alloc::vec![0u8; size];
                self.rng_data.fill_bytes(&mut payload);
                self.send_frame(i, payload, now);
            }
        }
    }

    fn send_frame(&mut self, i: usize, payload: Vec<u8>, now: SimTime) {
        self.streams[i].report.frames_sent += 1;
        self.streams[i].report.bytes_sent += payload.len() as u64;
        let hops = self.streams[i].hops.clone();
        let mut data = payload.clone();
        for (h, &hop) in hops.iter().enumerate() {
            match self.transmit(i, hop, &data, now) {
                Ok(out) => data = out,
                Err(lost) => {
                    let r = &mut self.streams[i].report;
                    match lost {
                        Lost::NoRule => r.dropped_no_rule += 1,
                        Lost::Starved => r.dropped_starved += 1,
                        Lost::Transport => r.dropped_transport += 1,
                        Lost::Corrupt => r.integrity_failures += 1,
                    }
                    return;
                }
            }
            if h + 1 < hops.len() {
                let node = self.ctl.channel(hop).expect("segment").config.endpoints.1;
                let channel = self.streams[i].cfg.channel;
                let e = self.exposures.entry((node, channel)).or_insert(ExposureRecord {
                    node,
                    channel,
                    frames: 0,
                    bytes: 0,
                    first: now,
                    last: now,
                });
                e.frames += 1;
                e.bytes += data.len() as u64;
                e.last = now;
                log::debug!("relay {node} handled {} plaintext bytes of channel {channel}", data.len());
            }
        }
        let r = &mut self.streams[i].report;
        if data == payload {
            r.frames_delivered += 1;
        } else {
            r.integrity_failures += 1;
        }
    }

    fn kind_for(&self, node: NodeId, meta: &PacketMeta) -> Option<CodecKind> {
        match self.switches.get(&node)?.table().match_packet(meta) {
            FlowAction::ForwardTo(ep) => Some(ep.kind),
            FlowAction::Drop => None,
        }
    }

    /// One hop: ingress switch, encoder, wire, egress switch, decoder.
    fn transmit(&mut self, i: usize, ch: ChannelId, plain: &[u8], now: SimTime) -> Result<Vec<u8>, Lost> {
        let (enc, dec) = self.ctl.channel(ch).ok_or(Lost::NoRule)?.config.endpoints;
        let meta = PacketMeta { dst_address: Ipv4Addr::new(10, 0, 0, dec.0 as u8), dst_port: APP_PORT, channel: ch };
        let kind = match self.switches.get_mut(&enc).ok_or(Lost::NoRule)?.forward(&meta, plain.len()) {
            FlowAction::ForwardTo(ep) => ep.kind,
            FlowAction::Drop => return Err(Lost::NoRule),
        };
        let (kind, wire) = match self.encode(ch, kind, plain, now) {
            Ok(w) => (kind, w),
            Err(CodecError::KeyStarvation { available }) => {
                let need = (plain.len() + CHECKSUM_LEN) as u64 * 8;
                log::debug!("channel {ch} starved: {available} bits for {need}");
                match self.ctl.on_key_starvation(ch, need, now) {
                    Ok(b) => self.apply(b),
                    Err(e) => log::warn!("{e}"),
                }
                let kind = self.kind_for(enc, &meta).ok_or(Lost::NoRule)?;
                (kind, self.encode(ch, kind, plain, now).map_err(|_| Lost::Starved)?)
            }
            Err(e) => {
                log::warn!("channel {ch} encoder: {e}");
                return Err(Lost::Starved);
            }
        };
        let sent = deframe(&wire).map_err(|_| Lost::Corrupt)?;
        let violation = match kind {
            CodecKind::Transparent => sent.payload != plain,
            _ => plain.len() >= 8 && sent.payload.get(..plain.len()) == Some(plain),
        };
        let r = &mut self.streams[i].report;
        if violation {
            r.security_violations += 1;
        }
        *r.bytes_by_codec.entry(kind).or_default() += plain.len() as u64;
        *self.bytes_by_codec.entry(kind).or_default() += plain.len() as u64;
        self.total_bytes += plain.len() as u64;

        if let Err(e) = self.transport.send(enc, dec, wire) {
            log::warn!("{e}");
            return Err(Lost::Transport);
        }
        let got = match self.transport.recv(dec) {
            Ok(Some(w)) => w,
            Ok(None) => return Err(Lost::Transport),
            Err(e) => {
                log::warn!("{e}");
                return Err(Lost::Transport);
            }
        };
        let frame = deframe(&got).map_err(|_| Lost::Corrupt)?;
        let egress = match self.switches.get_mut(&dec).ok_or(Lost::NoRule)?.forward(&meta, got.len()) {
            FlowAction::ForwardTo(ep) => ep.kind,
            FlowAction::Drop => return Err(Lost::NoRule),
        };
        if egress != frame.kind {
            log::warn!("channel {ch}: {} frame steered to {egress} decoder", frame.kind);
            return Err(Lost::Corrupt);
        }
        self.decode(ch, &frame, now).map_err(|e| {
            log::warn!("channel {ch} decoder: {e}");
            Lost::Corrupt
        })
    }

    fn session(&mut self, ch: ChannelId, next_len: usize, now: SimTime) {
        let c = self.codecs.get_mut(&ch).expect("codec channel");
        if c.tx.as_ref().is_some_and(|s| !s.needs_rekey(next_len)) {
            return;
        }
        let wrap = c.mode == EncryptionMode::QuantumWrappedClassical;
        let mut none = KeyPool::new(ch);
        let pools = if wrap { self.ctl.pools_mut(ch) } else { None };
        let (tx, rx) = match pools {
            Some(p) => {
                let (tx, offer) = ClassicalSession::establish(
                    ch,
                    &mut p.near,
                    &self.bootstrap,
                    &mut self.rng_session,
                    now,
                    DEFAULT_REKEY_AFTER_BYTES,
                );
                (tx, ClassicalSession::accept(&offer, &mut p.far, &self.bootstrap, now, DEFAULT_REKEY_AFTER_BYTES))
            }
            None => {
                let (tx, offer) = ClassicalSession::establish(
                    ch,
                    &mut none,
                    &self.bootstrap,
                    &mut self.rng_session,
                    now,
                    DEFAULT_REKEY_AFTER_BYTES,
                );
                (tx, ClassicalSession::accept(&offer, &mut none, &self.bootstrap, now, DEFAULT_REKEY_AFTER_BYTES))
            }
        };
        let c = self.codecs.get_mut(&ch).expect("codec channel");
        c.tx = Some(tx);
        c.rx = rx.ok();
    }

    fn encode(&mut self, ch: ChannelId, kind: CodecKind, plain: &[u8], now: SimTime) -> Result<Vec<u8>, CodecError> {
        if kind == CodecKind::Classical {
            self.session(ch, plain.len() + CHECKSUM_LEN, now);
        }
        let c = self.codecs.get_mut(&ch).ok_or(CodecError::KeyStarvation { available: 0 })?;
        match kind {
            CodecKind::Transparent => c.enc.encode(plain, Protection::Transparent, now),
            CodecKind::Quantum => {
                let pools = self.ctl.pools_mut(ch).ok_or(CodecError::KeyStarvation { available: 0 })?;
                c.enc.encode(plain, Protection::Quantum(&mut pools.near), now)
            }
            CodecKind::Classical => {
                let tx = c.tx.as_mut().ok_or(CodecError::RekeyRequired)?;
                c.enc.encode(plain, Protection::Classical(tx), now)
            }
        }
    }

    fn decode(&mut self, ch: ChannelId, frame: &DataFrame, now: SimTime) -> Result<Vec<u8>, CodecError> {
        let c = self.codecs.get_mut(&ch).ok_or(CodecError::IntegrityFailure)?;
        match frame.kind {
            CodecKind::Transparent => c.dec.decode(frame, Protection::Transparent, now),
            CodecKind::Quantum => {
                let pools = self.ctl.pools_mut(ch).ok_or(CodecError::IntegrityFailure)?;
                c.dec.decode(frame, Protection::Quantum(&mut pools.far), now)
            }
            CodecKind::Classical => {
                let rx = c.rx.as_mut().ok_or(CodecError::IntegrityFailure)?;
                c.dec.decode(frame, Protection::Classical(rx), now)
            }
        }
    }

    /// FLOW_STATS round trip to every switch; byte-counter deltas at each
    /// channel's sending node become its traffic sample.
    fn poll_stats(&mut self, now: SimTime) {
        let nodes: Vec<NodeId> = self.switches.keys().copied().collect();
        for node in nodes {
            let Some(reply) = self.control(node, MessageBody::FlowStatsRequest, now) else { continue };
            let MessageBody::FlowStatsReply(stats) = reply.body else { continue };
            for s in stats {
                let ch = ChannelId((s.cookie >> 32) as u16);
                let Some(state) = self.ctl.channel(ch) else { continue };
                if state.config.endpoints.0 != node {
                    continue;
                }
                let last = self.counters.insert((node, s.cookie), s.bytes).unwrap_or(0);
                let delta = s.bytes.saturating_sub(last);
                if delta > 0 {
                    let _ = self.ctl.on_traffic(ch, delta, now);
                }
            }
        }
    }

    fn finish(self) -> RunReport {
        let sc = self.sc;
        let mut channels = Vec::new();
        let mut ledger = Vec::new();
        let mut conservation = Vec::new();
        for id in self.ctl.channel_ids() {
            let st = &self.stats[&id];
            let state = self.ctl.channel(id).expect("listed");
            let (pushed, consumed, available) = match &state.pools {
                Some(p) => {
                    ledger.extend_from_slice(p.near.ledger());
                    for side in [&p.near, &p.far] {
                        let recorded: u64 = side.ledger().iter().map(|r| r.bytes as u64 * 8).sum();
                        if side.pushed_bits_total() != side.pool_level() + side.consumed_bits_total()
                            || recorded != side.consumed_bits_total()
                        {
                            conservation.push(id);
                        }
                    }
                    if p.near.pushed_bits_total() != p.far.pushed_bits_total() {
                        conservation.push(id);
                    }
                    (p.near.pushed_bits_total(), p.near.consumed_bits_total(), p.near.pool_level())
                }
                None => (0, 0, 0),
            };
            channels.push(ChannelReport {
                channel: id,
                produced_bits: st.produced_bits,
                blocks: st.blocks,
                discards: st.discards,
                discarded_bits: st.discarded_bits,
                blocks_pooled_under_attack: st.under_attack,
                mean_qber: if st.qber_n == 0 { 0.0 } else { st.qber_sum / st.qber_n as f64 },
                sifted_rate_bps: st.produced_bits as f64 / sc.duration_s,
                pushed_bits: pushed,
                consumed_bits: consumed,
                available_bits: available,
                relayed_bits: self.relayed_bits.get(&id).copied().unwrap_or(0),
                status_dispatches: st.status.clone(),
                dead_events: st.dead_events.clone(),
                first_discard: st.first_discard,
                final_mode: state.mode,
                final_route: state.route.to_string(),
            });
        }
        let routes = self
            .ctl
            .audit()
            .iter()
            .filter_map(|e| match &e.decision {
                Decision::Route { path } => Some(RouteRecord {
                    time: e.time,
                    channel: e.channel?,
                    route: path.clone(),
                    trigger: e.trigger.to_string(),
                }),
                _ => None,
            })
            .collect();
        let streams: Vec<StreamReport> = self.streams.into_iter().map(|s| s.report).collect();
        let transitions = self.ctl.transitions().to_vec();

        let mut checks = Vec::new();
        let mut check = |name: &str, passed: bool, detail: String| {
            checks.push(CheckResult { name: name.into(), passed, detail });
        };
        let corrupt: u64 = streams.iter().map(|s| s.integrity_failures).sum();
        let delivered: u64 = streams.iter().map(|s| s.frames_delivered).sum();
        check("integrity", corrupt == 0, format!("{delivered} delivered, {corrupt} corrupted"));
        check(
            "key-conservation",
            conservation.is_empty(),
            if conservation.is_empty() { "all pools balance".into() } else { format!("unbalanced channels {conservation:?}") },
        );
        let violations: u64 = streams.iter().map(|s| s.security_violations).sum();
        check("security-accounting", violations == 0, format!("{violations} violating frames"));
        let by_codec: u64 = self.bytes_by_codec.values().sum();
        let per_stream = streams.iter().all(|s| {
            s.bytes_by_codec.values().sum::<u64>()
                <= s.bytes_sent * self.ctl.channel(s.channel).map_or(1, |c| c.config.relay.map_or(1, |_| 2))
        });
        check(
            "codec-bytes",
            by_codec == self.total_bytes && per_stream,
            format!("{by_codec} by codec, {} total", self.total_bytes),
        );
        check("control", self.control_errors == 0, format!("{} switch errors", self.control_errors));

        for e in &sc.expect {
            let (name, passed, detail) = match e {
                Expectation::FinalMode { channel, mode } => {
                    let got = channels.iter().find(|c| c.channel == *channel).map(|c| c.final_mode);
                    (format!("final-mode ch{channel}"), got == Some(*mode), format!("want {mode}, got {got:?}"))
                }
                Expectation::Transition { channel, from, to, after_s, before_s } => {
                    let (lo, hi) = (SimTime::from_secs_f64(*after_s), SimTime::from_secs_f64(*before_s));
                    let hit = transitions
                        .iter()
                        .find(|t| t.channel == *channel && t.from == *from && t.to == *to && t.time >= lo && t.time <= hi);
                    (
                        format!("transition ch{channel} {from}->{to}"),
                        hit.is_some(),
                        match hit {
                            Some(t) => format!("at {}", t.time),
                            None => format!("none within [{lo}, {hi}]"),
                        },
                    )
                }
                Expectation::OnlyCodec { stream, kind } => {
                    let s = streams.iter().find(|s| &s.name == stream);
                    let ok = s.is_some_and(|s| {
                        s.bytes_by_codec.keys().all(|k| k == kind) && s.bytes_by_codec.get(kind).is_some_and(|b| *b > 0)
                    });
                    let seen: Vec<String> = s.map_or(Vec::new(), |s| s.bytes_by_codec.keys().map(|k| k.to_string()).collect());
                    (format!("only-codec {stream}"), ok, format!("want {kind}, saw {seen:?}"))
                }
                Expectation::MinFrames { stream, frames } => {
                    let got = streams.iter().find(|s| &s.name == stream).map_or(0, |s| s.frames_delivered);
                    (format!("min-frames {stream}"), got >= *frames, format!("{got} delivered, want {frames}"))
                }
                Expectation::FinalRoute { channel, path } => {
                    let got = self.ctl.channel(*channel).map(|c| c.route.path.clone()).unwrap_or_default();
                    (format!("final-route ch{channel}"), &got == path, format!("want {path:?}, got {got:?}"))
                }
            };
            check(&name, passed, detail);
        }

        RunReport {
            scenario: sc.name.clone(),
            seed: sc.seed,
            duration_s: sc.duration_s,
            ticks: self.ticks,
            channels,
            transitions,
            routes,
            streams,
            bytes_by_codec: self.bytes_by_codec,
            total_bytes_sent: self.total_bytes,
            exposures: self.exposures.into_values().collect(),
            commands: self.commands,
            control_errors: self.control_errors,
            ledger,
            checks,
        }
    }
}
