use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use thiserror::Error;

use crate::codec::CodecKind;
use crate::controller::{EncryptionMode, ModeTransition};
use crate::keystore::ConsumptionRecord;
use crate::net::{ChannelId, NodeId};
use crate::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReport {
    pub channel: ChannelId,
    /// Sifted bits produced by the channel's QKD pair, discarded or not.
    pub produced_bits: u64,
    pub blocks: u64,
    pub discards: u64,
    pub discarded_bits: u64,
    /// Blocks that reached the pool while an eavesdropper was on the line.
    pub blocks_pooled_under_attack: u64,
    pub mean_qber: f64,
    pub sifted_rate_bps: f64,
    /// Totals of the sending-side pool.
    pub pushed_bits: u64,
    pub consumed_bits: u64,
    pub available_bits: u64,
    /// End-to-end key delivered through a relay.
    pub relayed_bits: u64,
    pub status_dispatches: Vec<(SimTime, bool)>,
    pub dead_events: Vec<SimTime>,
    pub first_discard: Option<SimTime>,
    pub final_mode: EncryptionMode,
    pub final_route: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamReport {
    pub name: String,
    pub channel: ChannelId,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub integrity_failures: u64,
    pub dropped_no_rule: u64,
    pub dropped_starved: u64,
    pub dropped_transport: u64,
    pub bytes_sent: u64,
    /// Plaintext bytes per codec, counted once per hop.
    pub bytes_by_codec: BTreeMap<CodecKind, u64>,
    /// Frames whose wire image broke the expected relation to the plaintext.
    pub security_violations: u64,
}

/// Plaintext handled by a trusted relay between decoding and re-encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureRecord {
    pub node: NodeId,
    pub channel: ChannelId,
    pub frames: u64,
    pub bytes: u64,
    pub first: SimTime,
    pub last: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteRecord {
    pub time: SimTime,
    pub channel: ChannelId,
    pub route: String,
    pub trigger: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub ticks: u64,
    pub channels: Vec<ChannelReport>,
    pub transitions: Vec<ModeTransition>,
    pub routes: Vec<RouteRecord>,
    pub streams: Vec<StreamReport>,
    pub bytes_by_codec: BTreeMap<CodecKind, u64>,
    pub total_bytes_sent: u64,
    pub exposures: Vec<ExposureRecord>,
    /// Every command the controller issued, one per line.
    pub commands: Vec<String>,
    pub control_errors: u64,
    /// Sending-side consumption records of every pool.
    pub ledger: Vec<ConsumptionRecord>,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Lines,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown report format `{0}` (expected table or lines)")]
pub struct UnknownFormat(pub String);

impl FromStr for ReportFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<ReportFormat, UnknownFormat> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "lines" => Ok(ReportFormat::Lines),
            other => Err(UnknownFormat(other.into())),
        }
    }
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn channel(&self, id: ChannelId) -> Option<&ChannelReport> {
        self.channels.iter().find(|c| c.channel == id)
    }

    pub fn stream(&self, name: &str) -> Option<&StreamReport> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.table(),
            ReportFormat::Lines => self.lines(),
        }
    }

    fn lines(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "scenario name={} seed={} duration_s={} ticks={}", self.scenario, self.seed, self.duration_s, self.ticks);
        for c in &self.channels {
            let _ = writeln!(
                o,
                "channel id={} produced_bits={} blocks={} discards={} discarded_bits={} pooled_under_attack={} mean_qber={:.6} sifted_rate_bps={:.1} pushed_bits={} consumed_bits={} available_bits={} relayed_bits={} final_mode={} route={}",
                c.channel,
                c.produced_bits,
                c.blocks,
                c.discards,
                c.discarded_bits,
                c.blocks_pooled_under_attack,
                c.mean_qber,
                c.sifted_rate_bps,
                c.pushed_bits,
                c.consumed_bits,
                c.available_bits,
                c.relayed_bits,
                c.final_mode,
                c.final_route.replace(' ', "_"),
            );
            for (t, up) in &c.status_dispatches {
                let _ = writeln!(o, "status time={t} channel={} up={}", c.channel, *up as u8);
            }
            for t in &c.dead_events {
                let _ = writeln!(o, "dead time={t} channel={}", c.channel);
            }
        }
        for t in &self.transitions {
            let _ = writeln!(o, "transition time={} channel={} from={} to={} reason={}", t.time, t.channel, t.from, t.to, t.reason);
        }
        for r in &self.routes {
            let _ = writeln!(o, "route time={} channel={} path={} reason={}", r.time, r.channel, r.route.replace(' ', "_"), r.trigger);
        }
        for s in &self.streams {
            let _ = write!(
                o,
                "stream name={} channel={} sent={} delivered={} integrity_failures={} dropped_no_rule={} dropped_starved={} dropped_transport={} bytes={} security_violations={}",
                s.name,
                s.channel,
                s.frames_sent,
                s.frames_delivered,
                s.integrity_failures,
                s.dropped_no_rule,
                s.dropped_starved,
                s.dropped_transport,
                s.bytes_sent,
                s.security_violations,
            );
            for (k, b) in &s.bytes_by_codec {
                let _ = write!(o, " {k}={b}");
            }
            o.push('\n');
        }
        for (k, b) in &self.bytes_by_codec {
            let _ = writeln!(o, "codec kind={k} bytes={b}");
        }
        let _ = writeln!(o, "codec kind=total bytes={}", self.total_bytes_sent);
        for e in &self.exposures {
            let _ = writeln!(
                o,
                "exposure node={} channel={} frames={} bytes={} first={} last={}",
                e.node, e.channel, e.frames, e.bytes, e.first, e.last
            );
        }
        for c in &self.commands {
            let _ = writeln!(o, "command {c}");
        }
        let _ = writeln!(o, "control_errors count={}", self.control_errors);
        for c in &self.checks {
            let _ = writeln!(o, "check name={} pass={} detail={}", c.name, c.passed, c.detail.replace(' ', "_"));
        }
        let _ = writeln!(o, "result pass={}", self.passed());
        o
    }

    fn table(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "scenario {} (seed {}, {} s, {} ticks)", self.scenario, self.seed, self.duration_s, self.ticks);
        o.push('\n');
        let _ = writeln!(
            o,
            "{:<8} {:>12} {:>10} {:>9} {:>9} {:>12} {:>12} {:>12}  {:<24} route",
            "channel", "rate_bps", "qber", "blocks", "discards", "pushed", "consumed", "available", "mode"
        );
        for c in &self.channels {
            let _ = writeln!(
                o,
                "{:<8} {:>12.1} {:>10.6} {:>9} {:>9} {:>12} {:>12} {:>12}  {:<24} {}",
                c.channel.0,
                c.sifted_rate_bps,
                c.mean_qber,
                c.blocks,
                c.discards,
                c.pushed_bits,
                c.consumed_bits,
                c.available_bits,
                c.final_mode.name(),
                c.final_route
            );
        }
        o.push('\n');
        let _ = writeln!(o, "{:<12} {:<8} {:<24} {:<24} reason", "time", "channel", "from", "to");
        for t in &self.transitions {
            let _ = writeln!(
                o,
                "{:<12} {:<8} {:<24} {:<24} {}",
                t.time.to_string(),
                t.channel.0,
                t.from.name(),
                t.to.name(),
                t.reason
            );
        }
        if !self.routes.is_empty() {
            o.push('\n');
            let _ = writeln!(o, "{:<12} {:<8} {:<32} trigger", "time", "channel", "route");
            for r in &self.routes {
                let _ = writeln!(o, "{:<12} {:<8} {:<32} {}", r.time.to_string(), r.channel.0, r.route, r.trigger);
            }
        }
        o.push('\n');
        let _ = writeln!(
            o,
            "{:<16} {:>8} {:>10} {:>10} {:>10} {:>10}  bytes by codec",
            "stream", "channel", "sent", "delivered", "corrupt", "dropped"
        );
        for s in &self.streams {
            let mut codecs = String::new();
            for (k, b) in &s.bytes_by_codec {
                let _ = write!(codecs, "{k}={b} ");
            }
            let _ = writeln!(
                o,
                "{:<16} {:>8} {:>10} {:>10} {:>10} {:>10}  {}",
                s.name,
                s.channel.0,
                s.frames_sent,
                s.frames_delivered,
                s.integrity_failures,
                s.dropped_no_rule + s.dropped_starved + s.dropped_transport,
                codecs.trim_end()
            );
        }
        let mut codecs = String::new();
        for (k, b) in &self.bytes_by_codec {
            let _ = write!(codecs, "{k}={b} ");
        }
        let _ = writeln!(o, "bytes by codec: {}(total {})", codecs, self.total_bytes_sent);
        for e in &self.exposures {
            let _ = writeln!(
                o,
                "relay exposure: node {} channel {} frames {} bytes {} from {} to {}",
                e.node, e.channel, e.frames, e.bytes, e.first, e.last
            );
        }
        o.push('\n');
        for c in &self.checks {
            let _ = writeln!(o, "[{}] {} {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        let _ = writeln!(o, "{}", if self.passed() { "PASS" } else { "FAIL" });
        o
    }
}
