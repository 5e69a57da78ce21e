use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::codec::EntrancePoint;
use crate::net::ChannelId;
use crate::SimTime;

/// Match fields; `None` is an explicit wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FlowMatch {
    pub dst_address: Option<Ipv4Addr>,
    pub dst_port: Option<u16>,
    pub channel: Option<ChannelId>,
}

impl FlowMatch {
    pub fn matches(&self, meta: &PacketMeta) -> bool {
        self.dst_address.is_none_or(|a| a == meta.dst_address)
            && self.dst_port.is_none_or(|p| p == meta.dst_port)
            && self.channel.is_none_or(|c| c == meta.channel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketMeta {
    pub dst_address: Ipv4Addr,
    pub dst_port: u16,
    pub channel: ChannelId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowAction {
    ForwardTo(EntrancePoint),
    Drop,
}

/// A rule as carried by FLOW_MOD, before the switch stamps it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuleSpec {
    pub cookie: u64,
    pub priority: u16,
    pub matcher: FlowMatch,
    pub action: FlowAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowRule {
    pub cookie: u64,
    pub priority: u16,
    pub matcher: FlowMatch,
    pub action: FlowAction,
    pub installed_at: SimTime,
}

impl FlowRule {
    pub fn spec(&self) -> RuleSpec {
        RuleSpec { cookie: self.cookie, priority: self.priority, matcher: self.matcher, action: self.action }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleCounters {
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    rule: FlowRule,
    order: u64,
    counters: RuleCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("cookie {0:#x} already installed")]
    DuplicateCookie(u64),
    #[error("cookie {0:#x} not installed")]
    UnknownCookie(u64),
}

/// Priority flow table. Lookup returns the highest-priority matching rule;
/// among equal priorities the earliest installed wins. No match drops.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlowTable {
    // kept sorted by (priority desc, installed_at asc, order asc)
    entries: Vec<Entry>,
    next_order: u64,
}

impl FlowTable {
    pub fn new() -> FlowTable {
        FlowTable::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.entries.iter().map(|e| &e.rule)
    }

    pub fn install_rule(&mut self, rule: FlowRule) -> Result<(), TableError> {
        if self.entries.iter().any(|e| e.rule.cookie == rule.cookie) {
            return Err(TableError::DuplicateCookie(rule.cookie));
        }
        let entry = Entry { rule, order: self.next_order, counters: RuleCounters { packets: 0, bytes: 0 } };
        self.next_order += 1;
        let key = |e: &Entry| (core::cmp::Reverse(e.rule.priority), e.rule.installed_at, e.order);
        let at = self.entries.partition_point(|e| key(e) < key(&entry));
        self.entries.insert(at, entry);
        Ok(())
    }

    pub fn remove_rule(&mut self, cookie: u64) -> Result<FlowRule, TableError> {
        let at = self
            .entries
            .iter()
            .position(|e| e.rule.cookie == cookie)
            .ok_or(TableError::UnknownCookie(cookie))?;
        Ok(self.entries.remove(at).rule)
    }

    pub fn lookup(&self, meta: &PacketMeta) -> Option<&FlowRule> {
        self.entries.iter().map(|e| &e.rule).find(|r| r.matcher.matches(meta))
    }

    pub fn match_packet(&self, meta: &PacketMeta) -> FlowAction {
        self.lookup(meta).map_or(FlowAction::Drop, |r| r.action)
    }

    /// Matches and bumps the winning rule's counters (saturating).
    pub fn forward(&mut self, meta: &PacketMeta, bytes: usize) -> FlowAction {
        match self.entries.iter_mut().find(|e| e.rule.matcher.matches(meta)) {
            Some(e) => {
                e.counters.packets = e.counters.packets.saturating_add(1);
                e.counters.bytes = e.counters.bytes.saturating_add(bytes as u64);
                e.rule.action
            }
            None => FlowAction::Drop,
        }
    }

    pub fn counters(&self, cookie: u64) -> Option<RuleCounters> {
        self.entries.iter().find(|e| e.rule.cookie == cookie).map(|e| e.counters)
    }

    pub fn stats(&self) -> impl Iterator<Item = (&FlowRule, RuleCounters)> {
        self.entries.iter().map(|e| (&e.rule, e.counters))
    }
}
