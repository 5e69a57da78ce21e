use alloc::vec::Vec;

use super::table::{FlowAction, FlowRule, FlowTable, PacketMeta, TableError};
use super::wire::{decode_control, encode_control, ControlMessage, ErrorCode, FlowMod, FlowStats, MessageBody};
use crate::SimTime;

/// Flow switch on one node: a table plus the control-message handler.
///
/// The table outlives the controller connection, so a switch that loses its
/// controller keeps forwarding with whatever rules it last received.
#[derive(Debug, Clone, Default)]
pub struct FlowSwitch {
    table: FlowTable,
    port_events: Vec<(u16, bool)>,
    handshake_done: bool,
}

impl FlowSwitch {
    pub fn new() -> FlowSwitch {
        FlowSwitch::default()
    }

    pub fn table(&self) -> &FlowTable {
        &self.table
    }

    pub fn handshake_done(&self) -> bool {
        self.handshake_done
    }

    pub fn forward(&mut self, meta: &PacketMeta, bytes: usize) -> FlowAction {
        self.table.forward(meta, bytes)
    }

    pub fn port_events(&self) -> &[(u16, bool)] {
        &self.port_events
    }

    /// Applies one decoded message; returns the reply, if any.
    pub fn handle(&mut self, msg: &ControlMessage, now: SimTime) -> Option<ControlMessage> {
        let reply = |body| Some(ControlMessage::new(msg.xid, body));
        match &msg.body {
            MessageBody::Hello => {
                self.handshake_done = true;
                reply(MessageBody::Hello)
            }
            MessageBody::Echo(data) => reply(MessageBody::Echo(data.clone())),
            MessageBody::FlowMod(FlowMod::Add(spec)) => {
                let rule = FlowRule {
                    cookie: spec.cookie,
                    priority: spec.priority,
                    matcher: spec.matcher,
                    action: spec.action,
                    installed_at: now,
                };
                self.table.install_rule(rule).err().and_then(|e| reply(table_error(e)))
            }
            MessageBody::FlowMod(FlowMod::Delete { cookie }) => {
                self.table.remove_rule(*cookie).err().and_then(|e| reply(table_error(e)))
            }
            MessageBody::PortStatus { port, up } => {
                self.port_events.push((*port, *up));
                None
            }
            MessageBody::FlowStatsRequest => reply(MessageBody::FlowStatsReply(self.stats())),
            // replies and errors from the peer need no answer
            MessageBody::FlowStatsReply(_) | MessageBody::Error { .. } => None,
        }
    }

    /// Decodes and applies raw bytes. Undecodable input yields an ERROR
    /// reply when the xid could be read, otherwise nothing.
    pub fn handle_bytes(&mut self, buf: &[u8], now: SimTime) -> Option<Vec<u8>> {
        let reply = match decode_control(buf) {
            Ok(msg) => self.handle(&msg, now)?,
            Err(e) => e.reply(buf)?,
        };
        encode_control(&reply).ok()
    }

    pub fn stats(&self) -> Vec<FlowStats> {
        self.table
            .stats()
            .map(|(r, c)| FlowStats { cookie: r.cookie, priority: r.priority, packets: c.packets, bytes: c.bytes })
            .collect()
    }
}

fn table_error(e: TableError) -> MessageBody {
    let (code, cookie) = match e {
        TableError::DuplicateCookie(c) => (ErrorCode::DUPLICATE_COOKIE, c),
        TableError::UnknownCookie(c) => (ErrorCode::UNKNOWN_COOKIE, c),
    };
    MessageBody::Error { code, data: cookie.to_be_bytes().to_vec() }
}
