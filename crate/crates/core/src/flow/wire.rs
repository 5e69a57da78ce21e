//! Controller ↔ switch control messages.
//!
//! A compact subset modeled on OpenFlow 1.3 semantics; not wire compatible
//! with OpenFlow. Every message starts with a 10-byte header:
//!
//! ```text
//!  0      2     3      4         8        10
//!  +------+-----+------+---------+--------+---------
//!  | 'OF' | 0x04| type |   xid   | length | body ...
//!  +------+-----+------+---------+--------+---------
//! ```
//!
//! `length` covers header and body. Integers are big-endian. Bodies:
//!
//! | type | message            | body                                             |
//! |------|--------------------|--------------------------------------------------|
//! | 0    | HELLO              | empty                                            |
//! | 1    | ECHO               | opaque data, echoed back                         |
//! | 2    | FLOW_MOD           | cmd u8 (0 add, 1 delete), then rule or cookie    |
//! | 3    | PORT_STATUS        | port u16, up u8 (0/1)                            |
//! | 4    | FLOW_STATS_REQUEST | empty                                            |
//! | 5    | FLOW_STATS_REPLY   | count u16, count × (cookie u64, prio u16, packets u64, bytes u64) |
//! | 6    | ERROR              | code u16, data                                   |
//!
//! A FLOW_MOD add carries `cookie u64, priority u16, match, action`. The match
//! is a flags byte (bit 0 address, bit 1 port, bit 2 channel) followed by the
//! present fields in that order (4, 2 and 2 bytes). The action is a byte
//! (0 drop, 1 forward) and, for forward, `address[4] port u16 kind u8
//! direction u8`. Decoding is strict: every valid buffer re-encodes to itself.

use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use super::table::{FlowAction, FlowMatch, RuleSpec};
use crate::codec::{CodecKind, Direction, EntrancePoint};
use crate::net::ChannelId;

pub const CONTROL_MAGIC: [u8; 2] = [0x4F, 0x46];
pub const CONTROL_VERSION: u8 = 0x04;
pub const CONTROL_HEADER_LEN: usize = 10;

const MATCH_ADDR: u8 = 1;
const MATCH_PORT: u8 = 2;
const MATCH_CHANNEL: u8 = 4;
const STATS_ENTRY_LEN: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageType {
    Hello = 0,
    Echo = 1,
    FlowMod = 2,
    PortStatus = 3,
    FlowStatsRequest = 4,
    FlowStatsReply = 5,
    Error = 6,
}

impl MessageType {
    fn from_byte(b: u8) -> Option<MessageType> {
        Some(match b {
            0 => MessageType::Hello,
            1 => MessageType::Echo,
            2 => MessageType::FlowMod,
            3 => MessageType::PortStatus,
            4 => MessageType::FlowStatsRequest,
            5 => MessageType::FlowStatsReply,
            6 => MessageType::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowMod {
    Add(RuleSpec),
    Delete { cookie: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowStats {
    pub cookie: u64,
    pub priority: u16,
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ErrorCode(pub u16);

impl ErrorCode {
    pub const BAD_VERSION: ErrorCode = ErrorCode(1);
    pub const UNKNOWN_TYPE: ErrorCode = ErrorCode(2);
    pub const MALFORMED: ErrorCode = ErrorCode(3);
    pub const DUPLICATE_COOKIE: ErrorCode = ErrorCode(4);
    pub const UNKNOWN_COOKIE: ErrorCode = ErrorCode(5);
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MessageBody {
    Hello,
    Echo(Vec<u8>),
    FlowMod(FlowMod),
    PortStatus { port: u16, up: bool },
    FlowStatsRequest,
    FlowStatsReply(Vec<FlowStats>),
    Error { code: ErrorCode, data: Vec<u8> },
}

impl MessageBody {
    pub fn message_type(&self) -> MessageType {
        match self {
            MessageBody::Hello => MessageType::Hello,
            MessageBody::Echo(_) => MessageType::Echo,
            MessageBody::FlowMod(_) => MessageType::FlowMod,
            MessageBody::PortStatus { .. } => MessageType::PortStatus,
            MessageBody::FlowStatsRequest => MessageType::FlowStatsRequest,
            MessageBody::FlowStatsReply(_) => MessageType::FlowStatsReply,
            MessageBody::Error { .. } => MessageType::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ControlMessage {
    pub xid: u32,
    pub body: MessageBody,
}

impl ControlMessage {
    pub fn new(xid: u32, body: MessageBody) -> ControlMessage {
        ControlMessage { xid, body }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("message of {0} bytes exceeds the 16-bit length field")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    BadMagic,
    BadVersion(u8),
    Truncated,
    LengthMismatch,
    UnknownType(u8),
    Malformed,
}

/// Decode failure; `xid` is set whenever the header was readable, so the
/// peer can be answered with an ERROR for the right transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("control message decode failed: {kind:?}")]
pub struct DecodeError {
    pub kind: DecodeErrorKind,
    pub xid: Option<u32>,
}

impl DecodeError {
    /// The ERROR reply a switch should send, if the xid is known.
    pub fn reply(&self, offending: &[u8]) -> Option<ControlMessage> {
        let xid = self.xid?;
        let code = match self.kind {
            DecodeErrorKind::BadVersion(_) => ErrorCode::BAD_VERSION,
            DecodeErrorKind::UnknownType(_) => ErrorCode::UNKNOWN_TYPE,
            _ => ErrorCode::MALFORMED,
        };
        let data = offending[..offending.len().min(CONTROL_HEADER_LEN)].to_vec();
        Some(ControlMessage::new(xid, MessageBody::Error { code, data }))
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_entrance(out: &mut Vec<u8>, ep: &EntrancePoint) {
    out.extend_from_slice(&ep.address.octets());
    put_u16(out, ep.port);
    out.push(ep.kind as u8);
    out.push(match ep.direction {
        Direction::Encoder => 0,
        Direction::Decoder => 1,
    });
}

fn put_rule(out: &mut Vec<u8>, rule: &RuleSpec) {
    put_u64(out, rule.cookie);
    put_u16(out, rule.priority);
    let m = &rule.matcher;
    let flags = (m.dst_address.is_some() as u8 * MATCH_ADDR)
        | (m.dst_port.is_some() as u8 * MATCH_PORT)
        | (m.channel.is_some() as u8 * MATCH_CHANNEL);
    out.push(flags);
    if let Some(a) = m.dst_address {
        out.extend_from_slice(&a.octets());
    }
    if let Some(p) = m.dst_port {
        put_u16(out, p);
    }
    if let Some(c) = m.channel {
        put_u16(out, c.0);
    }
    match &rule.action {
        FlowAction::Drop => out.push(0),
        FlowAction::ForwardTo(ep) => {
            out.push(1);
            put_entrance(out, ep);
        }
    }
}

pub fn encode_control(msg: &ControlMessage) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&CONTROL_MAGIC);
    out.push(CONTROL_VERSION);
    out.push(msg.body.message_type() as u8);
    put_u32(&mut out, msg.xid);
    put_u16(&mut out, 0);
    match &msg.body {
        MessageBody::Hello | MessageBody::FlowStatsRequest => {}
        MessageBody::Echo(data) => out.extend_from_slice(data),
        MessageBody::FlowMod(FlowMod::Add(rule)) => {
            out.push(0);
            put_rule(&mut out, rule);
        }
        MessageBody::FlowMod(FlowMod::Delete { cookie }) => {
            out.push(1);
            put_u64(&mut out, *cookie);
        }
        MessageBody::PortStatus { port, up } => {
            put_u16(&mut out, *port);
            out.push(*up as u8);
        }
        MessageBody::FlowStatsReply(entries) => {
            let count = u16::try_from(entries.len()).map_err(|_| EncodeError::TooLarge(usize::MAX))?;
            put_u16(&mut out, count);
            for e in entries {
                put_u64(&mut out, e.cookie);
                put_u16(&mut out, e.priority);
                put_u64(&mut out, e.packets);
                put_u64(&mut out, e.bytes);
            }
        }
        MessageBody::Error { code, data } => {
            put_u16(&mut out, code.0);
            out.extend_from_slice(data);
        }
    }
    let len = u16::try_from(out.len()).map_err(|_| EncodeError::TooLarge(out.len()))?;
    out[8..10].copy_from_slice(&len.to_be_bytes());
    Ok(out)
}

/// Total message size announced by a header prefix, once at least
/// [`CONTROL_HEADER_LEN`] bytes are available.
pub fn message_len(header: &[u8]) -> Option<usize> {
    let len = header.get(8..10)?;
    Some(u16::from_be_bytes([len[0], len[1]]) as usize)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| {
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            u64::from_be_bytes(a)
        })
    }
    fn addr(&mut self) -> Option<Ipv4Addr> {
        self.take(4).map(|b| Ipv4Addr::new(b[0], b[1], b[2], b[3]))
    }
    fn rest(&mut self) -> &'a [u8] {
        core::mem::take(&mut self.buf)
    }
    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

fn read_entrance(r: &mut Reader<'_>) -> Option<EntrancePoint> {
    let address = r.addr()?;
    let port = r.u16()?;
    let kind = CodecKind::from_byte(r.u8()?)?;
    let direction = match r.u8()? {
        0 => Direction::Encoder,
        1 => Direction::Decoder,
        _ => return None,
    };
    Some(EntrancePoint { address, port, kind, direction })
}

fn read_rule(r: &mut Reader<'_>) -> Option<RuleSpec> {
    let cookie = r.u64()?;
    let priority = r.u16()?;
    let flags = r.u8()?;
    if flags & !(MATCH_ADDR | MATCH_PORT | MATCH_CHANNEL) != 0 {
        return None;
    }
    let mut matcher = FlowMatch::default();
    if flags & MATCH_ADDR != 0 {
        matcher.dst_address = Some(r.addr()?);
    }
    if flags & MATCH_PORT != 0 {
        matcher.dst_port = Some(r.u16()?);
    }
    if flags & MATCH_CHANNEL != 0 {
        matcher.channel = Some(ChannelId(r.u16()?));
    }
    let action = match r.u8()? {
        0 => FlowAction::Drop,
        1 => FlowAction::ForwardTo(read_entrance(r)?),
        _ => return None,
    };
    Some(RuleSpec { cookie, priority, matcher, action })
}

fn read_body(ty: MessageType, r: &mut Reader<'_>) -> Option<MessageBody> {
    let body = match ty {
        MessageType::Hello => MessageBody::Hello,
        MessageType::FlowStatsRequest => MessageBody::FlowStatsRequest,
        MessageType::Echo => MessageBody::Echo(r.rest().to_vec()),
        MessageType::FlowMod => match r.u8()? {
            0 => MessageBody::FlowMod(FlowMod::Add(read_rule(r)?)),
            1 => MessageBody::FlowMod(FlowMod::Delete { cookie: r.u64()? }),
            _ => return None,
        },
        MessageType::PortStatus => {
            let port = r.u16()?;
            let up = match r.u8()? {
                0 => false,
                1 => true,
                _ => return None,
            };
            MessageBody::PortStatus { port, up }
        }
        MessageType::FlowStatsReply => {
            let count = r.u16()? as usize;
            if r.buf.len() != count * STATS_ENTRY_LEN {
                return None;
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                entries.push(FlowStats { cookie: r.u64()?, priority: r.u16()?, packets: r.u64()?, bytes: r.u64()? });
            }
            MessageBody::FlowStatsReply(entries)
        }
        MessageType::Error => {
            let code = ErrorCode(r.u16()?);
            MessageBody::Error { code, data: r.rest().to_vec() }
        }
    };
    r.is_empty().then_some(body)
}

/// Decodes one complete message. Never panics.
pub fn decode_control(buf: &[u8]) -> Result<ControlMessage, DecodeError> {
    let err = |kind, xid| DecodeError { kind, xid };
    if buf.len() < 2 {
        return Err(err(DecodeErrorKind::Truncated, None));
    }
    if buf[..2] != CONTROL_MAGIC {
        return Err(err(DecodeErrorKind::BadMagic, None));
    }
    if buf.len() < CONTROL_HEADER_LEN {
        return Err(err(DecodeErrorKind::Truncated, None));
    }
    let raw_xid = u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]);
    let xid = Some(raw_xid);
    if buf[2] != CONTROL_VERSION {
        return Err(err(DecodeErrorKind::BadVersion(buf[2]), xid));
    }
    let declared = u16::from_be_bytes([buf[8], buf[9]]) as usize;
    if declared < CONTROL_HEADER_LEN {
        return Err(err(DecodeErrorKind::LengthMismatch, xid));
    }
    if buf.len() < declared {
        return Err(err(DecodeErrorKind::Truncated, xid));
    }
    if buf.len() > declared {
        return Err(err(DecodeErrorKind::LengthMismatch, xid));
    }
    let ty = MessageType::from_byte(buf[3]).ok_or(err(DecodeErrorKind::UnknownType(buf[3]), xid))?;
    let mut r = Reader { buf: &buf[CONTROL_HEADER_LEN..] };
    let body = read_body(ty, &mut r).ok_or(err(DecodeErrorKind::Malformed, xid))?;
    Ok(ControlMessage { xid: raw_xid, body })
}
