//! Data-plane framing.
//!
//! ```text
//!  0      2   3    4        6         10        14
//!  +------+---+----+--------+---------+---------+---------------+
//!  | 'QD' | 1 |kind|channel |   seq   | length  | payload ...   |
//!  +------+---+----+--------+---------+---------+---------------+
//! ```
//!
//! All integers are big-endian.

use alloc::vec::Vec;

use thiserror::Error;

use super::CodecKind;
use crate::net::ChannelId;

pub const FRAME_MAGIC: [u8; 2] = [0x51, 0x44];
pub const FRAME_VERSION: u8 = 0x01;
pub const FRAME_HEADER_LEN: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub kind: CodecKind,
    pub channel: ChannelId,
    pub seq: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown codec kind {0}")]
    BadKind(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("frame length field {declared} does not match {actual} payload bytes")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("payload of {0} bytes does not fit a frame")]
    TooLarge(usize),
}

impl DataFrame {
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        frame(&self.payload, self.kind, self.channel, self.seq)
    }
}

pub fn frame(payload: &[u8], kind: CodecKind, channel: ChannelId, seq: u32) -> Result<Vec<u8>, FrameError> {
    let length = u32::try_from(payload.len()).map_err(|_| FrameError::TooLarge(payload.len()))?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&channel.0.to_be_bytes());
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&length.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Total frame size announced by a header, once at least
/// [`FRAME_HEADER_LEN`] bytes are available.
pub fn frame_len(header: &[u8]) -> Option<usize> {
    let len = header.get(10..14)?;
    Some(FRAME_HEADER_LEN + u32::from_be_bytes([len[0], len[1], len[2], len[3]]) as usize)
}

pub fn deframe(buf: &[u8]) -> Result<DataFrame, FrameError> {
    if buf.len() < 2 {
        return Err(FrameError::Truncated);
    }
    if buf[..2] != FRAME_MAGIC {
        return Err(FrameError::BadMagic);
    }
    if buf.len() < 3 {
        return Err(FrameError::Truncated);
    }
    if buf[2] != FRAME_VERSION {
        return Err(FrameError::BadVersion(buf[2]));
    }
    if buf.len() < FRAME_HEADER_LEN {
        return Err(FrameError::Truncated);
    }
    let kind = CodecKind::from_byte(buf[3]).ok_or(FrameError::BadKind(buf[3]))?;
    let channel = ChannelId(u16::from_be_bytes([buf[4], buf[5]]));
    let seq = u32::from_be_bytes([buf[6], buf[7], buf[8], buf[9]]);
    let declared = u32::from_be_bytes([buf[10], buf[11], buf[12], buf[13]]);
    let body = &buf[FRAME_HEADER_LEN..];
    match body.len().cmp(&(declared as usize)) {
        core::cmp::Ordering::Less => Err(FrameError::Truncated),
        core::cmp::Ordering::Greater => Err(FrameError::LengthMismatch { declared, actual: body.len() }),
        core::cmp::Ordering::Equal => Ok(DataFrame { kind, channel, seq, payload: body.to_vec() }),
    }
}
