//! The three data codecs and the framed channel endpoints built on them.
//!
//! Encrypted frames (quantum and classical) carry the plaintext followed by
//! its CRC-32 (IEEE, big-endian) inside the ciphertext, so a receiver whose
//! key pool has drifted out of step detects it instead of delivering
//! garbage. Transparent frames carry the plaintext verbatim.

mod classical;
mod frame;

use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use thiserror::Error;

pub use classical::{
    keystream, BootstrapSecret, ClassicalSession, SessionMode, SessionOffer, DEFAULT_REKEY_AFTER_BYTES,
    SESSION_KEY_BYTES,
};
pub use frame::{deframe, frame, frame_len, DataFrame, FrameError, FRAME_HEADER_LEN, FRAME_MAGIC, FRAME_VERSION};

use crate::keystore::{KeyError, KeyPool, Purpose};
use crate::net::ChannelId;
use crate::SimTime;

/// Codec selector. The discriminants are the wire values of the frame
/// `kind` byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CodecKind {
    Transparent = 0,
    Quantum = 1,
    Classical = 2,
}

impl CodecKind {
    pub const ALL: [CodecKind; 3] = [CodecKind::Transparent, CodecKind::Quantum, CodecKind::Classical];

    pub fn from_byte(b: u8) -> Option<CodecKind> {
        match b {
            0 => Some(CodecKind::Transparent),
            1 => Some(CodecKind::Quantum),
            2 => Some(CodecKind::Classical),
            _ => None,
        }
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::Transparent => "transparent",
            CodecKind::Quantum => "quantum",
            CodecKind::Classical => "classical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Direction {
    Encoder,
    Decoder,
}

/// Address where a codec's coder or decoder accepts traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntrancePoint {
    pub address: Ipv4Addr,
    pub port: u16,
    pub kind: CodecKind,
    pub direction: Direction,
}

impl fmt::Display for EntrancePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}/{}", self.address, self.port, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("key starvation: {available} bits available")]
    KeyStarvation { available: u64 },
    #[error("classical session must be rekeyed")]
    RekeyRequired,
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("integrity check failed")]
    IntegrityFailure,
    #[error("frame for channel {got} arrived at decoder of channel {expected}")]
    WrongChannel { expected: ChannelId, got: ChannelId },
    #[error("frame kind {frame} does not match decoder protection {protection}")]
    KindMismatch { frame: CodecKind, protection: CodecKind },
    #[error("sequence number {got} not after {last}")]
    SeqRegression { last: u32, got: u32 },
    #[error("sequence space exhausted")]
    SeqExhausted,
    #[error("key material: {0}")]
    Key(KeyError),
}

impl From<KeyError> for CodecError {
    fn from(e: KeyError) -> Self {
        match e {
            KeyError::Insufficient { available } => CodecError::KeyStarvation { available },
            other => CodecError::Key(other),
        }
    }
}

/// XOR with fresh pool material; one key byte per data byte, used once.
pub fn otp_encode(plain: &[u8], pool: &mut KeyPool, now: SimTime) -> Result<Vec<u8>, CodecError> {
    if plain.is_empty() {
        return Ok(Vec::new());
    }
    let key = pool.take_material(plain.len(), Purpose::OtpData, now)?;
    Ok(plain.iter().zip(&key).map(|(p, k)| p ^ k).collect())
}

/// XOR is its own inverse; decoding consumes the mirrored pool identically.
pub fn otp_decode(cipher: &[u8], pool: &mut KeyPool, now: SimTime) -> Result<Vec<u8>, CodecError> {
    otp_encode(cipher, pool, now)
}

pub fn transparent_pass(payload: &[u8]) -> Vec<u8> {
    payload.to_vec()
}

pub const CHECKSUM_LEN: usize = 4;

fn seal(plain: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(plain.len() + CHECKSUM_LEN);
    out.extend_from_slice(plain);
    out.extend_from_slice(&crc32fast::hash(plain).to_be_bytes());
    out
}

fn unseal(mut sealed: Vec<u8>) -> Result<Vec<u8>, CodecError> {
    if sealed.len() < CHECKSUM_LEN {
        return Err(CodecError::IntegrityFailure);
    }
    let split = sealed.len() - CHECKSUM_LEN;
    let sum = u32::from_be_bytes([sealed[split], sealed[split + 1], sealed[split + 2], sealed[split + 3]]);
    sealed.truncate(split);
    if crc32fast::hash(&sealed) != sum {
        return Err(CodecError::IntegrityFailure);
    }
    Ok(sealed)
}

/// Key material backing one frame.
pub enum Protection<'a> {
    Transparent,
    Quantum(&'a mut KeyPool),
    Classical(&'a mut ClassicalSession),
}

impl Protection<'_> {
    pub fn kind(&self) -> CodecKind {
        match self {
            Protection::Transparent => CodecKind::Transparent,
            Protection::Quantum(_) => CodecKind::Quantum,
            Protection::Classical(_) => CodecKind::Classical,
        }
    }
}

/// Sending side of a channel: seals, encrypts and frames payloads with a
/// strictly increasing sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelEncoder {
    channel: ChannelId,
    next_seq: Option<u32>,
}

impl ChannelEncoder {
    pub fn new(channel: ChannelId) -> ChannelEncoder {
        ChannelEncoder { channel, next_seq: Some(0) }
    }

    pub fn encode(&mut self, plain: &[u8], protection: Protection<'_>, now: SimTime) -> Result<Vec<u8>, CodecError> {
        let seq = self.next_seq.ok_or(CodecError::SeqExhausted)?;
        let kind = protection.kind();
        let payload = match protection {
            Protection::Transparent => transparent_pass(plain),
            Protection::Quantum(pool) => otp_encode(&seal(plain), pool, now)?,
            Protection::Classical(session) => session.classical_encode(&seal(plain))?,
        };
        let wire = frame(&payload, kind, self.channel, seq)?;
        self.next_seq = seq.checked_add(1);
        Ok(wire)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelDecoder {
    channel: ChannelId,
    last_seq: Option<u32>,
}

impl ChannelDecoder {
    pub fn new(channel: ChannelId) -> ChannelDecoder {
        ChannelDecoder { channel, last_seq: None }
    }

    pub fn decode(&mut self, frame: &DataFrame, protection: Protection<'_>, now: SimTime) -> Result<Vec<u8>, CodecError> {
        if frame.channel != self.channel {
            return Err(CodecError::WrongChannel { expected: self.channel, got: frame.channel });
        }
        if frame.kind != protection.kind() {
            return Err(CodecError::KindMismatch { frame: frame.kind, protection: protection.kind() });
        }
        if let Some(last) = self.last_seq {
            if frame.seq <= last {
                return Err(CodecError::SeqRegression { last, got: frame.seq });
            }
        }
        let plain = match protection {
            Protection::Transparent => transparent_pass(&frame.payload),
            Protection::Quantum(pool) => unseal(otp_decode(&frame.payload, pool, now)?)?,
            Protection::Classical(session) => unseal(session.classical_decode(&frame.payload)?)?,
        };
        self.last_seq = Some(frame.seq);
        Ok(plain)
    }
}
