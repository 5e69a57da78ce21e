//! Per-channel quantum key pools with strict consumption accounting.
//!
//! A pool hands out key bytes in FIFO order, never the same byte twice, and
//! either fills a request completely or not at all. Every successful take is
//! appended to a consumption ledger.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::net::ChannelId;
use crate::qkd::KeyBlock;
use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    OtpData,
    SessionKeyWrap,
    /// Segment key spent by a trusted relay to forward end-to-end key.
    KeyRelay,
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Purpose::OtpData => "otp-data",
            Purpose::SessionKeyWrap => "session-key-wrap",
            Purpose::KeyRelay => "key-relay",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsumptionRecord {
    pub channel: ChannelId,
    pub bytes: usize,
    pub purpose: Purpose,
    pub time: SimTime,
}

impl fmt::Display for ConsumptionRecord {
    /// One ledger line: `time channel bytes purpose`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.time, self.channel, self.bytes, self.purpose)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KeyError {
    #[error("empty key")]
    Empty,
    #[error("invalid hex key: {0}")]
    InvalidHex(hex::FromHexError),
    #[error("requested zero bytes of key material")]
    ZeroLength,
    #[error("insufficient key material: {available} bits available")]
    Insufficient { available: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyPool {
    channel: ChannelId,
    blocks: VecDeque<KeyBlock>,
    /// Bytes already consumed from the front block.
    head_offset: usize,
    available_bits: u64,
    consumed_bits_total: u64,
    pushed_bits_total: u64,
    ledger: Vec<ConsumptionRecord>,
}

impl KeyPool {
    pub fn new(channel: ChannelId) -> KeyPool {
        KeyPool {
            channel,
            blocks: VecDeque::new(),
            head_offset: 0,
            available_bits: 0,
            consumed_bits_total: 0,
            pushed_bits_total: 0,
            ledger: Vec::new(),
        }
    }

    pub fn channel(&self) -> ChannelId {
        self.channel
    }

    pub fn push_block(&mut self, block: KeyBlock) -> u64 {
        let bits = block.bits.len() as u64 * 8;
        if bits == 0 {
            return 0;
        }
        self.available_bits += bits;
        self.pushed_bits_total += bits;
        self.blocks.push_back(block);
        bits
    }

    /// Ingests a key in hexadecimal form, as uploaded by a QC device.
    pub fn push_key_hex(&mut self, hex_key: &str, now: SimTime) -> Result<u64, KeyError> {
        let bytes = decode_hex_key(hex_key)?;
        Ok(self.push_block(KeyBlock { channel: self.channel, bits: bytes, qber: 0.0, produced_at: now }))
    }

    /// Takes exactly `n_bytes` of key material in FIFO order, or nothing.
    pub fn take_material(&mut self, n_bytes: usize, purpose: Purpose, now: SimTime) -> Result<Vec<u8>, KeyError> {
        if n_bytes == 0 {
            return Err(KeyError::ZeroLength);
        }
        let wanted_bits = n_bytes as u64 * 8;
        if self.available_bits < wanted_bits {
            return Err(KeyError::Insufficient { available: self.available_bits });
        }
        let mut out = Vec::with_capacity(n_bytes);
        while out.len() < n_bytes {
            let Some(front) = self.blocks.front() else {
                unreachable!("available_bits accounts for every queued byte");
            };
            let chunk = &front.bits[self.head_offset..];
            let take = chunk.len().min(n_bytes - out.len());
            out.extend_from_slice(&chunk[..take]);
            self.head_offset += take;
            if self.head_offset == front.bits.len() {
                self.blocks.pop_front();
                self.head_offset = 0;
            }
        }
        self.available_bits -= wanted_bits;
        self.consumed_bits_total += wanted_bits;
        self.ledger.push(ConsumptionRecord { channel: self.channel, bytes: n_bytes, purpose, time: now });
        Ok(out)
    }

    pub fn pool_level(&self) -> u64 {
        self.available_bits
    }

    pub fn consumed_bits_total(&self) -> u64 {
        self.consumed_bits_total
    }

    pub fn pushed_bits_total(&self) -> u64 {
        self.pushed_bits_total
    }

    pub fn ledger(&self) -> &[ConsumptionRecord] {
        &self.ledger
    }
}

pub fn decode_hex_key(hex_key: &str) -> Result<Vec<u8>, KeyError> {
    let trimmed = hex_key.trim();
    if trimmed.is_empty() {
        return Err(KeyError::Empty);
    }
    hex::decode(trimmed).map_err(KeyError::InvalidHex)
}

/// The two ends of a secured channel hold identical pools fed by the same
/// key blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MirroredPools {
    pub near: KeyPool,
    pub far: KeyPool,
}

impl MirroredPools {
    pub fn new(channel: ChannelId) -> MirroredPools {
        MirroredPools { near: KeyPool::new(channel), far: KeyPool::new(channel) }
    }

    pub fn push_block(&mut self, block: KeyBlock) -> u64 {
        self.far.push_block(block.clone());
        self.near.push_block(block)
    }

    pub fn push_key_hex(&mut self, hex_key: &str, now: SimTime) -> Result<u64, KeyError> {
        let bytes = decode_hex_key(hex_key)?;
        let channel = self.near.channel();
        Ok(self.push_block(KeyBlock { channel, bits: bytes, qber: 0.0, produced_at: now }))
    }

    /// Level of the sending side; the receiving side only lags while a frame
    /// is in flight.
    pub fn level(&self) -> u64 {
        self.near.pool_level()
    }
}
