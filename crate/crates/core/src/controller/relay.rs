use alloc::vec::Vec;

use thiserror::Error;

use super::policy::RelayMode;
use crate::keystore::{KeyError, MirroredPools, Purpose};
use crate::net::{ChannelId, NodeId};
use crate::qkd::KeyBlock;
use crate::SimTime;

/// A channel whose endpoints are joined through one trusted node by two
/// separately keyed segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RelayVia {
    pub node: NodeId,
    /// Segment channels, source side first. Each has the relay as one end.
    pub segments: [ChannelId; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelayPlan {
    pub channel: ChannelId,
    pub relay: NodeId,
    pub segments: [ChannelId; 2],
    pub mode: RelayMode,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelayError {
    #[error("channel {0} is not configured through a relay")]
    NotRelayed(ChannelId),
    #[error("node {0} is not a trusted relay")]
    NotTrusted(NodeId),
    #[error("segment channel {0} is not configured")]
    MissingSegment(ChannelId),
    #[error("segment channel {segment} does not terminate at relay {relay}")]
    SegmentMismatch { segment: ChannelId, relay: NodeId },
    #[error("segment channel {0} has no key material")]
    EmptyPool(ChannelId),
    #[error("key relay: {0}")]
    Key(#[from] KeyError),
}

/// What one key-relay step moved and what the relay saw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRelayRecord {
    pub channel: ChannelId,
    pub bytes: usize,
    /// `k1 ^ k2` as announced by the relay; reveals neither key alone.
    pub published: Vec<u8>,
}

/// Moves `bytes` of end-to-end key through the relay.
///
/// The source and the relay share `k1` (first segment), the relay and the
/// sink share `k2` (second segment). The relay announces `k1 ^ k2`; the sink
/// recovers `k1`, which becomes end-to-end key. Both segment pools are
/// charged `bytes` on each side; nothing is taken unless all four sides can
/// pay.
pub fn relay_key(
    channel: ChannelId,
    first: &mut MirroredPools,
    second: &mut MirroredPools,
    end_to_end: &mut MirroredPools,
    bytes: usize,
    now: SimTime,
) -> Result<KeyRelayRecord, RelayError> {
    if bytes == 0 {
        return Err(RelayError::Key(KeyError::ZeroLength));
    }
    let need = bytes as u64 * 8;
    for pool in [&first.near, &first.far, &second.near, &second.far] {
        if pool.pool_level() < need {
            return Err(RelayError::Key(KeyError::Insufficient { available: pool.pool_level() }));
        }
    }
    let k1_source = first.near.take_material(bytes, Purpose::KeyRelay, now)?;
    let k1_relay = first.far.take_material(bytes, Purpose::KeyRelay, now)?;
    let k2_relay = second.near.take_material(bytes, Purpose::KeyRelay, now)?;
    let k2_sink = second.far.take_material(bytes, Purpose::KeyRelay, now)?;
    let published: Vec<u8> = k1_relay.iter().zip(&k2_relay).map(|(a, b)| a ^ b).collect();
    let k1_sink: Vec<u8> = published.iter().zip(&k2_sink).map(|(p, k)| p ^ k).collect();
    end_to_end.near.push_block(KeyBlock { channel, bits: k1_source, qber: 0.0, produced_at: now });
    end_to_end.far.push_block(KeyBlock { channel, bits: k1_sink, qber: 0.0, produced_at: now });
    Ok(KeyRelayRecord { channel, bytes, published })
}
