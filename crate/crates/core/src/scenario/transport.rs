use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::net::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

/// Carries encoded data frames between nodes.
pub trait Transport {
    fn send(&mut self, from: NodeId, to: NodeId, wire: Vec<u8>) -> Result<(), TransportError>;
    /// Next frame waiting at `at`, if any.
    fn recv(&mut self, at: NodeId) -> Result<Option<Vec<u8>>, TransportError>;
}

/// Lossless in-order queues, one per receiving node.
#[derive(Debug, Clone, Default)]
pub struct InMemoryTransport {
    queues: BTreeMap<NodeId, VecDeque<Vec<u8>>>,
    pub frames: u64,
    pub bytes: u64,
}

impl Transport for InMemoryTransport {
    fn send(&mut self, _from: NodeId, to: NodeId, wire: Vec<u8>) -> Result<(), TransportError> {
        self.frames += 1;
        self.bytes += wire.len() as u64;
        self.queues.entry(to).or_default().push_back(wire);
        Ok(())
    }

    fn recv(&mut self, at: NodeId) -> Result<Option<Vec<u8>>, TransportError> {
        Ok(self.queues.get_mut(&at).and_then(|q| q.pop_front()))
    }
}
