//! Data frames over real TCP sockets on the loopback interface.
//!
//! Every node gets a listener. The first frame from `a` to `b` opens a
//! connection and announces the sender's node id (two bytes, big endian);
//! after that the stream carries bare data frames, delimited by the
//! length in their own header.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::time::Duration;

use qfabric_core::codec::{frame_len, FRAME_HEADER_LEN};
use qfabric_core::net::NodeId;
use qfabric_core::scenario::{Transport, TransportError};

const IO_TIMEOUT: Duration = Duration::from_secs(5);

pub struct TcpTransport {
    listeners: BTreeMap<NodeId, TcpListener>,
    outgoing: BTreeMap<(NodeId, NodeId), TcpStream>,
    incoming: BTreeMap<(NodeId, NodeId), TcpStream>,
    /// Senders of frames in flight, per receiver, oldest first.
    pending: BTreeMap<NodeId, VecDeque<NodeId>>,
    pub frames: u64,
    pub bytes: u64,
}

fn err(e: io::Error) -> TransportError {
    TransportError(e.to_string())
}

impl TcpTransport {
    /// Binds one ephemeral loopback port per node.
    pub fn bind(nodes: impl IntoIterator<Item = NodeId>) -> io::Result<TcpTransport> {
        let mut listeners = BTreeMap::new();
        for n in nodes {
            listeners.insert(n, TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?);
        }
        Ok(TcpTransport {
            listeners,
            outgoing: BTreeMap::new(),
            incoming: BTreeMap::new(),
            pending: BTreeMap::new(),
            frames: 0,
            bytes: 0,
        })
    }

    pub fn address(&self, node: NodeId) -> Option<SocketAddr> {
        self.listeners.get(&node)?.local_addr().ok()
    }

    fn accept_from(&mut self, at: NodeId, from: NodeId) -> io::Result<&mut TcpStream> {
        while !self.incoming.contains_key(&(at, from)) {
            let listener = self.listeners.get(&at).ok_or_else(|| io::Error::other(format!("no listener for node {at}")))?;
            let (mut s, _) = listener.accept()?;
            s.set_read_timeout(Some(IO_TIMEOUT))?;
            let mut id = [0u8; 2];
            s.read_exact(&mut id)?;
            self.incoming.insert((at, NodeId(u16::from_be_bytes(id))), s);
        }
        Ok(self.incoming.get_mut(&(at, from)).expect("just inserted"))
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, from: NodeId, to: NodeId, wire: Vec<u8>) -> Result<(), TransportError> {
        if !self.outgoing.contains_key(&(from, to)) {
            let addr = self.address(to).ok_or_else(|| TransportError(format!("no listener for node {to}")))?;
            let mut s = TcpStream::connect(addr).map_err(err)?;
            s.set_nodelay(true).map_err(err)?;
            s.set_write_timeout(Some(IO_TIMEOUT)).map_err(err)?;
            s.write_all(&from.0.to_be_bytes()).map_err(err)?;
            self.outgoing.insert((from, to), s);
        }
        let s = self.outgoing.get_mut(&(from, to)).expect("connected above");
        s.write_all(&wire).map_err(err)?;
        self.frames += 1;
        self.bytes += wire.len() as u64;
        self.pending.entry(to).or_default().push_back(from);
        Ok(())
    }

    fn recv(&mut self, at: NodeId) -> Result<Option<Vec<u8>>, TransportError> {
        let Some(from) = self.pending.get_mut(&at).and_then(|q| q.pop_front()) else {
            return Ok(None);
        };
        let s = self.accept_from(at, from).map_err(err)?;
        let mut buf = vec![0u8; FRAME_HEADER_LEN];
        s.read_exact(&mut buf).map_err(err)?;
        let total = frame_len(&buf).ok_or_else(|| TransportError("bad frame header on the wire".into()))?;
        buf.resize(total, 0);
        s.read_exact(&mut buf[FRAME_HEADER_LEN..]).map_err(err)?;
        Ok(Some(buf))
    }
}
