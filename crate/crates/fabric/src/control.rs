//! Switch control connections over TCP.
//!
//! [`ControlHub`] is the controller side: one listener per node, a queue of
//! outgoing FLOW_MODs per node that survives disconnects, and a periodic
//! FLOW_STATS poll whose byte counters feed the controller's traffic
//! estimate. [`SwitchAgent`] is the switch side: it keeps dialing the
//! controller with exponential backoff and, while disconnected, keeps
//! forwarding with the last table it was given.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use qfabric_core::flow::wire::{decode_control, encode_control, message_len, CONTROL_HEADER_LEN};
use qfabric_core::flow::{ControlMessage, FlowMod, FlowSwitch, MessageBody};
use qfabric_core::net::{ChannelId, NodeId};
use qfabric_core::SimTime;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use crate::service::ServiceHandle;

/// Reads one control message; `None` on a clean close.
pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut buf = vec![0u8; CONTROL_HEADER_LEN];
    match r.read_exact(&mut buf).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let total = message_len(&buf).unwrap_or(0).max(CONTROL_HEADER_LEN);
    buf.resize(total, 0);
    r.read_exact(&mut buf[CONTROL_HEADER_LEN..]).await?;
    Ok(Some(buf))
}

fn encode(msg: &ControlMessage) -> io::Result<Vec<u8>> {
    encode_control(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))
}

#[derive(Default)]
struct Outbox {
    queue: Mutex<VecDeque<ControlMessage>>,
    notify: Notify,
}

pub struct ControlHub {
    outboxes: BTreeMap<NodeId, Outbox>,
    /// Sending node of every channel; only its counters count as traffic.
    encoders: BTreeMap<ChannelId, NodeId>,
    counters: Mutex<BTreeMap<(NodeId, u64), u64>>,
    xid: AtomicU32,
    errors: AtomicU64,
    stats_period: Duration,
}

impl ControlHub {
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        encoders: BTreeMap<ChannelId, NodeId>,
        stats_period: Duration,
    ) -> Arc<ControlHub> {
        Arc::new(ControlHub {
            outboxes: nodes.into_iter().map(|n| (n, Outbox::default())).collect(),
            encoders,
            counters: Mutex::new(BTreeMap::new()),
            xid: AtomicU32::new(0),
            errors: AtomicU64::new(0),
            stats_period,
        })
    }

    fn message(&self, body: MessageBody) -> ControlMessage {
        ControlMessage::new(self.xid.fetch_add(1, Ordering::Relaxed).wrapping_add(1), body)
    }

    /// Queues a FLOW_MOD; it is delivered whenever the node is connected.
    pub fn send_flow_mod(&self, node: NodeId, flow_mod: FlowMod) {
        let Some(out) = self.outboxes.get(&node) else {
            log::warn!("flow mod for node {node}, which has no switch");
            return;
        };
        let msg = self.message(MessageBody::FlowMod(flow_mod));
        out.queue.lock().expect("outbox lock").push_back(msg);
        out.notify.notify_one();
    }

    pub fn queued(&self, node: NodeId) -> usize {
        self.outboxes.get(&node).map_or(0, |o| o.queue.lock().expect("outbox lock").len())
    }

    /// ERROR replies received from switches.
    pub fn errors(&self) -> u64 {
        self.errors.load(Ordering::Relaxed)
    }

    /// Accepts switch connections for `node`, one at a time, forever.
    pub fn serve(self: Arc<Self>, node: NodeId, listener: TcpListener, service: ServiceHandle) -> JoinHandle<()> {
        tokio::spawn(async move {
            loop {
                let (stream, peer) = match listener.accept().await {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("node {node} control accept: {e}");
                        continue;
                    }
                };
                log::info!("switch {node} connected from {peer}");
                if let Err(e) = self.session(node, stream, &service).await {
                    log::warn!("switch {node}: {e}");
                }
                log::info!("switch {node} disconnected");
            }
        })
    }

    async fn session(&self, node: NodeId, stream: TcpStream, service: &ServiceHandle) -> io::Result<()> {
        let Some(out) = self.outboxes.get(&node) else {
            return Err(io::Error::other(format!("node {node} has no switch")));
        };
        stream.set_nodelay(true)?;
        let (mut rd, mut wr) = stream.into_split();
        let (tx, mut incoming) = mpsc::channel(64);
        let reader = tokio::spawn(async move {
            loop {
                match read_message(&mut rd).await {
                    Ok(Some(buf)) => {
                        if tx.send(buf).await.is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::debug!("control read: {e}");
                        break;
                    }
                }
            }
        });
        wr.write_all(&encode(&self.message(MessageBody::Hello))?).await?;
        let mut poll = tokio::time::interval(self.stats_period);
        let result = loop {
            // drain the queue, dropping a message only once it is written
            loop {
                let next = out.queue.lock().expect("outbox lock").front().cloned();
                let Some(msg) = next else { break };
                wr.write_all(&encode(&msg)?).await?;
                out.queue.lock().expect("outbox lock").pop_front();
            }
            tokio::select! {
                _ = out.notify.notified() => {}
                _ = poll.tick() => {
                    wr.write_all(&encode(&self.message(MessageBody::FlowStatsRequest))?).await?;
                }
                buf = incoming.recv() => {
                    let Some(buf) = buf else { break Ok(()) };
                    self.on_message(node, &buf, service).await;
                }
            }
        };
        reader.abort();
        result
    }

    async fn on_message(&self, node: NodeId, buf: &[u8], service: &ServiceHandle) {
        let msg = match decode_control(buf) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("switch {node} sent an undecodable message: {e}");
                self.errors.fetch_add(1, Ordering::Relaxed);
                return;
            }
        };
        match msg.body {
            MessageBody::Error { code, .. } => {
                log::warn!("switch {node} rejected xid {}: error {}", msg.xid, code.0);
                self.errors.fetch_add(1, Ordering::Relaxed);
            }
            MessageBody::FlowStatsReply(stats) => {
                let mut deltas = Vec::new();
                {
                    let mut counters = self.counters.lock().expect("counter lock");
                    for s in stats {
                        let ch = ChannelId((s.cookie >> 32) as u16);
                        if self.encoders.get(&ch) != Some(&node) {
                            continue;
                        }
                        let last = counters.insert((node, s.cookie), s.bytes).unwrap_or(0);
                        if s.bytes > last {
                            deltas.push((ch, s.bytes - last));
                        }
                    }
                }
                for (ch, bytes) in deltas {
                    if let Err(e) = service.traffic(ch, bytes).await {
                        log::warn!("traffic sample for channel {ch}: {e}");
                    }
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Backoff {
        Backoff { initial: Duration::from_millis(100), max: Duration::from_secs(5) }
    }
}

pub struct SwitchAgent {
    pub node: NodeId,
    pub controller: SocketAddr,
    pub backoff: Backoff,
}

#[derive(Clone)]
pub struct AgentHandle {
    pub switch: Arc<Mutex<FlowSwitch>>,
    sessions: Arc<AtomicU64>,
}

impl AgentHandle {
    /// Controller sessions established so far.
    pub fn sessions(&self) -> u64 {
        self.sessions.load(Ordering::Relaxed)
    }

    pub fn rule_count(&self) -> usize {
        self.switch.lock().expect("switch lock").table().len()
    }
}

impl SwitchAgent {
    pub fn spawn(self) -> (AgentHandle, JoinHandle<()>) {
        let handle = AgentHandle { switch: Arc::new(Mutex::new(FlowSwitch::new())), sessions: Arc::new(AtomicU64::new(0)) };
        let h = handle.clone();
        let task = tokio::spawn(async move { self.run(h).await });
        (handle, task)
    }

    async fn run(self, h: AgentHandle) {
        let started = Instant::now();
        let mut delay = self.backoff.initial;
        loop {
            match TcpStream::connect(self.controller).await {
                Ok(stream) => {
                    delay = self.backoff.initial;
                    h.sessions.fetch_add(1, Ordering::Relaxed);
                    if let Err(e) = session(stream, &h.switch, started).await {
                        log::debug!("switch {}: {e}", self.node);
                    }
                    log::warn!(
                        "switch {} lost its controller, keeping {} rules",
                        self.node,
                        h.switch.lock().expect("switch lock").table().len()
                    );
                }
                Err(e) => log::debug!("switch {} cannot reach {}: {e}", self.node, self.controller),
            }
            tokio::time::sleep(delay).await;
            delay = (delay * 2).min(self.backoff.max);
        }
    }
}

async fn session(stream: TcpStream, switch: &Mutex<FlowSwitch>, started: Instant) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let (mut rd, mut wr) = stream.into_split();
    wr.write_all(&encode(&ControlMessage::new(0, MessageBody::Hello))?).await?;
    while let Some(buf) = read_message(&mut rd).await? {
        let now = SimTime(started.elapsed().as_micros() as u64);
        let reply = switch.lock().expect("switch lock").handle_bytes(&buf, now);
        if let Some(reply) = reply {
            wr.write_all(&reply).await?;
        }
    }
    Ok(())
}
