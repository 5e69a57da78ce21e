use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use thiserror::Error;

use crate::net::{ChannelId, LinkId, LinkStatus, NodeId, NodeRole, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RouteReason {
    Direct,
    LossOptimal,
    FailoverReserve,
    NoQuantumPath,
}

impl fmt::Display for RouteReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub channel: ChannelId,
    pub path: Vec<LinkId>,
    pub via_trusted: Vec<NodeId>,
    pub reason: RouteReason,
    /// Summed loss of `path`; zero when there is none.
    pub loss_db: f64,
}

impl RouteDecision {
    pub fn has_quantum_path(&self) -> bool {
        self.reason != RouteReason::NoQuantumPath
    }

    pub fn none(channel: ChannelId) -> RouteDecision {
        RouteDecision { channel, path: Vec::new(), via_trusted: Vec::new(), reason: RouteReason::NoQuantumPath, loss_db: 0.0 }
    }
}

impl fmt::Display for RouteDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, l) in self.path.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, "] {}", self.reason)?;
        if !self.via_trusted.is_empty() {
            f.write_str(" via")?;
            for n in &self.via_trusted {
                write!(f, " {n}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("source and destination are both {0}")]
    SameEndpoints(NodeId),
}

#[derive(Debug, Clone)]
struct Label {
    loss: f64,
    links: Vec<LinkId>,
    nodes: Vec<NodeId>,
}

fn rank(a: &Label, b: &Label) -> Ordering {
    a.loss
        .total_cmp(&b.loss)
        .then(a.links.len().cmp(&b.links.len()))
        .then_with(|| a.links.cmp(&b.links))
}

/// Best multi-hop path (intermediates must be trusted relays), ranked by
/// summed loss, then hop count, then link ids.
fn best_relayed(topology: &Topology, src: NodeId, dst: NodeId) -> Option<Label> {
    let mut best: BTreeMap<NodeId, Label> = BTreeMap::new();
    let mut settled: BTreeSet<NodeId> = BTreeSet::new();
    best.insert(src, Label { loss: 0.0, links: Vec::new(), nodes: alloc::vec![src] });
    loop {
        let (&at, _) = best
            .iter()
            .filter(|(n, _)| !settled.contains(*n))
            .min_by(|a, b| rank(a.1, b.1))?;
        if at == dst {
            return best.remove(&dst);
        }
        settled.insert(at);
        let expandable = at == src || topology.role(at) == Some(NodeRole::TrustedRelay);
        if !expandable {
            continue;
        }
        let here = best[&at].clone();
        for link in topology.links().filter(|l| l.status == LinkStatus::Up) {
            let Some(next) = link.other_end(at) else { continue };
            if settled.contains(&next) || next == src || (at == src && next == dst) {
                continue;
            }
            let mut cand = here.clone();
            cand.loss += link.total_loss_db();
            cand.links.push(link.id);
            cand.nodes.push(next);
            match best.get(&next) {
                Some(cur) if rank(cur, &cand) != Ordering::Greater => {}
                _ => {
                    best.insert(next, cand);
                }
            }
        }
    }
}

/// Picks the quantum path for a channel between `src` and `dst`.
///
/// The direct candidate is `primary` when it is up, otherwise the least lossy
/// up single-hop link (a reserve fiber). A relayed path replaces the direct
/// one only when it saves more than `margin_db`.
pub fn compute_route(
    topology: &Topology,
    channel: ChannelId,
    src: NodeId,
    dst: NodeId,
    primary: Option<LinkId>,
    margin_db: f64,
) -> Result<RouteDecision, RouteError> {
    for n in [src, dst] {
        topology.role(n).ok_or(RouteError::UnknownNode(n))?;
    }
    if src == dst {
        return Err(RouteError::SameEndpoints(src));
    }
    let direct_links = || {
        topology
            .links()
            .filter(move |l| l.status == LinkStatus::Up && l.other_end(src) == Some(dst))
    };
    let direct = match primary.and_then(|p| direct_links().find(|l| l.id == p)) {
        Some(l) => Some((l.id, l.total_loss_db(), RouteReason::Direct)),
        None => direct_links()
            .min_by(|a, b| a.total_loss_db().total_cmp(&b.total_loss_db()).then(a.id.cmp(&b.id)))
            .map(|l| {
                let reason = if primary.is_some() { RouteReason::FailoverReserve } else { RouteReason::Direct };
                (l.id, l.total_loss_db(), reason)
            }),
    };
    let relayed = best_relayed(topology, src, dst);
    let via = |label: &Label| label.nodes[1..label.nodes.len() - 1].to_vec();
    let decision = match (direct, relayed) {
        (Some((_, d_loss, _)), Some(alt)) if d_loss - alt.loss > margin_db => RouteDecision {
            channel,
            via_trusted: via(&alt),
            path: alt.links,
            reason: RouteReason::LossOptimal,
            loss_db: alt.loss,
        },
        (Some((id, loss, reason)), _) => {
            RouteDecision { channel, path: alloc::vec![id], via_trusted: Vec::new(), reason, loss_db: loss }
        }
        (None, Some(alt)) => RouteDecision {
            channel,
            via_trusted: via(&alt),
            path: alt.links,
            reason: RouteReason::FailoverReserve,
            loss_db: alt.loss,
        },
        (None, None) => RouteDecision::none(channel),
    };
    Ok(decision)
}
