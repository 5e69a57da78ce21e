//! Network topology, fiber loss model, emulated reflectometer and fault
//! injection.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use thiserror::Error;

use crate::SimTime;

/// Default single-mode fiber attenuation.
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.2;

/// Default reflectometer noise bound (uniform, symmetric).
pub const DEFAULT_NOISE_BOUND_DB: f64 = 0.05;

macro_rules! small_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
        #[cfg_attr(feature = "serde", serde(transparent))]
        pub struct $name(pub u16);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

small_id!(
    /// A network node.
    NodeId
);
small_id!(
    /// A fiber link between two nodes.
    LinkId
);
small_id!(
    /// A secured end-to-end channel. Channel ids double as the channel number
    /// used by REST requests and the `channel` field of data frames.
    ChannelId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum NodeRole {
    Endpoint,
    TrustedRelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LinkStatus {
    Up,
    Degraded,
    Down,
}

impl fmt::Display for LinkStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkStatus::Up => "up",
            LinkStatus::Degraded => "degraded",
            LinkStatus::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    pub id: LinkId,
    pub endpoints: (NodeId, NodeId),
    pub length_km: f64,
    pub base_loss_db: f64,
    pub extra_loss_db: f64,
    pub status: LinkStatus,
}

impl LinkState {
    pub fn total_loss_db(&self) -> f64 {
        self.base_loss_db + self.extra_loss_db
    }

    pub fn connects(&self, node: NodeId) -> bool {
        self.endpoints.0 == node || self.endpoints.1 == node
    }

    /// The endpoint opposite to `node`, if `node` is one of the two.
    pub fn other_end(&self, node: NodeId) -> Option<NodeId> {
        if self.endpoints.0 == node {
            Some(self.endpoints.1)
        } else if self.endpoints.1 == node {
            Some(self.endpoints.0)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinkSpec {
    pub id: LinkId,
    pub endpoints: (NodeId, NodeId),
    pub length_km: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_attenuation"))]
    pub attenuation_db_per_km: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub insertion_db: f64,
}

#[cfg(feature = "serde")]
fn default_attenuation() -> f64 {
    DEFAULT_ATTENUATION_DB_PER_KM
}

impl LinkSpec {
    /// A link with the default attenuation and no insertion loss.
    pub fn new(id: u16, a: u16, b: u16, length_km: f64) -> LinkSpec {
        LinkSpec {
            id: LinkId(id),
            endpoints: (NodeId(a), NodeId(b)),
            length_km,
            attenuation_db_per_km: DEFAULT_ATTENUATION_DB_PER_KM,
            insertion_db: 0.0,
        }
    }

    /// A zero-length link whose whole loss is the insertion loss. Handy for
    /// scenarios that talk about loss directly.
    pub fn with_loss(id: u16, a: u16, b: u16, loss_db: f64) -> LinkSpec {
        LinkSpec {
            id: LinkId(id),
            endpoints: (NodeId(a), NodeId(b)),
            length_km: 0.0,
            attenuation_db_per_km: DEFAULT_ATTENUATION_DB_PER_KM,
            insertion_db: loss_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("duplicate link id {0}")]
    DuplicateLink(LinkId),
    #[error("link {link} references unknown node {node}")]
    UnknownNode { link: LinkId, node: NodeId },
    #[error("link {0} connects a node to itself")]
    SelfLoop(LinkId),
    #[error("link {0} has a negative or non-finite length, attenuation or insertion loss")]
    InvalidParameter(LinkId),
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("unknown node {0}")]
    NoSuchNode(NodeId),
    #[error("loss increment must be finite and non-negative, got {0}")]
    NegativeLoss(f64),
    #[error("links {0} and {1} do not form a connected chain")]
    Disconnected(LinkId, LinkId),
    #[error("link {0} is down")]
    LinkDown(LinkId),
    #[error("fault must be `cut`, `clear` or `add <db>`")]
    BadFault,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Fault {
    Cut,
    AddLoss(f64),
    Clear,
}

impl core::str::FromStr for Fault {
    type Err = TopologyError;

    /// Accepts `cut`, `clear` and `add <db>`.
    fn from_str(s: &str) -> Result<Fault, TopologyError> {
        let s = s.trim();
        match s {
            "cut" => return Ok(Fault::Cut),
            "clear" => return Ok(Fault::Clear),
            _ => {}
        }
        let db = s
            .strip_prefix("add")
            .filter(|rest| rest.starts_with(char::is_whitespace))
            .and_then(|rest| rest.trim().parse::<f64>().ok())
            .ok_or(TopologyError::BadFault)?;
        if !db.is_finite() || db < 0.0 {
            return Err(TopologyError::NegativeLoss(db));
        }
        Ok(Fault::AddLoss(db))
    }
}

/// Reflectometer reading. A cut fiber reports no number at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossReading {
    Measured(f64),
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub link: LinkId,
    pub reading: LossReading,
    pub timestamp: SimTime,
}

impl LossReport {
    pub fn measured_loss_db(&self) -> Option<f64> {
        match self.reading {
            LossReading::Measured(db) => Some(db),
            LossReading::Unreachable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: BTreeMap<NodeId, NodeRole>,
    links: BTreeMap<LinkId, LinkState>,
}

impl Topology {
    pub fn build(spec: &TopologySpec) -> Result<Topology, TopologyError> {
        let mut nodes = BTreeMap::new();
        for node in &spec.nodes {
            if nodes.insert(node.id, node.role).is_some() {
                return Err(TopologyError::DuplicateNode(node.id));
            }
        }
        let mut links = BTreeMap::new();
        for link in &spec.links {
            let (a, b) = link.endpoints;
            for end in [a, b] {
                if !nodes.contains_key(&end) {
                    return Err(TopologyError::UnknownNode { link: link.id, node: end });
                }
            }
            if a == b {
                return Err(TopologyError::SelfLoop(link.id));
            }
            let params = [link.length_km, link.attenuation_db_per_km, link.insertion_db];
            if params.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(TopologyError::InvalidParameter(link.id));
            }
            let state = LinkState {
                id: link.id,
                endpoints: link.endpoints,
                length_km: link.length_km,
                base_loss_db: link.length_km * link.attenuation_db_per_km + link.insertion_db,
                extra_loss_db: 0.0,
                status: LinkStatus::Up,
            };
            if links.insert(link.id, state).is_some() {
                return Err(TopologyError::DuplicateLink(link.id));
            }
        }
        Ok(Topology { nodes, links })
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeRole)> + '_ {
        self.nodes.iter().map(|(id, role)| (*id, *role))
    }

    pub fn role(&self, node: NodeId) -> Option<NodeRole> {
        self.nodes.get(&node).copied()
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkState> {
        self.links.values()
    }

    pub fn link(&self, id: LinkId) -> Result<&LinkState, TopologyError> {
        self.links.get(&id).ok_or(TopologyError::UnknownLink(id))
    }

    fn link_mut(&mut self, id: LinkId) -> Result<&mut LinkState, TopologyError> {
        self.links.get_mut(&id).ok_or(TopologyError::UnknownLink(id))
    }

    /// Emulated reflectometer: the link's total loss plus uniform noise in
    /// `[-noise_bound_db, +noise_bound_db]`.
    pub fn measure_loss<R: Rng + ?Sized>(
        &self,
        id: LinkId,
        noise_bound_db: f64,
        rng: &mut R,
        now: SimTime,
    ) -> Result<LossReport, TopologyError> {
        let link = self.link(id)?;
        let reading = if link.status == LinkStatus::Down {
            LossReading::Unreachable
        } else {
            let noise = if noise_bound_db > 0.0 {
                rng.random_range(-noise_bound_db..=noise_bound_db)
            } else {
                0.0
            };
            LossReading::Measured(link.total_loss_db() + noise)
        };
        Ok(LossReport { link: id, reading, timestamp: now })
    }

    pub fn inject_fault(&mut self, id: LinkId, fault: Fault) -> Result<&LinkState, TopologyError> {
        let link = self.link_mut(id)?;
        match fault {
            Fault::Cut => link.status = LinkStatus::Down,
            Fault::AddLoss(db) => {
                if !db.is_finite() || db < 0.0 {
                    return Err(TopologyError::NegativeLoss(db));
                }
                link.extra_loss_db += db;
            }
            Fault::Clear => {
                link.extra_loss_db = 0.0;
                link.status = LinkStatus::Up;
            }
        }
        Ok(link)
    }

    pub fn set_status(&mut self, id: LinkId, status: LinkStatus) -> Result<(), TopologyError> {
        self.link_mut(id)?.status = status;
        Ok(())
    }

    /// Overwrites the excess loss above the link's base loss.
    pub fn set_extra_loss(&mut self, id: LinkId, db: f64) -> Result<(), TopologyError> {
        if !db.is_finite() || db < 0.0 {
            return Err(TopologyError::NegativeLoss(db));
        }
        self.link_mut(id)?.extra_loss_db = db;
        Ok(())
    }

    /// Sum of total loss over a chain of links.
    pub fn path_loss(&self, path: &[LinkId]) -> Result<f64, TopologyError> {
        self.walk(path)?;
        let mut total = 0.0;
        for id in path {
            total += self.link(*id)?.total_loss_db();
        }
        Ok(total)
    }

    /// Node sequence traversed by a chain of links, validating that the links
    /// exist, are not down and are joined end to end.
    pub fn walk(&self, path: &[LinkId]) -> Result<Vec<NodeId>, TopologyError> {
        let Some((first, rest)) = path.split_first() else {
            return Ok(Vec::new());
        };
        let mut states = Vec::with_capacity(path.len());
        for id in path {
            let link = self.link(*id)?;
            if link.status == LinkStatus::Down {
                return Err(TopologyError::LinkDown(*id));
            }
            states.push(link);
        }
        let head = states[0];
        let orientations = [head.endpoints, (head.endpoints.1, head.endpoints.0)];
        let mut last_err = None;
        for (start, next) in orientations {
            let mut nodes = Vec::with_capacity(path.len() + 1);
            nodes.push(start);
            nodes.push(next);
            let mut at = next;
            let mut prev = *first;
            let mut ok = true;
            for (link, id) in states[1..].iter().zip(rest) {
                match link.other_end(at) {
                    Some(n) => {
                        nodes.push(n);
                        at = n;
                        prev = *id;
                    }
                    None => {
                        last_err = Some(TopologyError::Disconnected(prev, *id));
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                return Ok(nodes);
            }
        }
        Err(last_err.unwrap_or(TopologyError::Disconnected(*first, *first)))
    }
}
