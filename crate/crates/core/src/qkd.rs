//! Emulated subcarrier-wave QKD transmitter/receiver pairs.
//!
//! The emulator does not simulate photons. Sifted-key rate and QBER are
//! explicit closed-form models calibrated to a single measured operating
//! point (1.63 km of fiber, 1.06 Mbit/s sifted key, 1% QBER):
//!
//! ```text
//! rate(loss, mu, n) = R_cal * (mu / mu_cal) * 10^(-(loss - loss_cal) / 10) * n
//! qber(loss)        = q_cal + k * (10^(loss / 10) - 10^(loss_cal / 10))
//! ```
//!
//! `k` is fixed so that the QBER reaches `qber_ref` at `loss_ref_db`. An
//! intercept-resend eavesdropper pins the QBER at 25%. Each sideband pair is
//! treated as an independent quantum channel with its own full rate.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::net::{ChannelId, LinkId, LinkStatus, LossReport, NodeId, Topology};
use crate::SimTime;

/// Model parameters. `Default` is the calibrated testbed operating point.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct QkdModel {
    pub rate_cal_bps: f64,
    pub loss_cal_db: f64,
    pub mu_cal: f64,
    pub mu_max: f64,
    pub qber_cal: f64,
    pub qber_ref: f64,
    pub loss_ref_db: f64,
    pub qber_eavesdrop: f64,
    pub qber_discard: f64,
    /// Standard deviation of the per-block QBER estimate.
    pub qber_sigma: f64,
    pub block_bytes: usize,
    pub max_sidebands: usize,
}

impl Default for QkdModel {
    fn default() -> Self {
        QkdModel {
            rate_cal_bps: 1.06e6,
            loss_cal_db: 0.326,
            mu_cal: 0.2,
            mu_max: 1.0,
            qber_cal: 0.01,
            qber_ref: 0.05,
            loss_ref_db: 20.0,
            qber_eavesdrop: 0.25,
            qber_discard: 0.11,
            qber_sigma: 0.002,
            block_bytes: 16,
            max_sidebands: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QkdError {
    #[error("loss must be finite and non-negative, got {0}")]
    BadLoss(f64),
    #[error("mean photon number {mu} outside (0, {max}]")]
    BadMu { mu: f64, max: f64 },
    #[error("at least one sideband channel is required")]
    NoSidebands,
    #[error("sideband capacity of {0} channels exhausted")]
    SidebandCapacity(usize),
    #[error("sideband channel {0} is not active")]
    UnknownSideband(u8),
    #[error("QKD pair for channel {0} is halted")]
    Halted(ChannelId),
    #[error("loss report for link {report} does not concern this pair")]
    ForeignReport { report: LinkId },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device {device} is not located at node {node}")]
    WrongNode { device: DeviceId, node: NodeId },
    #[error("devices with roles {0} and {1} cannot form a pair")]
    IncompatibleRoles(QcDeviceRole, QcDeviceRole),
    #[error("link error: {0}")]
    Topology(#[from] crate::net::TopologyError),
    #[error("invalid mean photon policy entry (threshold {threshold}, mu {mu})")]
    BadPolicy { threshold: f64, mu: f64 },
}

impl QkdModel {
    fn check_domain(&self, loss_db: f64, mu: f64) -> Result<(), QkdError> {
        if !loss_db.is_finite() || loss_db < 0.0 {
            return Err(QkdError::BadLoss(loss_db));
        }
        if !(mu > 0.0 && mu <= self.mu_max) {
            return Err(QkdError::BadMu { mu, max: self.mu_max });
        }
        Ok(())
    }

    /// Sifted key rate in bit/s.
    pub fn sifted_rate(&self, loss_db: f64, mu: f64, n_sidebands: usize) -> Result<f64, QkdError> {
        self.check_domain(loss_db, mu)?;
        if n_sidebands == 0 {
            return Err(QkdError::NoSidebands);
        }
        let attenuation = libm::pow(10.0, -(loss_db - self.loss_cal_db) / 10.0);
        Ok(self.rate_cal_bps * (mu / self.mu_cal) * attenuation * n_sidebands as f64)
    }

    /// Slope of the detector-noise QBER term per unit of linear loss.
    pub fn qber_noise_coefficient(&self) -> f64 {
        (self.qber_ref - self.qber_cal)
            / (libm::pow(10.0, self.loss_ref_db / 10.0) - libm::pow(10.0, self.loss_cal_db / 10.0))
    }

    /// Expected QBER. Clamped to `[0, 0.5]`: past one half the key is noise.
    pub fn qber(&self, loss_db: f64, mu: f64, eavesdropper: bool) -> Result<f64, QkdError> {
        self.check_domain(loss_db, mu)?;
        if eavesdropper {
            return Ok(self.qber_eavesdrop);
        }
        let k = self.qber_noise_coefficient();
        let q = self.qber_cal
            + k * (libm::pow(10.0, loss_db / 10.0) - libm::pow(10.0, self.loss_cal_db / 10.0));
        Ok(q.clamp(0.0, 0.5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum QcDeviceRole {
    Transmitter,
    Receiver,
    Transceiver,
}

impl QcDeviceRole {
    fn emits(self) -> bool {
        matches!(self, QcDeviceRole::Transmitter | QcDeviceRole::Transceiver)
    }

    fn receives(self) -> bool {
        matches!(self, QcDeviceRole::Receiver | QcDeviceRole::Transceiver)
    }

    /// Whether two devices can form a key-emitting / key-receiving pair.
    pub fn compatible(self, other: QcDeviceRole) -> bool {
        (self.emits() && other.receives()) || (other.emits() && self.receives())
    }
}

impl fmt::Display for QcDeviceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct DeviceId(pub u16);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// QC devices known to the controller, with their current role.
#[derive(Debug, Clone, Default)]
pub struct DeviceRegistry {
    devices: BTreeMap<DeviceId, (NodeId, QcDeviceRole)>,
}

impl DeviceRegistry {
    pub fn register(&mut self, node: NodeId, device: DeviceId, role: QcDeviceRole) {
        self.devices.insert(device, (node, role));
    }

    pub fn set_role(&mut self, node: NodeId, device: DeviceId, role: QcDeviceRole) -> Result<(), QkdError> {
        let entry = self.devices.get_mut(&device).ok_or(QkdError::UnknownDevice(device))?;
        if entry.0 != node {
            return Err(QkdError::WrongNode { device, node });
        }
        entry.1 = role;
        Ok(())
    }

    pub fn role(&self, device: DeviceId) -> Option<QcDeviceRole> {
        self.devices.get(&device).map(|(_, role)| *role)
    }

    /// Checks that the two devices may be paired under their current roles.
    pub fn check_pair(&self, a: DeviceId, b: DeviceId) -> Result<(), QkdError> {
        let ra = self.role(a).ok_or(QkdError::UnknownDevice(a))?;
        let rb = self.role(b).ok_or(QkdError::UnknownDevice(b))?;
        if ra.compatible(rb) {
            Ok(())
        } else {
            Err(QkdError::IncompatibleRoles(ra, rb))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SidebandChannel {
    pub index: u8,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStatus {
    Operational,
    Compromised,
    Halted,
}

/// Administrator table mapping measured loss to a mean photon number. Each
/// entry is `(loss_threshold_db, mu)`; the entry with the highest threshold
/// not above the measured loss wins.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct MuPolicy {
    rules: Vec<(f64, f64)>,
}

impl MuPolicy {
    pub fn new(mut rules: Vec<(f64, f64)>) -> Result<MuPolicy, QkdError> {
        for &(threshold, mu) in &rules {
            if !threshold.is_finite() || !(mu.is_finite() && mu > 0.0) {
                return Err(QkdError::BadPolicy { threshold, mu });
            }
        }
        rules.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(MuPolicy { rules })
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn select(&self, current: f64, measured_loss_db: Option<f64>, mu_max: f64) -> f64 {
        let Some(loss) = measured_loss_db else {
            return current;
        };
        if self.rules.is_empty() {
            log::debug!("empty mean photon policy, keeping mu={current}");
            return current;
        }
        match self.rules.iter().rev().find(|(threshold, _)| *threshold <= loss) {
            Some(&(_, mu)) => mu.min(mu_max),
            None => current,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlock {
    pub channel: ChannelId,
    pub bits: Vec<u8>,
    pub qber: f64,
    pub produced_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberSample {
    pub channel: ChannelId,
    pub qber: f64,
    pub time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscardEvent {
    pub channel: ChannelId,
    pub qber: f64,
    pub time: SimTime,
    pub bits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    Block(KeyBlock),
    Discard(DiscardEvent),
}

impl Emission {
    pub fn sample(&self) -> QberSample {
        match self {
            Emission::Block(b) => QberSample { channel: b.channel, qber: b.qber, time: b.produced_at },
            Emission::Discard(d) => QberSample { channel: d.channel, qber: d.qber, time: d.time },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generation {
    Emitted(Vec<Emission>),
    /// A hop of the quantum path is down; no key can be produced.
    ChannelDead,
}

/// One emulated transmitter/receiver pair serving a secured channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QcPair {
    pub id: ChannelId,
    pub alice: NodeId,
    pub bob: NodeId,
    /// Fiber the pair was installed on.
    pub link: LinkId,
    /// Links the quantum signal currently traverses; hops past the first
    /// pass through trusted relays.
    pub path: Vec<LinkId>,
    pub mu: f64,
    sidebands: BTreeSet<u8>,
    pub eavesdropper_present: bool,
    pub status: PairStatus,
    carry_bits: f64,
}

impl QcPair {
    pub fn new(id: ChannelId, alice: NodeId, bob: NodeId, link: LinkId, mu: f64) -> QcPair {
        QcPair {
            id,
            alice,
            bob,
            link,
            path: vec![link],
            mu,
            sidebands: BTreeSet::from([1]),
            eavesdropper_present: false,
            status: PairStatus::Operational,
            carry_bits: 0.0,
        }
    }

    pub fn sidebands(&self) -> impl Iterator<Item = SidebandChannel> + '_ {
        self.sidebands.iter().map(|&index| SidebandChannel { index, active: true })
    }

    pub fn n_sidebands(&self) -> usize {
        self.sidebands.len()
    }

    pub fn add_sideband_channel(&mut self, model: &QkdModel) -> Result<SidebandChannel, QkdError> {
        if self.sidebands.len() >= model.max_sidebands {
            return Err(QkdError::SidebandCapacity(model.max_sidebands));
        }
        let index = (1..=u8::MAX)
            .find(|i| !self.sidebands.contains(i))
            .ok_or(QkdError::SidebandCapacity(model.max_sidebands))?;
        self.sidebands.insert(index);
        Ok(SidebandChannel { index, active: true })
    }

    pub fn drop_sideband_channel(&mut self, index: u8) -> Result<(), QkdError> {
        if self.sidebands.remove(&index) {
            Ok(())
        } else {
            Err(QkdError::UnknownSideband(index))
        }
    }

    /// Loss governing the key rate: the worst hop, since every trusted hop
    /// runs its own key exchange.
    pub fn effective_loss_db(&self, topology: &Topology) -> Result<Option<f64>, QkdError> {
        let mut worst: f64 = 0.0;
        for id in &self.path {
            let link = topology.link(*id)?;
            if link.status == LinkStatus::Down {
                return Ok(None);
            }
            worst = worst.max(link.total_loss_db());
        }
        Ok(Some(worst))
    }

    pub fn sifted_rate(&self, model: &QkdModel, loss_db: f64) -> Result<f64, QkdError> {
        if self.sidebands.is_empty() {
            return Ok(0.0);
        }
        model.sifted_rate(loss_db, self.mu, self.sidebands.len())
    }

    /// Runs the pair for `duration_s` of simulated time.
    ///
    /// Produces `floor(rate * duration / (8 * block_bytes))` blocks; the
    /// fractional remainder carries over to the next call. Blocks whose
    /// sampled QBER exceeds the discard threshold come out as
    /// [`DiscardEvent`]s and leave the pair `Compromised`.
    pub fn generate_key_block<R: RngCore + ?Sized>(
        &mut self,
        model: &QkdModel,
        topology: &Topology,
        duration_s: f64,
        now: SimTime,
        rng: &mut R,
    ) -> Result<Generation, QkdError> {
        if self.status == PairStatus::Halted {
            return Err(QkdError::Halted(self.id));
        }
        let Some(loss) = self.effective_loss_db(topology)? else {
            self.carry_bits = 0.0;
            return Ok(Generation::ChannelDead);
        };
        let rate = self.sifted_rate(model, loss)?;
        let block_bits = (8 * model.block_bytes) as f64;
        let bits = rate * duration_s.max(0.0) + self.carry_bits;
        let count = libm::floor(bits / block_bits);
        self.carry_bits = bits - count * block_bits;

        let mean = model.qber(loss, self.mu, self.eavesdropper_present)?;
        let noise = if model.qber_sigma > 0.0 {
            Normal::new(mean, model.qber_sigma).ok()
        } else {
            None
        };
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count as u64 {
            let qber = match &noise {
                Some(n) => n.sample(rng).clamp(0.0, 1.0),
                None => mean,
            };
            if qber > model.qber_discard {
                self.status = PairStatus::Compromised;
                out.push(Emission::Discard(DiscardEvent {
                    channel: self.id,
                    qber,
                    time: now,
                    bits: model.block_bytes * 8,
                }));
            } else {
                self.status = PairStatus::Operational;
                let mut bytes = vec![0u8; model.block_bytes];
                rng.fill_bytes(&mut bytes);
                out.push(Emission::Block(KeyBlock { channel: self.id, bits: bytes, qber, produced_at: now }));
            }
        }
        Ok(Generation::Emitted(out))
    }

    /// Applies the administrator's mean photon table to a fresh loss reading.
    pub fn adjust_mean_photon(
        &mut self,
        report: &LossReport,
        policy: &MuPolicy,
        model: &QkdModel,
    ) -> Result<f64, QkdError> {
        if !self.path.contains(&report.link) {
            return Err(QkdError::ForeignReport { report: report.link });
        }
        self.mu = policy.select(self.mu, report.measured_loss_db(), model.mu_max);
        Ok(self.mu)
    }
}
