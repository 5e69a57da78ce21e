use core::fmt;

use crate::codec::CodecKind;
use crate::net::ChannelId;

/// Protection level of a channel, ordered by security.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EncryptionMode {
    Transparent,
    ClassicalOnly,
    QuantumWrappedClassical,
    DirectOtp,
}

impl EncryptionMode {
    pub const ALL: [EncryptionMode; 4] = [
        EncryptionMode::Transparent,
        EncryptionMode::ClassicalOnly,
        EncryptionMode::QuantumWrappedClassical,
        EncryptionMode::DirectOtp,
    ];

    /// Modes that spend quantum key material.
    pub fn is_quantum(self) -> bool {
        matches!(self, EncryptionMode::DirectOtp | EncryptionMode::QuantumWrappedClassical)
    }

    pub fn codec(self) -> CodecKind {
        match self {
            EncryptionMode::DirectOtp => CodecKind::Quantum,
            EncryptionMode::QuantumWrappedClassical | EncryptionMode::ClassicalOnly => CodecKind::Classical,
            EncryptionMode::Transparent => CodecKind::Transparent,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncryptionMode::Transparent => "Transparent",
            EncryptionMode::ClassicalOnly => "ClassicalOnly",
            EncryptionMode::QuantumWrappedClassical => "QuantumWrappedClassical",
            EncryptionMode::DirectOtp => "DirectOtp",
        }
    }

    pub fn parse(s: &str) -> Option<EncryptionMode> {
        EncryptionMode::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for EncryptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Qos {
    SecurityFirst,
    BandwidthFirst,
    ExplicitCodec(CodecKind),
}

/// How a channel crossing a trusted node is served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum RelayMode {
    /// The relay decrypts with the first segment's key and re-encrypts with
    /// the second's.
    #[default]
    DataRelay,
    /// Data travels direct; the relay only forwards key material.
    KeyRelay,
}

pub const DEFAULT_DIRECT_PREFERENCE_MARGIN_DB: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelPolicy {
    pub channel: ChannelId,
    #[cfg_attr(feature = "serde", serde(default))]
    pub critical: bool,
    pub qos: Qos,
    /// Above this many bit/s, one-time pad is not attempted.
    pub traffic_threshold_bps: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_margin"))]
    pub direct_preference_margin_db: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub relay_mode: RelayMode,
}

#[cfg(feature = "serde")]
fn default_margin() -> f64 {
    DEFAULT_DIRECT_PREFERENCE_MARGIN_DB
}

impl ChannelPolicy {
    pub fn new(channel: ChannelId, qos: Qos) -> ChannelPolicy {
        ChannelPolicy {
            channel,
            critical: false,
            qos,
            traffic_threshold_bps: u64::MAX,
            direct_preference_margin_db: DEFAULT_DIRECT_PREFERENCE_MARGIN_DB,
            relay_mode: RelayMode::DataRelay,
        }
    }

    pub fn critical(mut self) -> ChannelPolicy {
        self.critical = true;
        self
    }
}

/// Everything `select_mode` looks at besides the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeInputs {
    pub pool_bits: u64,
    /// Current data rate, bit/s.
    pub traffic_bps: f64,
    /// Current key arrival rate, bit/s.
    pub refill_bps: f64,
    pub quantum_path_alive: bool,
}

/// The mode decision table.
///
/// | condition (first match wins)                         | mode                    |
/// |------------------------------------------------------|-------------------------|
/// | explicit transparent, not (critical and keys usable) | Transparent             |
/// | no live quantum path, or empty pool                  | ClassicalOnly           |
/// | explicit transparent (critical)                      | QuantumWrappedClassical |
/// | explicit quantum                                     | DirectOtp               |
/// | explicit classical                                   | QuantumWrappedClassical |
/// | refill ≥ traffic and traffic ≤ threshold             | DirectOtp               |
/// | security-first, or critical                          | QuantumWrappedClassical |
/// | bandwidth-first                                      | ClassicalOnly           |
///
/// "Keys usable" means a live quantum path and a non-empty pool.
pub fn select_mode(policy: &ChannelPolicy, inputs: &ModeInputs) -> EncryptionMode {
    let keys_usable = inputs.quantum_path_alive && inputs.pool_bits > 0;
    if policy.qos == Qos::ExplicitCodec(CodecKind::Transparent) && !(policy.critical && keys_usable) {
        return EncryptionMode::Transparent;
    }
    if !keys_usable {
        return EncryptionMode::ClassicalOnly;
    }
    let otp_sustainable =
        inputs.refill_bps >= inputs.traffic_bps && inputs.traffic_bps <= policy.traffic_threshold_bps as f64;
    match policy.qos {
        Qos::ExplicitCodec(CodecKind::Transparent) => EncryptionMode::QuantumWrappedClassical,
        Qos::ExplicitCodec(CodecKind::Quantum) => EncryptionMode::DirectOtp,
        Qos::ExplicitCodec(CodecKind::Classical) => EncryptionMode::QuantumWrappedClassical,
        _ if otp_sustainable => EncryptionMode::DirectOtp,
        Qos::SecurityFirst => EncryptionMode::QuantumWrappedClassical,
        Qos::BandwidthFirst if policy.critical => EncryptionMode::QuantumWrappedClassical,
        Qos::BandwidthFirst => EncryptionMode::ClassicalOnly,
    }
}

/// Upgrades into a quantum mode wait until the pool holds `watermark` bits,
/// so a channel sitting at the starvation edge does not flap.
pub fn apply_watermark(
    current: EncryptionMode,
    proposed: EncryptionMode,
    pool_bits: u64,
    watermark: u64,
) -> EncryptionMode {
    if proposed > current && proposed.is_quantum() && pool_bits < watermark {
        current
    } else {
        proposed
    }
}
