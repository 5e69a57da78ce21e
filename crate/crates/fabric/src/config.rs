//! Scenario files.
//!
//! A scenario is one TOML document. Top-level keys:
//!
//! | key | meaning |
//! |---|---|
//! | `name`, `description` | labels |
//! | `seed` | RNG seed, default 1 |
//! | `duration_s`, `tick_s` | simulated run length and step (default 0.1 s) |
//! | `measure_every_s` | reflectometer period, 0 = every tick |
//! | `loss_noise_db` | uniform measurement noise bound |
//! | `dead_rate_bps` | expected key rate under which a QKD pair counts as dead |
//! | `[topology]` | `nodes = [{id, role}]`, `links = [{id, endpoints, length_km, attenuation_db_per_km, insertion_db}]` |
//! | `[model]` | QKD model parameters |
//! | `[controller]` | `channels`, `entrance_points`, thresholds |
//! | `[[pairs]]` | `channel`, `link`, `sidebands`, `eavesdropper` |
//! | `[[streams]]` | `name`, `channel`, `rate_bps`, `frame_bytes`, `start_s`, `stop_s` |
//! | `[[timeline]]` | `at_s` plus `do = fault / eavesdrop / stream-rate / qchannel-status / qkey / add-sideband / drop-sideband` |
//! | `[[expect]]` | `check = final-mode / transition / only-codec / min-frames / final-route` |
//!
//! The files under `fixtures/` are complete examples.

use std::fs;
use std::path::{Path, PathBuf};

use qfabric_core::scenario::Scenario;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("no bundled scenario named `{0}`")]
    UnknownBundle(String),
}

pub fn parse_scenario(text: &str) -> Result<Scenario, toml::de::Error> {
    toml::from_str(text)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    parse_scenario(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub const BUNDLED: [&str; 5] = ["two-node", "eavesdrop", "three-node", "four-link", "channel-dead"];

pub fn bundled(name: &str) -> Result<Scenario, ConfigError> {
    if !BUNDLED.contains(&name) {
        return Err(ConfigError::UnknownBundle(name.into()));
    }
    load_scenario(&fixtures_dir().join(format!("{name}.toml")))
}

/// A path to an existing file, or the name of a bundled scenario.
pub fn resolve(arg: &str) -> Result<Scenario, ConfigError> {
    let path = Path::new(arg);
    if path.exists() || !BUNDLED.contains(&arg) {
        load_scenario(path)
    } else {
        bundled(arg)
    }
}
