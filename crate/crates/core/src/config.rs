//! File configuration (TOML or JSON) with `CHURNCOMM_*` environment
//! overrides.
//!
//! ```toml
//! [master]
//! addr = "127.0.0.1:48148"
//! vote_timeout_ms = 30000
//!
//! [collective]
//! pool_size = 4
//!
//! [topology]
//! probe_bytes = 4194304
//!
//! [client]
//! min_peers = 2
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::CommConfig;
use crate::collective::P2pConfig;
use crate::master::MasterConfig;

pub const ENV_MASTER_ADDR: &str = "CHURNCOMM_MASTER_ADDR";
pub const ENV_POOL_SIZE: &str = "CHURNCOMM_POOL_SIZE";
pub const ENV_PROBE_BYTES: &str = "CHURNCOMM_PROBE_BYTES";
pub const ENV_VOTE_TIMEOUT_MS: &str = "CHURNCOMM_VOTE_TIMEOUT_MS";
pub const ENV_MIN_PEERS: &str = "CHURNCOMM_MIN_PEERS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{var}={value:?}: {message}")]
    Env {
        var: &'static str,
        value: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterSection {
    pub addr: String,
    pub vote_timeout_ms: u64,
    pub moonshot: bool,
}

impl Default for MasterSection {
    fn default() -> Self {
        let d = MasterConfig::default();
        Self {
            addr: d.listen,
            vote_timeout_ms: d.vote_timeout.as_millis() as u64,
            moonshot: d.moonshot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectiveSection {
    pub pool_size: u32,
    pub net_chunk_bytes: usize,
}

impl Default for CollectiveSection {
    fn default() -> Self {
        Self {
            pool_size: 4,
            net_chunk_bytes: P2pConfig::default().net_chunk_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub probe_bytes: u32,
    pub quick_time_limit_ms: u64,
}

impl Default for TopologySection {
    fn default() -> Self {
        let d = MasterConfig::default();
        Self {
            probe_bytes: d.probe_bytes,
            quick_time_limit_ms: d.quick_time_limit.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    pub min_peers: usize,
    /// Address the p2p listener binds.
    pub p2p_bind: String,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            min_peers: 1,
            p2p_bind: P2pConfig::default().bind_addr,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub master: MasterSection,
    pub collective: CollectiveSection,
    pub topology: TopologySection,
    pub client: ClientSection,
}

fn env_parse<T: std::str::FromStr>(var: &'static str, value: String) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Env {
        var,
        message: e.to_string(),
        value,
    })
}

impl Config {
    /// Parses a file; `.json` is read as JSON, anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Defaults, then `path` if given, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(ENV_MASTER_ADDR) {
            self.master.addr = v;
        }
        if let Some(v) = lookup(ENV_POOL_SIZE) {
            self.collective.pool_size = env_parse(ENV_POOL_SIZE, v)?;
        }
        if let Some(v) = lookup(ENV_PROBE_BYTES) {
            self.topology.probe_bytes = env_parse(ENV_PROBE_BYTES, v)?;
        }
        if let Some(v) = lookup(ENV_VOTE_TIMEOUT_MS) {
            self.master.vote_timeout_ms = env_parse(ENV_VOTE_TIMEOUT_MS, v)?;
        }
        if let Some(v) = lookup(ENV_MIN_PEERS) {
            self.client.min_peers = env_parse(ENV_MIN_PEERS, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.collective.pool_size == 0 {
            return Err(ConfigError::Invalid("collective.pool_size must be at least 1".into()));
        }
        if self.collective.net_chunk_bytes < 64 {
            return Err(ConfigError::Invalid("collective.net_chunk_bytes must be at least 64".into()));
        }
        if self.topology.probe_bytes == 0 {
            return Err(ConfigError::Invalid("topology.probe_bytes must be positive".into()));
        }
        if self.master.vote_timeout_ms == 0 {
            return Err(ConfigError::Invalid("master.vote_timeout_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn master_config(&self) -> MasterConfig {
        MasterConfig {
            listen: self.master.addr.clone(),
            vote_timeout: Duration::from_millis(self.master.vote_timeout_ms),
            probe_bytes: self.topology.probe_bytes,
            quick_time_limit: Duration::from_millis(self.topology.quick_time_limit_ms),
            moonshot: self.master.moonshot,
            epoch: None,
        }
    }

    pub fn comm_config(&self) -> CommConfig {
        let mut c = CommConfig::new(self.master.addr.clone());
        c.pool_size = self.collective.pool_size;
        c.min_peers = self.client.min_peers;
        c.p2p.bind_addr = self.client.p2p_bind.clone();
        c.p2p.net_chunk_bytes = self.collective.net_chunk_bytes;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[collective]\npool_size = 8\n[client]\nmin_peers = 3\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"collective":{"pool_size":8},"client":{"min_peers":3}}"#).unwrap();
        let a = Config::from_file(&t).unwrap();
        let b = Config::from_file(&j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.collective.pool_size, 8);
        assert_eq!(a.master, MasterSection::default());
    }

    #[test]
    fn env_overrides_file() {
        let mut c = Config::default();
        c.apply_env(|k| match k {
            ENV_MASTER_ADDR => Some("10.0.0.1:9".into()),
            ENV_POOL_SIZE => Some("2".into()),
            ENV_VOTE_TIMEOUT_MS => Some("1500".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.comm_config().master_addr, "10.0.0.1:9");
        assert_eq!(c.comm_config().pool_size, 2);
        assert_eq!(c.master_config().vote_timeout, Duration::from_millis(1500));
        let err = c.apply_env(|k| (k == ENV_MIN_PEERS).then(|| "lots".into())).unwrap_err();
        assert!(matches!(err, ConfigError::Env { var: ENV_MIN_PEERS, .. }));
    }

    #[test]
    fn unknown_keys_and_zero_pool_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[collective]\npool = 8\n").unwrap();
        assert!(matches!(Config::from_file(&t), Err(ConfigError::Parse { .. })));
        let mut c = Config::default();
        c.collective.pool_size = 0;
        assert!(c.validate().is_err());
    }
}
