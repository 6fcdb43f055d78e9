//! Service configuration files and startup errors.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use iotmp_core::agent::{AgentTiming, JoinMethod};
use iotmp_core::manager::ManagerConfig;
use iotmp_core::model::{Attribute, ManagerId};
use iotmp_core::sim::DeviceProfile;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    ConfigInvalid(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: SocketAddr, source: std::io::Error },
    #[error("tls setup failed: {0}")]
    Tls(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Reads a TOML or JSON file, chosen by extension.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsFiles {
    /// PEM certificate chain, leaf first.
    pub cert: PathBuf,
    /// PEM private key.
    pub key: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomsLink {
    /// Base URL of the manager of managers.
    pub url: String,
    /// Pre-shared key sent with every topology publish.
    pub key: String,
    /// Extra PEM root certificates for HTTPS.
    #[serde(default)]
    pub ca_certs: Vec<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    5_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerServerConfig {
    pub manager: ManagerConfig,
    /// Plaintext API listener.
    pub http_listen: SocketAddr,
    /// TLS API listener; requests arriving here count as secure.
    #[serde(default)]
    pub https_listen: Option<SocketAddr>,
    #[serde(default)]
    pub tls: Option<TlsFiles>,
    /// TCP listener for agent connections.
    pub agent_listen: SocketAddr,
    /// Journal file; the store is in memory when absent.
    #[serde(default)]
    pub store_path: Option<PathBuf>,
    /// Region hierarchy in JSON; the bundled one when absent.
    #[serde(default)]
    pub hierarchy_path: Option<PathBuf>,
    #[serde(default)]
    pub moms: Option<MomsLink>,
    /// Static files served under `/console`.
    #[serde(default)]
    pub console_dir: Option<PathBuf>,
    /// Lets the operator set the clock through `PUT /clock`.
    #[serde(default)]
    pub simulated_clock: bool,
}

impl ManagerServerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.https_listen.is_some() != self.tls.is_some() {
            return Err(ConfigError::Invalid("https_listen and tls must be set together".into()));
        }
        if self.manager.server_secret.len() < 16 {
            return Err(ConfigError::Invalid("server_secret must be at least 16 bytes".into()));
        }
        if self.manager.publish && self.moms.is_none() {
            return Err(ConfigError::Invalid("publish requires a [moms] section".into()));
        }
        if self.simulated_clock && self.manager.operator_key.is_none() {
            return Err(ConfigError::Invalid("simulated_clock requires an operator_key".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomsServerConfig {
    pub http_listen: SocketAddr,
    #[serde(default)]
    pub https_listen: Option<SocketAddr>,
    #[serde(default)]
    pub tls: Option<TlsFiles>,
    /// Pre-shared key per manager; publishes are open when empty.
    #[serde(default)]
    pub manager_keys: BTreeMap<ManagerId, String>,
    #[serde(default = "default_publish_period")]
    pub publish_period_ms: u64,
    /// How long a forwarded request may take before 504.
    #[serde(default = "default_timeout")]
    pub forward_timeout_ms: u64,
    /// Extra PEM root certificates trusted when forwarding over HTTPS.
    #[serde(default)]
    pub ca_certs: Vec<PathBuf>,
}

fn default_publish_period() -> u64 {
    10_000
}

impl MomsServerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.https_listen.is_some() != self.tls.is_some() {
            return Err(ConfigError::Invalid("https_listen and tls must be set together".into()));
        }
        if self.publish_period_ms == 0 {
            return Err(ConfigError::Invalid("publish_period_ms must be positive".into()));
        }
        Ok(())
    }
}

/// A device agent talking to managers over TCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRunConfig {
    /// Management descriptor; must include `ID`.
    pub descriptor: Vec<Attribute>,
    /// Endpoints are `host:port` agent listeners.
    pub join: JoinMethod,
    #[serde(default)]
    pub colocated: bool,
    #[serde(default)]
    pub profile: DeviceProfile,
    #[serde(default)]
    pub timing: AgentTiming,
    #[serde(default)]
    pub seed: u64,
    /// Region hierarchy for mobile locations; the bundled one when absent.
    #[serde(default)]
    pub hierarchy_path: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manager_config_parses_from_toml() {
        let text = r#"
            http_listen = "127.0.0.1:0"
            agent_listen = "127.0.0.1:0"
            [manager]
            id = "m1"
            server_secret = "0123456789abcdef"
        "#;
        let cfg: ManagerServerConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.manager.id.as_str(), "m1");
        cfg.validate().unwrap();
        let bad: Result<ManagerServerConfig, _> = toml::from_str(&format!("{text}\nbogus = 1"));
        assert!(bad.is_err());
    }

    #[test]
    fn half_configured_tls_is_invalid() {
        let mut cfg: ManagerServerConfig = toml::from_str(
            r#"
            http_listen = "127.0.0.1:0"
            agent_listen = "127.0.0.1:0"
            https_listen = "127.0.0.1:0"
            [manager]
            id = "m1"
            server_secret = "0123456789abcdef"
        "#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        cfg.https_listen = None;
        cfg.manager.server_secret = "short".into();
        assert!(cfg.validate().is_err());
    }
}
