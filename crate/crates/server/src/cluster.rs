//! Loopback deployment of managers and a manager of managers in one process.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;

use iotmp_core::manager::ManagerConfig;
use iotmp_core::model::{AppId, ManagerId};

use crate::config::{ManagerServerConfig, MomsLink, MomsServerConfig, TlsFiles};
use crate::manager_server::{self, ManagerHandle};
use crate::moms_server::{self, MomsHandle};
use crate::ServerError;

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub managers: Vec<String>,
    pub moms: bool,
    /// Certificate, key and the CA that signed them.
    pub tls: Option<(TlsFiles, PathBuf)>,
    pub secret: String,
    pub operator_key: Option<String>,
    pub admins: Vec<String>,
    pub publish_period_ms: u64,
    pub device_timeout_ms: u64,
}

impl ClusterSpec {
    pub fn new(managers: &[&str]) -> Self {
        Self {
            managers: managers.iter().map(|m| m.to_string()).collect(),
            moms: false,
            tls: None,
            secret: "cluster-shared-secret".into(),
            operator_key: None,
            admins: Vec::new(),
            publish_period_ms: 200,
            device_timeout_ms: 2_000,
        }
    }
}

pub struct Cluster {
    pub managers: Vec<ManagerHandle>,
    pub moms: Option<MomsHandle>,
    pub ca_certs: Vec<PathBuf>,
}

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

impl Cluster {
    pub async fn start(spec: ClusterSpec) -> Result<Cluster, ServerError> {
        let ca_certs: Vec<PathBuf> = spec.tls.iter().map(|(_, ca)| ca.clone()).collect();
        let tls = spec.tls.as_ref().map(|(f, _)| f.clone());
        let keys: BTreeMap<ManagerId, String> = spec
            .managers
            .iter()
            .map(|m| Ok((ManagerId::new(m).map_err(|e| crate::ConfigError::Invalid(e.to_string()))?, format!("key-{m}"))))
            .collect::<Result<_, ServerError>>()?;
        let moms = if spec.moms {
            Some(
                moms_server::start(MomsServerConfig {
                    http_listen: loopback(),
                    https_listen: tls.as_ref().map(|_| loopback()),
                    tls: tls.clone(),
                    manager_keys: keys.clone(),
                    publish_period_ms: spec.publish_period_ms,
                    forward_timeout_ms: 2_000,
                    ca_certs: ca_certs.clone(),
                })
                .await?,
            )
        } else {
            None
        };
        let mut managers = Vec::new();
        for (n, id) in spec.managers.iter().enumerate() {
            let mut m = ManagerConfig::new(id, &spec.secret);
            m.seed = n as u64 + 1;
            m.publish_period_ms = spec.publish_period_ms;
            m.device_timeout_ms = spec.device_timeout_ms;
            m.operator_key = spec.operator_key.clone();
            m.admins = spec
                .admins
                .iter()
                .map(|a| AppId::new(a).map_err(|e| crate::ConfigError::Invalid(e.to_string())))
                .collect::<Result<_, _>>()?;
            let link = moms.as_ref().map(|h| MomsLink {
                url: h.http_url(),
                key: format!("key-{id}"),
                ca_certs: ca_certs.clone(),
                timeout_ms: 2_000,
            });
            let cfg = ManagerServerConfig {
                manager: m,
                http_listen: loopback(),
                https_listen: tls.as_ref().map(|_| loopback()),
                tls: tls.clone(),
                agent_listen: loopback(),
                store_path: None,
                hierarchy_path: None,
                moms: link,
                console_dir: None,
                simulated_clock: false,
            };
            managers.push(manager_server::start(cfg).await?);
        }
        Ok(Cluster { managers, moms, ca_certs })
    }

    pub fn manager(&self, id: &str) -> Option<&ManagerHandle> {
        self.managers.iter().find(|m| m.id.as_str() == id)
    }

    /// Agent endpoints, in manager order.
    pub fn agent_endpoints(&self) -> Vec<String> {
        self.managers.iter().map(|m| m.agent_addr.to_string()).collect()
    }

    pub async fn shutdown(self) {
        for m in self.managers {
            m.shutdown().await;
        }
        if let Some(h) = self.moms {
            h.shutdown().await;
        }
    }
}
