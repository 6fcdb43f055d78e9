//! Network services for the IoT management platform. Each service wraps a
//! sans-IO state machine from `iotmp-core` with tokio listeners.

pub mod agent_runner;
pub mod client;
pub mod cluster;
pub mod clock;
pub mod config;
pub mod http_glue;
pub mod manager_server;
pub mod moms_server;
pub mod tls;

pub use config::{ConfigError, ServerError};
