//! Core of an IoT management platform: the agent/manager protocol, the
//! manager's store and API pipeline, the security and location-privacy
//! gates, the manager-of-managers directory, and a deterministic simulator.

pub mod codec;
pub mod geo;
pub mod model;
pub mod privacy;
pub mod security;
pub mod token;
pub mod agent;
pub mod http;
pub mod store;
pub mod moms;
pub mod manager;
pub mod api;
pub mod sim;
