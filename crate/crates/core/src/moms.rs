//! Manager of managers: an addressing directory mapping MTIDs to the manager
//! that holds them, and a router forwarding application requests there.
//!
//! The directory holds addressing data only. Topology payloads are parsed
//! against a closed schema so readings or locations cannot slip in.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{ApiRequest, ApiResponse, Method};
use crate::model::{ManagerId, Mtid};

/// Header carrying a manager's pre-shared key on topology publishes.
pub const MANAGER_KEY_HEADER: &str = "x-manager-key";
/// Header naming the requesting application on routed requests.
pub const APP_ID_HEADER: &str = "x-app-id";
/// Set on relayed responses when the directory entry is stale.
pub const STALE_HEADER: &str = "x-iotmp-stale";

/// What a manager publishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyReport {
    pub managerid: ManagerId,
    /// Comma-separated API base URLs, e.g. `http://h:8080,https://h:8443`.
    pub address: String,
    pub mtids: BTreeSet<Mtid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyEntry {
    pub managerid: ManagerId,
    pub address: String,
    pub mtids: BTreeSet<Mtid>,
    pub updated_at: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MomsError {
    #[error("malformed topology: {0}")]
    MalformedTopology(String),
    #[error("manager key rejected")]
    Unauthorized,
    #[error("no manager holds {0}")]
    NotFound(Mtid),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteDecision {
    Respond(ApiResponse),
    /// Send `request` unchanged to `base_url` and relay the answer.
    Forward {
        managerid: ManagerId,
        base_url: String,
        request: ApiRequest,
        stale: bool,
    },
}

#[derive(Debug, Clone)]
pub struct MomsConfig {
    /// Pre-shared keys per manager. When empty, publishes are accepted
    /// from anyone.
    pub manager_keys: BTreeMap<ManagerId, String>,
    pub publish_period_ms: u64,
}

impl Default for MomsConfig {
    fn default() -> Self {
        Self {
            manager_keys: BTreeMap::new(),
            publish_period_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Moms {
    cfg: MomsConfig,
    entries: BTreeMap<ManagerId, TopologyEntry>,
    index: BTreeMap<Mtid, ManagerId>,
}

impl Moms {
    pub fn new(cfg: MomsConfig) -> Self {
        Self {
            cfg,
            entries: BTreeMap::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &TopologyEntry> {
        self.entries.values()
    }

    /// Parses a raw publish body against the closed schema.
    pub fn parse_report(body: &[u8]) -> Result<TopologyReport, MomsError> {
        let report: TopologyReport =
            serde_json::from_slice(body).map_err(|e| MomsError::MalformedTopology(e.to_string()))?;
        if report.address.split(',').any(|a| a.trim().is_empty()) {
            return Err(MomsError::MalformedTopology("empty address".into()));
        }
        Ok(report)
    }

    /// Replaces the publishing manager's entry. MTIDs listed here move to it;
    /// the last writer wins per MTID.
    pub fn ingest(&mut self, report: TopologyReport, key: Option<&str>, now: u64) -> Result<(), MomsError> {
        if !self.cfg.manager_keys.is_empty() {
            let expected = self.cfg.manager_keys.get(&report.managerid);
            if expected.is_none() || expected.map(String::as_str) != key {
                return Err(MomsError::Unauthorized);
            }
        }
        let id = report.managerid.clone();
        if let Some(old) = self.entries.get(&id) {
            for m in &old.mtids {
                if self.index.get(m) == Some(&id) {
                    self.index.remove(m);
                }
            }
        }
        for m in &report.mtids {
            if let Some(prev) = self.index.insert(m.clone(), id.clone()) {
                if prev != id {
                    if let Some(e) = self.entries.get_mut(&prev) {
                        e.mtids.remove(m);
                    }
                }
            }
        }
        self.entries.insert(
            id.clone(),
            TopologyEntry {
                managerid: id,
                address: report.address,
                mtids: report.mtids,
                updated_at: now,
            },
        );
        Ok(())
    }

    pub fn lookup(&self, mtid: &Mtid) -> Result<&TopologyEntry, MomsError> {
        self.index
            .get(mtid)
            .and_then(|id| self.entries.get(id))
            .ok_or_else(|| MomsError::NotFound(mtid.clone()))
    }

    pub fn is_stale(&self, entry: &TopologyEntry, now: u64) -> bool {
        now.saturating_sub(entry.updated_at) > 3 * self.cfg.publish_period_ms
    }

    /// Picks the base URL whose scheme matches the inbound channel, so a
    /// plaintext request stays plaintext and a TLS request stays TLS.
    pub fn select_base(address: &str, secure: bool) -> String {
        let bases: Vec<&str> = address.split(',').map(str::trim).collect();
        let want = if secure { "https://" } else { "http://" };
        bases
            .iter()
            .find(|b| b.starts_with(want))
            .or_else(|| bases.first())
            .map(|b| b.trim_end_matches('/').to_string())
            .unwrap_or_default()
    }

    /// Full dump of the directory, used for purity audits.
    pub fn scan(&self) -> serde_json::Value {
        serde_json::to_value(self.entries.values().collect::<Vec<_>>()).expect("entries serialise")
    }

    /// Handles one inbound HTTP request.
    pub fn handle(&mut self, req: &ApiRequest, now: u64) -> RouteDecision {
        let segs = req.segments();
        match (req.method, segs.as_slice()) {
            (Method::Post, ["topology"]) => RouteDecision::Respond(self.handle_publish(req, now)),
            (Method::Get, ["topology"]) => RouteDecision::Respond(ApiResponse::json(200, &self.scan())),
            (_, ["mt", mtid, ..]) => self.route(req, mtid, now),
            _ => RouteDecision::Respond(ApiResponse::error(404, "NotFound", "no such route")),
        }
    }

    fn handle_publish(&mut self, req: &ApiRequest, now: u64) -> ApiResponse {
        let report = match Self::parse_report(&req.body) {
            Ok(r) => r,
            Err(e) => return ApiResponse::error(400, "MalformedTopology", e),
        };
        let count = report.mtids.len();
        match self.ingest(report, req.header(MANAGER_KEY_HEADER), now) {
            Ok(()) => ApiResponse::json(200, &json!({ "accepted": count })),
            Err(e) => ApiResponse::error(401, "Unauthorized", e),
        }
    }

    fn route(&self, req: &ApiRequest, mtid: &str, now: u64) -> RouteDecision {
        if req.header(APP_ID_HEADER).is_none_or(str::is_empty) {
            return RouteDecision::Respond(ApiResponse::error(400, "MissingAppId", "requests must name the application"));
        }
        let Ok(mtid) = Mtid::new(mtid) else {
            return RouteDecision::Respond(ApiResponse::error(404, "NotFound", "unknown MTID"));
        };
        match self.lookup(&mtid) {
            Err(e) => RouteDecision::Respond(ApiResponse::error(404, "NotFound", e)),
            Ok(entry) => RouteDecision::Forward {
                managerid: entry.managerid.clone(),
                base_url: Self::select_base(&entry.address, req.secure),
                request: req.clone(),
                stale: self.is_stale(entry, now),
            },
        }
    }

    /// The manager's answer, passed through with its body untouched.
    pub fn relay(response: ApiResponse, stale: bool) -> ApiResponse {
        let mut response = response;
        if stale {
            response.headers.insert(STALE_HEADER.into(), "1".into());
        }
        response
    }

    pub fn unreachable(managerid: &ManagerId) -> ApiResponse {
        ApiResponse::error(504, "ManagerUnreachable", format!("manager {managerid} did not answer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mt(s: &str) -> Mtid {
        Mtid::new(s).unwrap()
    }

    fn report(mgr: &str, mtids: &[&str]) -> TopologyReport {
        TopologyReport {
            managerid: ManagerId::new(mgr).unwrap(),
            address: format!("http://{mgr}:80,https://{mgr}:443"),
            mtids: mtids.iter().map(|m| mt(m)).collect(),
        }
    }

    #[test]
    fn last_writer_wins() {
        let mut moms = Moms::default();
        moms.ingest(report("M1", &["a", "b"]), None, 1).unwrap();
        assert_eq!(moms.lookup(&mt("a")).unwrap().managerid.as_str(), "M1");
        moms.ingest(report("M2", &["b"]), None, 2).unwrap();
        assert_eq!(moms.lookup(&mt("b")).unwrap().managerid.as_str(), "M2");
        assert_eq!(moms.lookup(&mt("a")).unwrap().managerid.as_str(), "M1");
        assert!(!moms.entries.get(&ManagerId::new("M1").unwrap()).unwrap().mtids.contains(&mt("b")));
        assert_eq!(moms.lookup(&mt("zz")), Err(MomsError::NotFound(mt("zz"))));
    }

    #[test]
    fn republish_drops_removed_mtids() {
        let mut moms = Moms::default();
        moms.ingest(report("M1", &["a", "b"]), None, 1).unwrap();
        moms.ingest(report("M1", &["a"]), None, 2).unwrap();
        assert!(moms.lookup(&mt("b")).is_err());
    }

    #[test]
    fn reading_values_are_rejected() {
        let body = br#"{"managerid":"M1","address":"http://x","mtids":["a"],"readings":{"a":21.5}}"#;
        assert!(matches!(Moms::parse_report(body), Err(MomsError::MalformedTopology(_))));
    }

    #[test]
    fn manager_keys() {
        let mut cfg = MomsConfig::default();
        cfg.manager_keys.insert(ManagerId::new("M1").unwrap(), "k1".into());
        let mut moms = Moms::new(cfg);
        assert_eq!(moms.ingest(report("M1", &["a"]), Some("bad"), 1), Err(MomsError::Unauthorized));
        assert_eq!(moms.ingest(report("M9", &["a"]), Some("k1"), 1), Err(MomsError::Unauthorized));
        assert!(moms.ingest(report("M1", &["a"]), Some("k1"), 1).is_ok());
    }

    #[test]
    fn routing() {
        let mut moms = Moms::default();
        moms.ingest(report("M1", &["a"]), None, 0).unwrap();
        let req = ApiRequest::get("/mt/a/Temperature").with_header(APP_ID_HEADER, "app");
        match moms.handle(&req, 10) {
            RouteDecision::Forward { base_url, request, stale, .. } => {
                assert_eq!(base_url, "http://M1:80");
                assert_eq!(request, req);
                assert!(!stale);
            }
            other => panic!("{other:?}"),
        }
        match moms.handle(&req.clone().secure(true), 10) {
            RouteDecision::Forward { base_url, .. } => assert_eq!(base_url, "https://M1:443"),
            other => panic!("{other:?}"),
        }
        let unknown = ApiRequest::get("/mt/zz/Temperature").with_header(APP_ID_HEADER, "app");
        assert!(matches!(moms.handle(&unknown, 10), RouteDecision::Respond(r) if r.status == 404));
        let anonymous = ApiRequest::get("/mt/a/Temperature");
        assert!(matches!(moms.handle(&anonymous, 10), RouteDecision::Respond(r) if r.status == 400));
        match moms.handle(&req, 40_001) {
            RouteDecision::Forward { stale, .. } => assert!(stale),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scan_holds_addressing_only() {
        let mut moms = Moms::default();
        moms.ingest(report("M1", &["a", "b"]), None, 5).unwrap();
        let scan = moms.scan();
        for entry in scan.as_array().unwrap() {
            let keys: BTreeSet<&str> = entry.as_object().unwrap().keys().map(String::as_str).collect();
            assert_eq!(keys, BTreeSet::from(["managerid", "address", "mtids", "updated_at"]));
        }
    }

    #[test]
    fn relay_keeps_body() {
        let r = ApiResponse::json(403, &json!({"error": "Forbidden"}));
        let relayed = Moms::relay(r.clone(), true);
        assert_eq!(relayed.body, r.body);
        assert_eq!(relayed.status, 403);
        assert_eq!(relayed.headers.get(STALE_HEADER).map(String::as_str), Some("1"));
    }
}
