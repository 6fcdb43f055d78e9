//! Manager state machine: terminates agent connections, runs registration,
//! stores readings and alerts, performs device round trips, publishes its
//! topology, and serves the management API (see [`crate::api`]).
//!
//! Like the agent, the manager performs no I/O; drivers feed it frames, API
//! requests and timer firings and carry out the returned outputs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::COLOCATED_FIELD;
use crate::codec::{Field, MessageKind, ProtocolMessage};
use crate::geo::GeoHierarchy;
use crate::http::{ApiRequest, ApiResponse};
use crate::model::{
    check_behavioural_value, validate_descriptor, AgentId, AppId, AttrName, Attribute,
    ManagerId, ModelError, Mtid, Reading, SemanticLocation, ValidatedDescriptor, Value,
};
use crate::moms::TopologyReport;
use crate::security::{AdmissionState, AgentAdmission, SecurityProfile};
use crate::store::{
    AlertRecord, Connection, ManagedThingRecord, Mutation, Source, Store, StoredReading,
};
use crate::token::{TokenAuthority, DEFAULT_TOKEN_TTL_MS};

pub type ConnId = u64;
pub type ReqId = u64;

const AUDIT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerConfig {
    pub id: ManagerId,
    /// Comma-separated API base URLs advertised to the manager of managers.
    #[serde(default)]
    pub address: String,
    /// Maximum number of records; joins beyond it are rejected.
    #[serde(default)]
    pub capacity: Option<usize>,
    /// AgentIDs or MTIDs approved on arrival.
    #[serde(default)]
    pub allowlist: BTreeSet<String>,
    /// Management applications allowed to edit any thing's profile.
    #[serde(default)]
    pub admins: BTreeSet<AppId>,
    #[serde(default = "default_device_timeout")]
    pub device_timeout_ms: u64,
    #[serde(default = "default_publish_period")]
    pub publish_period_ms: u64,
    /// Publish topology to a manager of managers.
    #[serde(default)]
    pub publish: bool,
    #[serde(default = "default_token_ttl")]
    pub token_ttl_ms: u64,
    pub server_secret: String,
    #[serde(default)]
    pub seed: u64,
    /// When set, `POST /apps` requires this value in `x-operator-key`.
    #[serde(default)]
    pub operator_key: Option<String>,
}

fn default_device_timeout() -> u64 {
    5_000
}

fn default_publish_period() -> u64 {
    10_000
}

fn default_token_ttl() -> u64 {
    DEFAULT_TOKEN_TTL_MS
}

impl ManagerConfig {
    pub fn new(id: &str, server_secret: &str) -> Self {
        Self {
            id: ManagerId::new(id).expect("valid manager id"),
            address: String::new(),
            capacity: None,
            allowlist: BTreeSet::new(),
            admins: BTreeSet::new(),
            device_timeout_ms: default_device_timeout(),
            publish_period_ms: default_publish_period(),
            publish: false,
            token_ttl_ms: default_token_ttl(),
            server_secret: server_secret.to_string(),
            seed: 0,
            operator_key: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManagerTimer {
    DeviceCall(u64),
    Publish,
    PublishRetry,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManagerOutput {
    Send { conn: ConnId, msg: ProtocolMessage },
    Reply { req: ReqId, response: ApiResponse },
    Timer { at: u64, timer: ManagerTimer },
    Publish(TopologyReport),
}

/// Decision points of the request pipeline, in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Verify,
    Security,
    Privacy,
    StoreRead,
    Device,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub req: ReqId,
    pub stage: Stage,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Up,
    Down,
}

/// Connection, battery and traffic snapshot of one thing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagementStatus {
    pub mtid: Mtid,
    pub agentid: AgentId,
    pub approval: AdmissionState,
    pub link: Link,
    pub battery: Option<f64>,
    pub last_rtt_ms: Option<u64>,
    pub last_seen: u64,
    /// Inbound frames per kind; answers to manager requests count as RESPONSE
    /// and refused frames from unapproved agents as UNAPPROVED.
    pub message_counters: BTreeMap<String, u64>,
    /// False when the snapshot comes from cache rather than the device.
    pub fresh: bool,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct StatusCache {
    pub battery: Option<f64>,
    pub last_rtt_ms: Option<u64>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub(crate) enum CallKind {
    Get { attr: AttrName, level: Option<u32> },
    Set { attr: AttrName },
    Status,
}

#[derive(Debug, Clone)]
pub(crate) struct DeviceCall {
    pub req: ReqId,
    pub mtid: Mtid,
    pub conn: ConnId,
    pub kind: CallKind,
    pub sent_at: u64,
}

#[derive(Debug, Default)]
struct PublishState {
    in_flight: bool,
    dirty: bool,
}

pub struct Manager {
    pub(crate) cfg: ManagerConfig,
    pub(crate) store: Store,
    pub(crate) tokens: TokenAuthority,
    pub(crate) hierarchy: Arc<GeoHierarchy>,
    pub(crate) rng: ChaCha8Rng,
    conns: BTreeMap<ConnId, Option<Mtid>>,
    pub(crate) live: BTreeMap<Mtid, ConnId>,
    seq: u64,
    pub(crate) calls: BTreeMap<u64, DeviceCall>,
    pub(crate) status: BTreeMap<Mtid, StatusCache>,
    publish: PublishState,
    audit: VecDeque<AuditEntry>,
    next_agent: u64,
}

impl std::fmt::Debug for Manager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Manager")
            .field("id", &self.cfg.id)
            .field("records", &self.store.state().records.len())
            .field("live", &self.live.len())
            .finish_non_exhaustive()
    }
}

fn error_frame(kind_seq: u64, sender: &ManagerId, mtid: Option<Mtid>, re: u64, code: &str) -> ProtocolMessage {
    ProtocolMessage::new(MessageKind::Error, kind_seq, sender.as_str(), mtid.or_else(|| Some(Mtid::new("unknown").expect("valid"))))
        .reply_to(re)
        .with(Field::text("code", code))
}

impl Manager {
    pub fn new(cfg: ManagerConfig, hierarchy: Arc<GeoHierarchy>, store: Store) -> Self {
        let tokens = TokenAuthority::new(cfg.server_secret.as_bytes().to_vec(), cfg.token_ttl_ms);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let next_agent = store.state().records.len() as u64;
        Self {
            cfg,
            store,
            tokens,
            hierarchy,
            rng,
            conns: BTreeMap::new(),
            live: BTreeMap::new(),
            seq: 0,
            calls: BTreeMap::new(),
            status: BTreeMap::new(),
            publish: PublishState::default(),
            audit: VecDeque::new(),
            next_agent,
        }
    }

    pub fn id(&self) -> &ManagerId {
        &self.cfg.id
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    /// Read access for embedding drivers and tests. External callers reach
    /// thing data only through [`Manager::on_api`].
    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn hierarchy(&self) -> &GeoHierarchy {
        &self.hierarchy
    }

    pub fn tokens(&self) -> &TokenAuthority {
        &self.tokens
    }

    pub fn audit(&self) -> impl Iterator<Item = &AuditEntry> {
        self.audit.iter()
    }

    pub fn is_live(&self, mtid: &Mtid) -> bool {
        self.live.contains_key(mtid)
    }

    pub fn pending_calls(&self) -> usize {
        self.calls.len()
    }

    pub(crate) fn record_audit(&mut self, req: ReqId, stage: Stage, passed: bool, detail: Option<String>) {
        if self.audit.len() == AUDIT_CAPACITY {
            self.audit.pop_front();
        }
        self.audit.push_back(AuditEntry { req, stage, passed, detail });
    }

    pub(crate) fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn frame(&mut self, kind: MessageKind, mtid: &Mtid) -> ProtocolMessage {
        let seq = self.next_seq();
        ProtocolMessage::new(kind, seq, self.cfg.id.as_str(), Some(mtid.clone()))
    }

    fn error(&mut self, conn: ConnId, mtid: Option<Mtid>, re: u64, code: &str, out: &mut Vec<ManagerOutput>) {
        let seq = self.next_seq();
        let msg = error_frame(seq, &self.cfg.id, mtid, re, code);
        out.push(ManagerOutput::Send { conn, msg });
    }

    /// Schedules periodic topology publishing.
    pub fn start(&mut self, now: u64) -> Vec<ManagerOutput> {
        let mut out = Vec::new();
        if self.cfg.publish {
            self.request_publish(&mut out);
            out.push(ManagerOutput::Timer {
                at: now + self.cfg.publish_period_ms,
                timer: ManagerTimer::Publish,
            });
        }
        out
    }

    pub fn topology(&self) -> TopologyReport {
        TopologyReport {
            managerid: self.cfg.id.clone(),
            address: self.cfg.address.clone(),
            mtids: self.store.state().records.keys().cloned().collect(),
        }
    }

    pub(crate) fn request_publish(&mut self, out: &mut Vec<ManagerOutput>) {
        if !self.cfg.publish {
            return;
        }
        if self.publish.in_flight {
            self.publish.dirty = true;
        } else {
            self.publish.in_flight = true;
            self.publish.dirty = false;
            out.push(ManagerOutput::Publish(self.topology()));
        }
    }

    /// Outcome of the last [`ManagerOutput::Publish`].
    pub fn on_publish_result(&mut self, ok: bool, now: u64) -> Vec<ManagerOutput> {
        let mut out = Vec::new();
        self.publish.in_flight = false;
        if !ok {
            self.publish.dirty = true;
            tracing::warn!(manager = %self.cfg.id, "topology publish failed; will retry");
            out.push(ManagerOutput::Timer {
                at: now + self.cfg.publish_period_ms.min(1_000),
                timer: ManagerTimer::PublishRetry,
            });
        } else if self.publish.dirty {
            self.request_publish(&mut out);
        }
        out
    }

    pub fn on_timer(&mut self, timer: ManagerTimer, now: u64) -> Vec<ManagerOutput> {
        let mut out = Vec::new();
        match timer {
            ManagerTimer::Publish => {
                self.request_publish(&mut out);
                out.push(ManagerOutput::Timer {
                    at: now + self.cfg.publish_period_ms,
                    timer: ManagerTimer::Publish,
                });
            }
            ManagerTimer::PublishRetry => {
                if self.publish.dirty && !self.publish.in_flight {
                    self.request_publish(&mut out);
                }
            }
            ManagerTimer::DeviceCall(seq) => {
                if let Some(call) = self.calls.remove(&seq) {
                    self.record_audit(call.req, Stage::Device, false, Some("timeout".into()));
                    let response = match call.kind {
                        CallKind::Status => self.status_response(&call.mtid, false),
                        _ => ApiResponse::error(504, "DeviceTimeout", format!("{} did not answer", call.mtid)),
                    };
                    out.push(ManagerOutput::Reply { req: call.req, response });
                }
            }
        }
        out
    }

    pub fn on_disconnect(&mut self, conn: ConnId, now: u64) -> Vec<ManagerOutput> {
        if let Some(Some(mtid)) = self.conns.remove(&conn) {
            if self.live.get(&mtid) == Some(&conn) {
                self.live.remove(&mtid);
                self.store.touch(&mtid, now, Some(Connection::Disconnected));
                tracing::debug!(manager = %self.cfg.id, %mtid, "agent link down");
            }
        }
        Vec::new()
    }

    fn bind(&mut self, conn: ConnId, mtid: &Mtid, now: u64) {
        if let Some(old) = self.live.insert(mtid.clone(), conn) {
            if old != conn {
                self.conns.insert(old, None);
            }
        }
        self.conns.insert(conn, Some(mtid.clone()));
        self.store.touch(mtid, now, Some(Connection::Connected));
    }

    fn count(&mut self, mtid: &Mtid, key: &str) {
        *self
            .status
            .entry(mtid.clone())
            .or_default()
            .counters
            .entry(key.to_string())
            .or_default() += 1;
    }

    pub fn on_frame(&mut self, conn: ConnId, msg: ProtocolMessage, now: u64) -> Vec<ManagerOutput> {
        let mut out = Vec::new();
        self.conns.entry(conn).or_insert(None);
        if let Some(mtid) = msg.mtid.clone() {
            if self.store.record(&mtid).is_some() {
                let key = if msg.re.is_some() { "RESPONSE" } else { msg.kind.as_str() };
                self.count(&mtid, key);
            }
        }
        match msg.kind {
            MessageKind::AssociateReq => self.on_associate(conn, &msg, &mut out),
            MessageKind::DirectJoin => self.on_join(conn, &msg, now, &mut out),
            MessageKind::Reconnect => self.on_reconnect(conn, &msg, now, &mut out),
            MessageKind::Update | MessageKind::Error if msg.re.is_some_and(|re| self.calls.contains_key(&re)) => {
                self.on_device_reply(conn, msg, now, &mut out)
            }
            MessageKind::Update => self.on_update(conn, &msg, now, &mut out),
            MessageKind::Alert => self.on_alert(conn, &msg, now, &mut out),
            _ => {}
        }
        out
    }

    fn on_associate(&mut self, conn: ConnId, msg: &ProtocolMessage, out: &mut Vec<ManagerOutput>) {
        let Some(mtid) = msg.text_field("ID").and_then(|id| Mtid::new(id).ok()) else {
            return;
        };
        let load = self.store.state().records.len() as f64;
        let reply = self
            .frame(MessageKind::AssociateResp, &mtid)
            .reply_to(msg.seq)
            .with(Field::text("managerid", self.cfg.id.as_str()))
            .with(Field::value("load", Value::Number(load)));
        out.push(ManagerOutput::Send { conn, msg: reply });
    }

    #[allow(clippy::too_many_arguments)]
    fn join_ack(&mut self, conn: ConnId, mtid: &Mtid, re: u64, status: &str, agentid: Option<&AgentId>, reason: Option<&str>, out: &mut Vec<ManagerOutput>) {
        let mut msg = self
            .frame(MessageKind::JoinAck, mtid)
            .reply_to(re)
            .with(Field::text("status", status));
        if let Some(a) = agentid {
            msg.body.push(Field::text("agentid", a.as_str()));
        }
        if let Some(r) = reason {
            msg.body.push(Field::text("reason", r));
        }
        out.push(ManagerOutput::Send { conn, msg });
    }

    fn ack_status(state: AdmissionState) -> &'static str {
        match state {
            AdmissionState::Approved => "registered",
            AdmissionState::Pending | AdmissionState::Unknown => "pending",
            AdmissionState::Revoked => "rejected",
        }
    }

    fn descriptor_from(&self, msg: &ProtocolMessage) -> Result<(ValidatedDescriptor, bool), ModelError> {
        let mut attrs = Vec::new();
        let mut colocated = false;
        for f in &msg.body {
            if f.name == COLOCATED_FIELD {
                colocated = f.value == Some(Value::Bool(true));
                continue;
            }
            let value = f.value.clone().ok_or_else(|| ModelError::MalformedValue {
                name: f.name.clone(),
                reason: "missing value".into(),
            })?;
            let mut a = Attribute::new(&f.name, value)?;
            a.unit = f.unit.clone();
            attrs.push(a);
        }
        let d = validate_descriptor(attrs)?;
        if let Some(loc) = d.fixed_location() {
            self.hierarchy
                .validate_location(loc)
                .map_err(|e| ModelError::MalformedValue {
                    name: "FixedLocation".into(),
                    reason: e.to_string(),
                })?;
        }
        Ok((d, colocated))
    }

    fn allocate_agentid(&mut self, mtid: &Mtid, colocated: bool) -> AgentId {
        if colocated && self.store.admission(&AgentId::from(mtid.clone())).is_none() {
            return AgentId::from(mtid.clone());
        }
        loop {
            self.next_agent += 1;
            let id = AgentId::new(format!("{}-a{}", self.cfg.id, self.next_agent)).expect("valid agent id");
            if self.store.admission(&id).is_none() {
                return id;
            }
        }
    }

    fn on_join(&mut self, conn: ConnId, msg: &ProtocolMessage, now: u64, out: &mut Vec<ManagerOutput>) {
        let mtid = msg.mtid.clone().expect("validated join carries mtid");
        let (descriptor, colocated) = match self.descriptor_from(msg) {
            Ok(d) => d,
            Err(e) => {
                tracing::info!(manager = %self.cfg.id, %mtid, error = %e, "join refused");
                self.join_ack(conn, &mtid, msg.seq, "rejected", None, Some("MalformedDescriptor"), out);
                return;
            }
        };
        if let Some(&other) = self.live.get(&mtid) {
            if other != conn {
                self.error(conn, Some(mtid), msg.seq, "DuplicateMTID", out);
                return;
            }
        }
        let attributes: BTreeMap<AttrName, Attribute> = descriptor
            .attributes()
            .map(|a| (a.name.clone(), a.clone()))
            .collect();
        if let Some(existing) = self.store.record(&mtid).cloned() {
            // A known thing joining again keeps its single record.
            let state = self.store.admission_state(&mtid);
            if state == AdmissionState::Revoked {
                self.join_ack(conn, &mtid, msg.seq, "rejected", None, Some("Revoked"), out);
                return;
            }
            let has_mobile = self
                .store
                .latest(&mtid, &AttrName::new("MobileLocation").expect("valid"))
                .is_some();
            let loc = if has_mobile { existing.loc.clone() } else { descriptor.fixed_location().cloned().or(existing.loc.clone()) };
            let record = ManagedThingRecord {
                attributes,
                loc,
                last_seen: now,
                connection: Connection::Connected,
                ..existing
            };
            let agentid = record.agentid.clone();
            self.commit(Mutation::PutRecord { record });
            self.bind(conn, &mtid, now);
            self.join_ack(conn, &mtid, msg.seq, Self::ack_status(state), Some(&agentid), None, out);
            return;
        }
        if self.cfg.capacity.is_some_and(|cap| self.store.state().records.len() >= cap) {
            self.join_ack(conn, &mtid, msg.seq, "rejected", None, Some("AtCapacity"), out);
            return;
        }
        let agentid = self.allocate_agentid(&mtid, colocated);
        let mut admission = AgentAdmission::admit(None, agentid.clone(), mtid.clone()).expect("fresh agent");
        if self.cfg.allowlist.contains(agentid.as_str()) || self.cfg.allowlist.contains(mtid.as_str()) {
            admission = admission.approve("allowlist", now).expect("pending");
        }
        let state = admission.state;
        let owner = descriptor.get("Admin").and_then(|a| a.value.as_text()).map(str::to_string);
        let record = ManagedThingRecord {
            mtid: mtid.clone(),
            agentid: agentid.clone(),
            attributes,
            loc: descriptor.fixed_location().cloned(),
            security_ref: SecurityProfile::reference(&mtid),
            registered_at: now,
            last_seen: now,
            connection: Connection::Connected,
        };
        self.commit(Mutation::PutProfile {
            profile: SecurityProfile::new(mtid.clone(), owner),
        });
        self.commit(Mutation::PutPolicies {
            mtid: mtid.clone(),
            policies: Vec::new(),
        });
        self.commit(Mutation::PutAdmission { admission });
        self.commit(Mutation::PutRecord { record });
        if let Some(b) = descriptor.get("BatteryLife").and_then(|a| a.value.as_number()) {
            self.status.entry(mtid.clone()).or_default().battery = Some(b);
        }
        self.bind(conn, &mtid, now);
        tracing::info!(manager = %self.cfg.id, %mtid, %agentid, ?state, "thing registered");
        self.join_ack(conn, &mtid, msg.seq, Self::ack_status(state), Some(&agentid), None, out);
        self.request_publish(out);
    }

    fn on_reconnect(&mut self, conn: ConnId, msg: &ProtocolMessage, now: u64, out: &mut Vec<ManagerOutput>) {
        let mtid = msg.mtid.clone().expect("validated reconnect carries mtid");
        let claimed = msg.text_field("agentid").unwrap_or_default();
        let known = self
            .store
            .record(&mtid)
            .is_some_and(|r| r.agentid.as_str() == claimed);
        if !known {
            tracing::info!(manager = %self.cfg.id, %mtid, "reconnect for unknown registration");
            self.error(conn, Some(mtid), msg.seq, "UnknownRegistration", out);
            return;
        }
        let state = self.store.admission_state(&mtid);
        if state == AdmissionState::Revoked {
            self.join_ack(conn, &mtid, msg.seq, "rejected", None, Some("Revoked"), out);
            return;
        }
        self.bind(conn, &mtid, now);
        let agentid = AgentId::new(claimed).expect("matches stored id");
        self.join_ack(conn, &mtid, msg.seq, Self::ack_status(state), Some(&agentid), None, out);
    }

    /// Traffic from a thing must come over the connection it is bound to,
    /// and is refused unless its agent is approved.
    fn admit_data(&mut self, conn: ConnId, msg: &ProtocolMessage, now: u64, out: &mut Vec<ManagerOutput>) -> Option<Mtid> {
        let mtid = msg.mtid.clone()?;
        let bound = self.conns.get(&conn).cloned().flatten();
        if bound.as_ref() != Some(&mtid) {
            self.error(conn, Some(mtid), msg.seq, "UnknownRegistration", out);
            return None;
        }
        self.store.touch(&mtid, now, None);
        if self.store.admission_state(&mtid) != AdmissionState::Approved {
            self.count(&mtid, "UNAPPROVED");
            tracing::info!(manager = %self.cfg.id, %mtid, kind = %msg.kind, "dropped frame from unapproved agent");
            self.error(conn, Some(mtid), msg.seq, "Unapproved", out);
            return None;
        }
        Some(mtid)
    }

    /// Checks and converts a reading field; location values must resolve in
    /// the hierarchy.
    pub(crate) fn reading_from(&self, f: &Field, now: u64) -> Result<Reading, ModelError> {
        let name = AttrName::new(f.name.as_str())?;
        let value = f.value.clone().ok_or_else(|| ModelError::MalformedValue {
            name: f.name.clone(),
            reason: "missing value".into(),
        })?;
        check_behavioural_value(&name, &value)?;
        if let Value::Location(loc) = &value {
            self.hierarchy
                .validate_location(loc)
                .map_err(|e| ModelError::MalformedValue {
                    name: f.name.clone(),
                    reason: e.to_string(),
                })?;
        }
        Ok(Reading {
            name,
            value,
            unit: f.unit.clone(),
            ts: f.ts.unwrap_or(now),
        })
    }

    pub(crate) fn append_reading(&mut self, mtid: &Mtid, reading: Reading, source: Source) {
        if let Value::Location(loc) = &reading.value {
            self.set_location(mtid, loc.clone());
        }
        self.commit(Mutation::AppendReading {
            mtid: mtid.clone(),
            reading: StoredReading { reading, source },
        });
    }

    fn set_location(&mut self, mtid: &Mtid, loc: SemanticLocation) {
        if let Some(rec) = self.store.record(mtid) {
            if rec.loc.as_ref() != Some(&loc) {
                let record = ManagedThingRecord {
                    loc: Some(loc),
                    ..rec.clone()
                };
                self.commit(Mutation::PutRecord { record });
            }
        }
    }

    fn on_update(&mut self, conn: ConnId, msg: &ProtocolMessage, now: u64, out: &mut Vec<ManagerOutput>) {
        let Some(mtid) = self.admit_data(conn, msg, now, out) else {
            return;
        };
        let readings: Result<Vec<Reading>, ModelError> =
            msg.body.iter().map(|f| self.reading_from(f, now)).collect();
        let readings = match readings {
            Ok(r) => r,
            Err(e) => {
                tracing::info!(manager = %self.cfg.id, %mtid, error = %e, "malformed update");
                self.error(conn, Some(mtid), msg.seq, "MalformedValue", out);
                return;
            }
        };
        let stored = readings.len();
        for r in readings {
            self.append_reading(&mtid, r, Source::Agent);
        }
        let ack = self
            .frame(MessageKind::Ack, &mtid)
            .reply_to(msg.seq)
            .with(Field::value("stored", Value::Number(stored as f64)));
        out.push(ManagerOutput::Send { conn, msg: ack });
    }

    fn on_alert(&mut self, conn: ConnId, msg: &ProtocolMessage, now: u64, out: &mut Vec<ManagerOutput>) {
        let Some(mtid) = self.admit_data(conn, msg, now, out) else {
            return;
        };
        let Some(f) = msg.body.first() else { return };
        let (Ok(attribute), Some(value)) = (AttrName::new(f.name.as_str()), f.value.clone()) else {
            self.error(conn, Some(mtid), msg.seq, "MalformedValue", out);
            return;
        };
        if !self.store.has_alert(&mtid, msg.seq) {
            self.commit(Mutation::PutAlert {
                alert: AlertRecord {
                    mtid: mtid.clone(),
                    seq: msg.seq,
                    attribute,
                    value,
                    ts: f.ts.unwrap_or(now),
                    received_at: now,
                },
            });
        }
        let ack = self.frame(MessageKind::Ack, &mtid).reply_to(msg.seq);
        out.push(ManagerOutput::Send { conn, msg: ack });
    }

    pub(crate) fn commit(&mut self, m: Mutation) {
        if let Err(e) = self.store.commit(m) {
            tracing::error!(manager = %self.cfg.id, error = %e, "store write failed");
        }
    }

    /// Sends a request to the thing's agent and parks the API request until
    /// the answer or the deadline.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn start_call(&mut self, req: ReqId, mtid: &Mtid, kind: CallKind, msg_kind: MessageKind, body: Vec<Field>, now: u64, out: &mut Vec<ManagerOutput>) -> Result<(), ApiResponse> {
        if self.store.admission_state(mtid) != AdmissionState::Approved {
            self.record_audit(req, Stage::Device, false, Some("unapproved".into()));
            return Err(ApiResponse::error(409, "AgentNotApproved", format!("agent of {mtid} is not approved")));
        }
        let mut msg = self.frame(msg_kind, mtid);
        msg.body = body;
        let seq = msg.seq;
        // A disconnected thing cannot answer; the call simply runs into its
        // deadline.
        let conn = self.live.get(mtid).copied().unwrap_or(ConnId::MAX);
        self.calls.insert(seq, DeviceCall { req, mtid: mtid.clone(), conn, kind, sent_at: now });
        if conn != ConnId::MAX {
            out.push(ManagerOutput::Send { conn, msg });
        }
        out.push(ManagerOutput::Timer {
            at: now + self.cfg.device_timeout_ms,
            timer: ManagerTimer::DeviceCall(seq),
        });
        Ok(())
    }

    fn on_device_reply(&mut self, conn: ConnId, msg: ProtocolMessage, now: u64, out: &mut Vec<ManagerOutput>) {
        let re = msg.re.expect("checked by caller");
        let Some(call) = self.calls.get(&re) else { return };
        if call.conn != conn || msg.mtid.as_ref() != Some(&call.mtid) {
            return;
        }
        let call = self.calls.remove(&re).expect("present");
        let rtt = now.saturating_sub(call.sent_at);
        self.status.entry(call.mtid.clone()).or_default().last_rtt_ms = Some(rtt);
        self.store.touch(&call.mtid, now, None);
        let approved = self.store.admission_state(&call.mtid) == AdmissionState::Approved;
        self.record_audit(call.req, Stage::Device, msg.kind == MessageKind::Update, None);
        let response = if msg.kind == MessageKind::Error {
            let code = msg.text_field("code").unwrap_or("DeviceError").to_string();
            match (&call.kind, code.as_str()) {
                (CallKind::Status, _) => self.status_response(&call.mtid, false),
                (_, "NotActuatable") => ApiResponse::error(422, "NotActuatable", "attribute cannot be actuated"),
                (_, "ActuationFailed") => ApiResponse::error(502, "ActuationFailed", "device refused the value"),
                (_, "UnknownAttribute") => ApiResponse::error(404, "UnknownAttribute", "device does not report it"),
                (_, other) => ApiResponse::error(502, other, "device error"),
            }
        } else if !approved {
            ApiResponse::error(409, "AgentNotApproved", "agent approval was withdrawn")
        } else {
            match call.kind {
                CallKind::Status => {
                    if let Some(b) = msg
                        .field("BatteryLife")
                        .and_then(|f| f.value.as_ref())
                        .and_then(Value::as_number)
                    {
                        self.status.entry(call.mtid.clone()).or_default().battery = Some(b);
                    }
                    self.status_response(&call.mtid, true)
                }
                CallKind::Get { attr, level } => self.finish_live_get(call.req, &call.mtid, &attr, level, &msg, now),
                CallKind::Set { attr } => self.finish_set(&call.mtid, &attr, &msg, now),
            }
        };
        out.push(ManagerOutput::Reply { req: call.req, response });
    }

    fn finish_set(&mut self, mtid: &Mtid, attr: &AttrName, msg: &ProtocolMessage, now: u64) -> ApiResponse {
        let Some(f) = msg.body.iter().find(|f| f.name == attr.as_str()) else {
            return ApiResponse::error(502, "ActuationFailed", "device reply lacks the attribute");
        };
        match self.reading_from(f, now) {
            Ok(r) => {
                let body = serde_json::json!({
                    "mtid": mtid,
                    "attribute": attr,
                    "value": r.value,
                    "ts": r.ts,
                    "result": "success",
                });
                self.append_reading(mtid, r, Source::Agent);
                ApiResponse::json(200, &body)
            }
            Err(e) => ApiResponse::error(502, "ActuationFailed", e),
        }
    }

    pub(crate) fn status_snapshot(&self, mtid: &Mtid, fresh: bool) -> Option<ManagementStatus> {
        let rec = self.store.record(mtid)?;
        let cache = self.status.get(mtid).cloned().unwrap_or_default();
        Some(ManagementStatus {
            mtid: mtid.clone(),
            agentid: rec.agentid.clone(),
            approval: self.store.admission_state(mtid),
            link: if self.live.contains_key(mtid) { Link::Up } else { Link::Down },
            battery: cache.battery,
            last_rtt_ms: cache.last_rtt_ms,
            last_seen: rec.last_seen,
            message_counters: cache.counters,
            fresh,
        })
    }

    /// Cached status snapshot, without asking the device.
    pub fn status(&self, mtid: &Mtid) -> Option<ManagementStatus> {
        self.status_snapshot(mtid, false)
    }

    pub(crate) fn status_response(&self, mtid: &Mtid, fresh: bool) -> ApiResponse {
        match self.status_snapshot(mtid, fresh) {
            Some(s) => ApiResponse::json(200, &serde_json::to_value(s).expect("status serialises")),
            None => ApiResponse::error(404, "UnknownMT", format!("no record for {mtid}")),
        }
    }

    /// Marks the approval on the live connection so a waiting agent learns of
    /// it without sending anything.
    pub(crate) fn push_approval(&mut self, mtid: &Mtid, agentid: &AgentId, out: &mut Vec<ManagerOutput>) {
        if let Some(&conn) = self.live.get(mtid) {
            let msg = self
                .frame(MessageKind::JoinAck, mtid)
                .with(Field::text("status", "registered"))
                .with(Field::text("agentid", agentid.as_str()));
            out.push(ManagerOutput::Send { conn, msg });
        }
    }

    pub(crate) fn forget_thing(&mut self, mtid: &Mtid) {
        if let Some(conn) = self.live.remove(mtid) {
            self.conns.insert(conn, None);
        }
        self.status.remove(mtid);
        self.calls.retain(|_, c| c.mtid != *mtid);
    }

    pub fn on_api(&mut self, req_id: ReqId, req: ApiRequest, now: u64) -> Vec<ManagerOutput> {
        let mut out = Vec::new();
        if let Some(response) = self.route_api(req_id, &req, now, &mut out) {
            out.push(ManagerOutput::Reply { req: req_id, response });
        }
        out
    }
}

/// The immediate reply for `req` among `outputs`, if there is one.
pub fn reply_for(outputs: &[ManagerOutput], req: ReqId) -> Option<&ApiResponse> {
    outputs.iter().find_map(|o| match o {
        ManagerOutput::Reply { req: r, response } if *r == req => Some(response),
        _ => None,
    })
}
