//! Deterministic discrete-event simulator.
//!
//! Drives managers, agents, an optional manager of managers, a simulated
//! operator and scripted API clients on one virtual clock. All randomness
//! comes from the script seed and events at equal instants are ordered by
//! actor, so a script always produces the same trace.

mod scenario;
mod trace;

pub use scenario::*;
pub use trace::{sha256_hex, Trace, TraceEvent};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::agent::{Agent, AgentAction, AgentConfig, AgentEvent, AgentTimer, Endpoint, JoinMethod, Phase};
use crate::codec::{encode_message, MessageKind, ProtocolMessage};
use crate::geo::GeoHierarchy;
use crate::http::{ApiRequest, ApiResponse, Method};
use crate::manager::{ConnId, Manager, ManagerConfig, ManagerOutput, ManagerTimer, ReqId};
use crate::model::{validate_descriptor, AppId, AttrName, Attribute, ManagerId, Mtid, Value};
use crate::moms::{Moms, MomsConfig, RouteDecision, TopologyReport, APP_ID_HEADER, MANAGER_KEY_HEADER};
use crate::privacy::{DisclosurePolicy, RequesterScope};
use crate::security::ProfileChange;
use crate::store::Source;
use crate::token::Role;

/// Operator application the simulator registers on every manager.
pub const SIM_ADMIN: &str = "sim-admin";
/// Fault target naming the manager of managers.
pub const MOMS_TARGET: &str = "moms";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScriptInvalid(String),
    #[error("a fleet needs at least one device")]
    EmptyFleet,
    #[error("unknown fault target {0}")]
    UnknownTarget(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: usize,
    pub at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtid: Option<Mtid>,
    pub status: u16,
    pub ok: bool,
    /// SHA-256 of the body the client received.
    pub body_sha256: String,
    /// SHA-256 of the body the owning manager produced, for relayed requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manager_body_sha256: Option<String>,
    pub stale: bool,
    pub body: Json,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub phase: Phase,
    pub manager: Option<Endpoint>,
    pub sent: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub end_time: u64,
    pub trace_digest: String,
    pub trace_events: usize,
    pub probes: Vec<ProbeResult>,
    /// Managers holding a record for each thing.
    pub records: BTreeMap<Mtid, Vec<ManagerId>>,
    pub agents: BTreeMap<Mtid, AgentSummary>,
    /// Reading fields acknowledged as stored in UPDATE acks.
    pub acked_update_fields: u64,
    /// Readings with agent source held by all managers.
    pub stored_agent_readings: u64,
    /// Alerts held by all managers.
    pub stored_alerts: u64,
}

impl SimReport {
    pub fn all_probes_ok(&self) -> bool {
        self.probes.iter().all(|p| p.ok)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Debug, Clone)]
enum Ev {
    AgentStart(usize),
    AgentTimer(usize, AgentTimer),
    AgentUnreachable(usize, Endpoint),
    Sensor(usize),
    ToManager { conn: ConnId, msg: ProtocolMessage },
    ToAgent { conn: ConnId, msg: ProtocolMessage },
    ManagerDisconnect { mi: usize, conn: ConnId },
    ManagerTimer(usize, ManagerTimer),
    PublishArrive { mi: usize, report: TopologyReport },
    PublishResult { mi: usize, ok: bool },
    FaultStart(usize),
    FaultEnd(usize),
    AdminPoll,
    AdminAction(usize),
    Probe(usize),
}

#[derive(Debug, Clone, Copy)]
struct Conn {
    agent: usize,
    mgr: usize,
    up_at: u64,
    down_at: u64,
}

struct SimAgent {
    agent: Agent,
    profile: DeviceProfile,
}

struct SimManager {
    m: Manager,
    provisioned: BTreeSet<Mtid>,
}

#[derive(Debug, Clone)]
struct PendingProbe {
    probe: usize,
    mtid: Option<Mtid>,
    /// Relayed through the manager of managers; carries the stale flag.
    relayed: Option<bool>,
}

pub struct Sim {
    script: ScenarioScript,
    hierarchy: Arc<GeoHierarchy>,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64, u64), Ev>,
    managers: Vec<SimManager>,
    moms: Option<Moms>,
    agents: Vec<SimAgent>,
    agent_index: BTreeMap<Mtid, usize>,
    conns: BTreeMap<ConnId, Conn>,
    next_conn: ConnId,
    next_req: ReqId,
    faults: Vec<Fault>,
    active: BTreeSet<usize>,
    tokens: BTreeMap<AppId, String>,
    pending: BTreeMap<(usize, ReqId), PendingProbe>,
    results: Vec<ProbeResult>,
    trace: Trace,
    acked_update_fields: u64,
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ScriptInvalid(msg.into())
}

impl Sim {
    pub fn new(script: ScenarioScript) -> Result<Self, SimError> {
        validate(&script)?;
        let hierarchy = Arc::new(match &script.hierarchy {
            HierarchySpec::Bundled => GeoHierarchy::bundled(),
            HierarchySpec::Synthetic { branching } => GeoHierarchy::synthetic("Root", branching),
        });
        let secret = format!("sim-secret-{}", script.seed);
        let mut managers = Vec::new();
        let mut keys = BTreeMap::new();
        for (i, spec) in script.managers.iter().enumerate() {
            let mut cfg = ManagerConfig::new(spec.id.as_str(), &secret);
            cfg.address = format!("http://{0}.sim,https://{0}.sim", spec.id);
            cfg.capacity = spec.capacity;
            cfg.allowlist = spec.allowlist.clone();
            cfg.admins.insert(AppId::new(SIM_ADMIN).expect("valid"));
            cfg.device_timeout_ms = spec.device_timeout_ms;
            cfg.publish_period_ms = spec.publish_period_ms;
            cfg.publish = script.moms;
            cfg.token_ttl_ms = script.duration_ms.saturating_add(3_600_000);
            cfg.seed = script.seed.wrapping_add(i as u64 + 1);
            keys.insert(spec.id.clone(), manager_key(&spec.id));
            managers.push(SimManager {
                m: Manager::new(cfg, hierarchy.clone(), crate::store::Store::in_memory()),
                provisioned: BTreeSet::new(),
            });
        }
        let moms = script.moms.then(|| {
            Moms::new(MomsConfig {
                manager_keys: keys,
                publish_period_ms: script.managers.iter().map(|m| m.publish_period_ms).max().unwrap_or(10_000),
            })
        });
        let mut sim = Self {
            rng: ChaCha8Rng::seed_from_u64(script.seed),
            hierarchy,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            managers,
            moms,
            agents: Vec::new(),
            agent_index: BTreeMap::new(),
            conns: BTreeMap::new(),
            next_conn: 1,
            next_req: 1,
            faults: Vec::new(),
            active: BTreeSet::new(),
            tokens: BTreeMap::new(),
            pending: BTreeMap::new(),
            results: Vec::new(),
            trace: Trace::default(),
            acked_update_fields: 0,
            script,
        };
        sim.register_apps()?;
        for mi in 0..sim.managers.len() {
            let outs = sim.managers[mi].m.start(0);
            sim.manager_outputs(mi, outs);
        }
        let fleets = sim.script.fleets.clone();
        for fleet in &fleets {
            sim.spawn_fleet(fleet)?;
        }
        for fault in sim.script.faults.clone() {
            sim.inject_fault(fault)?;
        }
        for (i, a) in sim.script.admin.actions.clone().iter().enumerate() {
            sim.schedule(a.at, u64::MAX - 1, Ev::AdminAction(i));
        }
        for (i, p) in sim.script.probes.clone().iter().enumerate() {
            sim.schedule(p.at, u64::MAX, Ev::Probe(i));
        }
        let poll = sim.script.admin.poll_ms;
        sim.schedule(poll, u64::MAX - 1, Ev::AdminPoll);
        Ok(sim)
    }

    fn register_apps(&mut self) -> Result<(), SimError> {
        let mut apps = vec![(AppId::new(SIM_ADMIN).expect("valid"), Role::ManagementApp)];
        apps.extend(self.script.apps.iter().map(|a| (a.appid.clone(), a.role)));
        for (appid, role) in apps {
            let m = &mut self.managers[0].m;
            let role_name = serde_json::to_value(role).expect("role serialises");
            let req = ApiRequest::post("/apps", &json!({ "appid": appid, "role": role_name }));
            let r = call_now(m, &mut self.next_req, req, 0);
            let secret = r
                .body_json()
                .and_then(|b| b["secret_token"].as_str().map(str::to_string))
                .ok_or_else(|| invalid(format!("cannot register {appid}: status {}", r.status)))?;
            let req = ApiRequest::post("/tokens", &json!({ "appid": appid, "secret_token": secret }));
            let r = call_now(m, &mut self.next_req, req, 0);
            let token = r
                .body_json()
                .and_then(|b| b["token"].as_str().map(str::to_string))
                .ok_or_else(|| invalid(format!("cannot mint a token for {appid}")))?;
            self.tokens.insert(appid, token);
        }
        Ok(())
    }

    /// Creates the fleet's agents and schedules their start.
    pub fn spawn_fleet(&mut self, fleet: &FleetSpec) -> Result<Vec<Mtid>, SimError> {
        if fleet.count == 0 {
            return Err(SimError::EmptyFleet);
        }
        let targets: Vec<&ManagerId> = match &fleet.join {
            FleetJoin::Direct { manager } => vec![manager],
            FleetJoin::Spread { managers } | FleetJoin::Associate { managers } => managers.iter().collect(),
        };
        if targets.is_empty() {
            return Err(invalid("fleet names no managers"));
        }
        for t in &targets {
            if self.manager_index(t.as_str()).is_none() {
                return Err(invalid(format!("fleet names unknown manager {t}")));
            }
        }
        let mut created = Vec::new();
        for n in 0..fleet.count {
            let mtid = Mtid::new(format!("{}{:03}", fleet.prefix, n + 1)).map_err(|e| invalid(e.to_string()))?;
            if self.agent_index.contains_key(&mtid) {
                return Err(invalid(format!("duplicate MTID {mtid}")));
            }
            let join = match &fleet.join {
                FleetJoin::Direct { manager } => JoinMethod::Direct { manager: manager.to_string() },
                FleetJoin::Spread { managers } => JoinMethod::Direct {
                    manager: managers[n % managers.len()].to_string(),
                },
                FleetJoin::Associate { managers } => JoinMethod::Associate {
                    endpoints: managers.iter().map(|m| m.to_string()).collect(),
                },
            };
            let loc = self.hierarchy.random_leaf_location(&mut self.rng);
            let attrs = vec![
                Attribute::new("ID", Value::text(mtid.as_str())),
                Attribute::new("Name", Value::text(format!("{mtid} device"))),
                Attribute::new("Admin", Value::text(SIM_ADMIN)),
                Attribute::new("FixedLocation", Value::Location(loc)),
            ];
            let attrs = attrs.into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| invalid(e.to_string()))?;
            let descriptor = validate_descriptor(attrs).map_err(|e| invalid(e.to_string()))?;
            let mut cfg = AgentConfig::new(descriptor, join);
            cfg.colocated = fleet.colocated;
            cfg.behavioural = fleet.profile.behavioural();
            cfg.actuators = fleet.profile.actuators.clone();
            cfg.alert_rules = fleet.profile.alert_rules.clone();
            cfg.seed = self.rng.random();
            let agent = Agent::new(cfg).map_err(|e| invalid(format!("{mtid}: {e}")))?;
            let ai = self.agents.len();
            self.agents.push(SimAgent {
                agent,
                profile: fleet.profile.clone(),
            });
            self.agent_index.insert(mtid.clone(), ai);
            let start = self.now + self.rng.random_range(0..=fleet.start_spread_ms);
            self.schedule(start, self.agent_rank(ai), Ev::AgentStart(ai));
            created.push(mtid);
        }
        Ok(created)
    }

    /// Schedules a fault. Targets are MTIDs, manager ids or `moms`.
    pub fn inject_fault(&mut self, fault: Fault) -> Result<(), SimError> {
        let known = self.agent_index.contains_key(fault.target.as_str())
            || self.manager_index(&fault.target).is_some()
            || (fault.target == MOMS_TARGET && self.moms.is_some());
        if !known {
            return Err(SimError::UnknownTarget(fault.target));
        }
        if let FaultKind::DropPct { pct, .. } = fault.kind {
            if !(0.0..=100.0).contains(&pct) {
                return Err(invalid("drop percentage outside 0..=100"));
            }
        }
        let idx = self.faults.len();
        let (start, end) = (fault.at.max(self.now), fault.at.max(self.now).saturating_add(fault.duration_ms));
        self.faults.push(fault);
        self.schedule(start, 0, Ev::FaultStart(idx));
        self.schedule(end, 0, Ev::FaultEnd(idx));
        Ok(())
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn manager(&self, id: &str) -> Option<&Manager> {
        self.manager_index(id).map(|i| &self.managers[i].m)
    }

    pub fn managers(&self) -> impl Iterator<Item = &Manager> {
        self.managers.iter().map(|s| &s.m)
    }

    pub fn moms(&self) -> Option<&Moms> {
        self.moms.as_ref()
    }

    pub fn agent(&self, mtid: &str) -> Option<&Agent> {
        self.agent_index.get(mtid).map(|&i| &self.agents[i].agent)
    }

    pub fn mtids(&self) -> impl Iterator<Item = &Mtid> {
        self.agent_index.keys()
    }

    pub fn token(&self, appid: &str) -> Option<&str> {
        self.tokens.get(appid).map(String::as_str)
    }

    pub fn probe_results(&self) -> &[ProbeResult] {
        &self.results
    }

    /// Sends an API request at the current instant and returns the answer if
    /// it is immediate. Device round trips finish later and are dropped.
    pub fn call(&mut self, via: &Via, appid: &str, req: ApiRequest) -> Option<ApiResponse> {
        let token = self.tokens.get(appid)?.clone();
        let req = req.bearer(&token).with_header(APP_ID_HEADER, appid);
        match via {
            Via::Manager { id } => {
                let mi = self.manager_index(id.as_str())?;
                if self.manager_down(mi) {
                    return Some(ApiResponse::error(503, "Unavailable", "manager down"));
                }
                Some(self.manager_call(mi, req))
            }
            Via::Moms => {
                if self.moms_down() {
                    return Some(ApiResponse::error(503, "Unavailable", "manager of managers down"));
                }
                let now = self.now;
                match self.moms.as_mut()?.handle(&req, now) {
                    RouteDecision::Respond(r) => Some(r),
                    RouteDecision::Forward { managerid, request, stale, .. } => {
                        let mi = self.manager_index(managerid.as_str())?;
                        if self.manager_down(mi) {
                            return Some(Moms::unreachable(&managerid));
                        }
                        Some(Moms::relay(self.manager_call(mi, request), stale))
                    }
                }
            }
        }
    }

    fn manager_call(&mut self, mi: usize, req: ApiRequest) -> ApiResponse {
        let req_id = self.next_req;
        self.next_req += 1;
        let outs = self.managers[mi].m.on_api(req_id, req, self.now);
        let mut reply = None;
        let mut rest = Vec::new();
        for o in outs {
            match o {
                ManagerOutput::Reply { req, response } if req == req_id => reply = Some(response),
                other => rest.push(other),
            }
        }
        self.manager_outputs(mi, rest);
        reply.unwrap_or_else(|| ApiResponse::error(202, "Pending", "answer follows a device round trip"))
    }

    /// Processes every event up to and including `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > t {
                break;
            }
            let ((at, _, _), ev) = entry.remove_entry();
            self.now = at;
            self.dispatch(ev);
        }
        self.now = self.now.max(t);
    }

    /// Runs to the end of the script and summarises the outcome.
    pub fn run(&mut self) -> SimReport {
        self.run_until(self.script.duration_ms);
        self.report()
    }

    pub fn report(&self) -> SimReport {
        let mut records: BTreeMap<Mtid, Vec<ManagerId>> = BTreeMap::new();
        let mut stored_agent_readings = 0;
        let mut stored_alerts = 0;
        for s in &self.managers {
            let state = s.m.store().state();
            for mtid in state.records.keys() {
                records.entry(mtid.clone()).or_default().push(s.m.id().clone());
            }
            for series in state.readings.values() {
                stored_agent_readings += series.iter().filter(|r| r.source == Source::Agent).count() as u64;
            }
            stored_alerts += s.m.store().alerts().count() as u64;
        }
        let agents = self
            .agent_index
            .iter()
            .map(|(mtid, &i)| {
                let a = &self.agents[i].agent;
                let sent = MessageKind::ALL
                    .iter()
                    .filter(|k| a.sent_count(**k) > 0)
                    .map(|k| (k.as_str().to_string(), a.sent_count(*k)))
                    .collect();
                let summary = AgentSummary {
                    phase: a.phase(),
                    manager: a.manager().cloned(),
                    sent,
                };
                (mtid.clone(), summary)
            })
            .collect();
        SimReport {
            seed: self.script.seed,
            end_time: self.now,
            trace_digest: self.trace.digest(),
            trace_events: self.trace.len(),
            probes: self.results.clone(),
            records,
            agents,
            acked_update_fields: self.acked_update_fields,
            stored_agent_readings,
            stored_alerts,
        }
    }

    fn schedule(&mut self, at: u64, rank: u64, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at, rank, self.seq), ev);
    }

    fn manager_rank(&self, mi: usize) -> u64 {
        1 + mi as u64
    }

    fn agent_rank(&self, ai: usize) -> u64 {
        1 + self.managers.len() as u64 + ai as u64
    }

    fn manager_index(&self, id: &str) -> Option<usize> {
        self.managers.iter().position(|s| s.m.id().as_str() == id)
    }

    fn latency(&mut self) -> u64 {
        let n = self.script.network;
        n.base_latency_ms + self.rng.random_range(0..=n.jitter_ms)
    }

    fn actor_name(&self, ai: usize) -> String {
        self.agents[ai].agent.mtid().to_string()
    }

    fn fault_active(&self, pred: impl Fn(&Fault) -> bool) -> bool {
        self.active.iter().any(|&i| pred(&self.faults[i]))
    }

    fn agent_down(&self, ai: usize) -> bool {
        let mtid = self.agents[ai].agent.mtid().as_str();
        self.fault_active(|f| f.kind == FaultKind::Disconnect && f.target == mtid)
    }

    fn manager_down(&self, mi: usize) -> bool {
        let id = self.managers[mi].m.id().as_str();
        self.fault_active(|f| f.kind == FaultKind::ManagerOutage && f.target == id)
    }

    fn moms_down(&self) -> bool {
        self.fault_active(|f| f.kind == FaultKind::ManagerOutage && f.target == MOMS_TARGET)
    }

    fn dropped(&mut self, ai: usize, mi: usize, kind: MessageKind) -> bool {
        let mtid = self.agents[ai].agent.mtid().as_str().to_string();
        let mid = self.managers[mi].m.id().as_str().to_string();
        let mut pct: f64 = 0.0;
        for &i in &self.active {
            if let FaultKind::DropPct { pct: p, kinds } = &self.faults[i].kind {
                let target = &self.faults[i].target;
                if (*target == mtid || *target == mid) && (kinds.is_empty() || kinds.contains(&kind)) {
                    pct = pct.max(*p);
                }
            }
        }
        pct > 0.0 && self.rng.random_bool(pct / 100.0)
    }

    fn trace_frame(&mut self, actor: &str, what: &str, msg: &ProtocolMessage) {
        let bytes = encode_message(msg).unwrap_or_default();
        self.trace.push(self.now, actor, format!("{what}:{}", msg.kind), &bytes);
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::AgentStart(ai) => {
                let actions = self.agents[ai].agent.start(self.now).unwrap_or_default();
                self.agent_actions(ai, actions);
                let period = self.agents[ai].profile.update_period_ms;
                if period > 0 {
                    let at = self.now + period;
                    self.schedule(at, self.agent_rank(ai), Ev::Sensor(ai));
                }
            }
            Ev::AgentTimer(ai, timer) => {
                let actions = self.agents[ai].agent.on_timer(timer, self.now);
                self.agent_actions(ai, actions);
            }
            Ev::AgentUnreachable(ai, endpoint) => {
                let name = self.actor_name(ai);
                self.trace.push(self.now, &name, "unreachable", endpoint.as_bytes());
                let actions = self.agents[ai].agent.on_unreachable(&endpoint, self.now);
                self.agent_actions(ai, actions);
            }
            Ev::Sensor(ai) => self.sensor_tick(ai),
            Ev::ToManager { conn, msg } => {
                let Some(c) = self.conns.get(&conn).copied() else {
                    return;
                };
                let name = self.managers[c.mgr].m.id().to_string();
                self.trace_frame(&name, "deliver", &msg);
                let outs = self.managers[c.mgr].m.on_frame(conn, msg, self.now);
                self.manager_outputs(c.mgr, outs);
            }
            Ev::ToAgent { conn, msg } => {
                let Some(c) = self.conns.get(&conn).copied() else {
                    return;
                };
                let name = self.actor_name(c.agent);
                self.trace_frame(&name, "deliver", &msg);
                let from = self.managers[c.mgr].m.id().to_string();
                let actions = self.agents[c.agent].agent.on_message(&from, msg, self.now);
                self.agent_actions(c.agent, actions);
            }
            Ev::ManagerDisconnect { mi, conn } => {
                let outs = self.managers[mi].m.on_disconnect(conn, self.now);
                self.manager_outputs(mi, outs);
            }
            Ev::ManagerTimer(mi, timer) => {
                let outs = self.managers[mi].m.on_timer(timer, self.now);
                self.manager_outputs(mi, outs);
            }
            Ev::PublishArrive { mi, report } => {
                let ok = !self.moms_down() && {
                    let key = manager_key(&report.managerid);
                    let body = serde_json::to_value(&report).expect("report serialises");
                    let req = ApiRequest::post("/topology", &body).with_header(MANAGER_KEY_HEADER, key);
                    let now = self.now;
                    let moms = self.moms.as_mut().expect("publishing requires a manager of managers");
                    matches!(moms.handle(&req, now), RouteDecision::Respond(r) if r.is_success())
                };
                let bytes = serde_json::to_vec(&report).expect("report serialises");
                self.trace.push(self.now, MOMS_TARGET, if ok { "publish:ok" } else { "publish:failed" }, &bytes);
                let at = self.now + self.latency();
                self.schedule(at, self.manager_rank(mi), Ev::PublishResult { mi, ok });
            }
            Ev::PublishResult { mi, ok } => {
                if self.manager_down(mi) {
                    return;
                }
                let outs = self.managers[mi].m.on_publish_result(ok, self.now);
                self.manager_outputs(mi, outs);
            }
            Ev::FaultStart(i) => self.fault_start(i),
            Ev::FaultEnd(i) => {
                self.active.remove(&i);
                let f = &self.faults[i];
                let payload = serde_json::to_vec(f).expect("fault serialises");
                let actor = f.target.clone();
                self.trace.push(self.now, &actor, "fault:end", &payload);
            }
            Ev::AdminPoll => {
                self.admin_poll();
                let next = self.now + self.script.admin.poll_ms.max(1);
                if next <= self.script.duration_ms {
                    self.schedule(next, u64::MAX - 1, Ev::AdminPoll);
                }
            }
            Ev::AdminAction(i) => self.admin_action(i),
            Ev::Probe(i) => self.run_probe(i),
        }
    }

    fn agent_actions(&mut self, ai: usize, actions: Vec<AgentAction>) {
        for action in actions {
            match action {
                AgentAction::Send { to, msg } => self.agent_send(ai, to, msg),
                AgentAction::Close { to } => {
                    let Some(mi) = self.manager_index(&to) else {
                        continue;
                    };
                    let open: Vec<ConnId> = self
                        .conns
                        .iter()
                        .filter(|(_, c)| c.agent == ai && c.mgr == mi)
                        .map(|(id, _)| *id)
                        .collect();
                    for conn in open {
                        self.conns.remove(&conn);
                        let at = self.now + self.latency();
                        self.schedule(at, self.manager_rank(mi), Ev::ManagerDisconnect { mi, conn });
                    }
                }
                AgentAction::Timer { after_ms, timer } => {
                    let at = self.now + after_ms;
                    self.schedule(at, self.agent_rank(ai), Ev::AgentTimer(ai, timer));
                }
                AgentAction::Event(e) => {
                    let name = self.actor_name(ai);
                    let label = event_label(&e);
                    self.trace.push(self.now, &name, format!("event:{label}"), format!("{e:?}").as_bytes());
                }
            }
        }
    }

    fn agent_send(&mut self, ai: usize, to: Endpoint, msg: ProtocolMessage) {
        let lat = self.latency();
        let Some(mi) = self.manager_index(&to) else {
            self.schedule(self.now + lat, self.agent_rank(ai), Ev::AgentUnreachable(ai, to));
            return;
        };
        if self.agent_down(ai) || self.manager_down(mi) {
            self.schedule(self.now + lat, self.agent_rank(ai), Ev::AgentUnreachable(ai, to));
            return;
        }
        let existing = self.conns.iter().find(|(_, c)| c.agent == ai && c.mgr == mi).map(|(id, _)| *id);
        let conn = existing.unwrap_or_else(|| {
            let id = self.next_conn;
            self.next_conn += 1;
            self.conns.insert(id, Conn { agent: ai, mgr: mi, up_at: 0, down_at: 0 });
            id
        });
        if self.dropped(ai, mi, msg.kind) {
            let name = self.actor_name(ai);
            self.trace_frame(&name, "drop", &msg);
            return;
        }
        let c = self.conns.get_mut(&conn).expect("connection just ensured");
        let at = (self.now + lat).max(c.up_at);
        c.up_at = at;
        self.schedule(at, self.manager_rank(mi), Ev::ToManager { conn, msg });
    }

    fn manager_outputs(&mut self, mi: usize, outs: Vec<ManagerOutput>) {
        for o in outs {
            match o {
                ManagerOutput::Send { conn, msg } => {
                    let Some(c) = self.conns.get(&conn).copied() else {
                        continue;
                    };
                    if msg.kind == MessageKind::Ack {
                        if let Some(n) = msg.field("stored").and_then(|f| f.value.as_ref()).and_then(Value::as_number) {
                            self.acked_update_fields += n as u64;
                        }
                    }
                    if self.dropped(c.agent, mi, msg.kind) {
                        let name = self.managers[mi].m.id().to_string();
                        self.trace_frame(&name, "drop", &msg);
                        continue;
                    }
                    let lat = self.latency();
                    let rank = self.agent_rank(c.agent);
                    let c = self.conns.get_mut(&conn).expect("connection exists");
                    let at = (self.now + lat).max(c.down_at);
                    c.down_at = at;
                    self.schedule(at, rank, Ev::ToAgent { conn, msg });
                }
                ManagerOutput::Reply { req, response } => self.on_reply(mi, req, response),
                ManagerOutput::Timer { at, timer } => {
                    let at = at.max(self.now);
                    self.schedule(at, self.manager_rank(mi), Ev::ManagerTimer(mi, timer));
                }
                ManagerOutput::Publish(report) => {
                    let lat = self.latency();
                    if self.moms.is_none() || self.manager_down(mi) {
                        self.schedule(self.now + lat, self.manager_rank(mi), Ev::PublishResult { mi, ok: false });
                    } else {
                        self.schedule(self.now + lat, 0, Ev::PublishArrive { mi, report });
                    }
                }
            }
        }
    }

    fn sensor_tick(&mut self, ai: usize) {
        let profile = self.agents[ai].profile.clone();
        let sending = profile.updates_until_ms.is_none_or(|u| self.now < u);
        let phase = self.agents[ai].agent.phase();
        if sending && matches!(phase, Phase::Registered | Phase::PendingApproval) {
            let readings = profile.sample(&self.hierarchy, &mut self.rng);
            if let Ok(actions) = self.agents[ai].agent.send_update(readings, self.now) {
                self.agent_actions(ai, actions);
            }
        }
        let next = self.now + profile.update_period_ms;
        if next <= self.script.duration_ms {
            self.schedule(next, self.agent_rank(ai), Ev::Sensor(ai));
        }
    }

    fn fault_start(&mut self, i: usize) {
        self.active.insert(i);
        let f = self.faults[i].clone();
        let payload = serde_json::to_vec(&f).expect("fault serialises");
        self.trace.push(self.now, &f.target, "fault:start", &payload);
        let affected: Vec<ConnId> = match f.kind {
            FaultKind::DropPct { .. } => Vec::new(),
            FaultKind::Disconnect | FaultKind::ManagerOutage => {
                let ai = self.agent_index.get(f.target.as_str()).copied();
                let mi = self.manager_index(&f.target);
                self.conns
                    .iter()
                    .filter(|(_, c)| Some(c.agent) == ai || Some(c.mgr) == mi)
                    .map(|(id, _)| *id)
                    .collect()
            }
        };
        for conn in affected {
            let c = self.conns.remove(&conn).expect("listed connection");
            let outs = self.managers[c.mgr].m.on_disconnect(conn, self.now);
            self.manager_outputs(c.mgr, outs);
            let endpoint = self.managers[c.mgr].m.id().to_string();
            let actions = self.agents[c.agent].agent.on_link_down(&endpoint, self.now);
            self.agent_actions(c.agent, actions);
        }
    }

    fn admin_call(&mut self, mi: usize, req: ApiRequest) -> ApiResponse {
        let token = self.tokens[SIM_ADMIN].clone();
        self.manager_call(mi, req.bearer(&token).with_header(APP_ID_HEADER, SIM_ADMIN))
    }

    fn admin_poll(&mut self) {
        for mi in 0..self.managers.len() {
            if self.manager_down(mi) {
                continue;
            }
            let pending = self.admin_call(mi, ApiRequest::get("/agents/pending"));
            let list = pending.body_json().and_then(|b| b["pending"].as_array().cloned()).unwrap_or_default();
            for entry in list {
                let (Some(agentid), Some(mtid)) = (entry["agentid"].as_str(), entry["mtid"].as_str()) else {
                    continue;
                };
                if self.script.admin.hold_pending.contains(mtid) {
                    continue;
                }
                let agentid = agentid.to_string();
                self.approve(mi, &agentid, mtid);
            }
            let things = self.managers[mi].m.store().state().records.keys().cloned().collect::<Vec<_>>();
            for mtid in things {
                if !self.managers[mi].provisioned.contains(&mtid) {
                    self.provision(mi, &mtid);
                }
            }
        }
    }

    fn approve(&mut self, mi: usize, agentid: &str, mtid: &str) {
        let r = self.admin_call(mi, ApiRequest::post(&format!("/agents/{agentid}/approve"), &json!({})));
        self.trace.push(self.now, "admin", format!("approve:{}", r.status), mtid.as_bytes());
    }

    fn provision(&mut self, mi: usize, mtid: &Mtid) {
        let mut changes: Vec<ProfileChange> = self
            .script
            .apps
            .iter()
            .filter(|a| a.grant)
            .map(|a| ProfileChange::AddEntity(a.appid.clone()))
            .collect();
        if self.script.admin.secure_only.contains(mtid) {
            changes.push(ProfileChange::SetSecureOnly(true));
        }
        if !changes.is_empty() {
            let r = self.admin_call(mi, ApiRequest::put(&format!("/profiles/{mtid}"), &json!({ "changes": changes })));
            if !r.is_success() {
                return;
            }
        }
        let policies: Vec<DisclosurePolicy> = self
            .script
            .apps
            .iter()
            .filter_map(|a| a.disclose_level.map(|k| (a, k)))
            .enumerate()
            .map(|(n, (a, k))| DisclosurePolicy::disclose(n as u64 + 1, mtid.clone(), RequesterScope::App(a.appid.clone()), k))
            .collect();
        if !policies.is_empty() {
            let r = self.admin_call(mi, ApiRequest::put(&format!("/policies/{mtid}"), &json!({ "policies": policies })));
            if !r.is_success() {
                return;
            }
        }
        self.trace.push(self.now, "admin", "provision", mtid.as_str().as_bytes());
        self.managers[mi].provisioned.insert(mtid.clone());
    }

    fn admin_action(&mut self, i: usize) {
        let action = self.script.admin.actions[i].clone();
        for mi in 0..self.managers.len() {
            if self.manager_down(mi) {
                continue;
            }
            let Some(rec) = self.managers[mi].m.store().record(&action.mtid) else {
                continue;
            };
            let agentid = rec.agentid.to_string();
            match action.action {
                AdminAction::Approve => self.approve(mi, &agentid, action.mtid.as_str()),
                AdminAction::Revoke => {
                    let r = self.admin_call(mi, ApiRequest::post(&format!("/agents/{agentid}/revoke"), &json!({})));
                    self.trace.push(self.now, "admin", format!("revoke:{}", r.status), action.mtid.as_str().as_bytes());
                }
            }
        }
    }

    fn run_probe(&mut self, i: usize) {
        let probe = self.script.probes[i].clone();
        let targets: Vec<Option<Mtid>> = if probe.for_each_mt {
            self.agent_index.keys().cloned().map(Some).collect()
        } else {
            vec![None]
        };
        for mtid in targets {
            let path = match &mtid {
                Some(m) => probe.path.replace("{mtid}", m.as_str()),
                None => probe.path.clone(),
            };
            let mut req = ApiRequest::new(probe.method, &path).secure(probe.secure);
            if let Some(body) = &probe.body {
                req = req.with_json(body);
            }
            if let Some(token) = self.tokens.get(&probe.app) {
                req = req.bearer(token);
            }
            req = req.with_header(APP_ID_HEADER, probe.app.as_str());
            let ctx = PendingProbe { probe: i, mtid, relayed: None };
            match &probe.via {
                Via::Manager { id } => {
                    let mi = self.manager_index(id.as_str()).expect("validated manager");
                    if self.manager_down(mi) {
                        let r = ApiResponse::error(503, "Unavailable", "manager down");
                        self.finish_probe(ctx, None, r);
                    } else {
                        self.send_probe(mi, req, ctx);
                    }
                }
                Via::Moms => {
                    if self.moms_down() {
                        let r = ApiResponse::error(503, "Unavailable", "manager of managers down");
                        self.finish_probe(ctx, None, r);
                        continue;
                    }
                    let now = self.now;
                    let decision = self.moms.as_mut().expect("validated").handle(&req, now);
                    match decision {
                        RouteDecision::Respond(r) => self.finish_probe(ctx, None, r),
                        RouteDecision::Forward { managerid, request, stale, .. } => {
                            match self.manager_index(managerid.as_str()) {
                                Some(mi) if !self.manager_down(mi) => {
                                    let ctx = PendingProbe { relayed: Some(stale), ..ctx };
                                    self.send_probe(mi, request, ctx);
                                }
                                _ => self.finish_probe(ctx, None, Moms::unreachable(&managerid)),
                            }
                        }
                    }
                }
            }
        }
    }

    fn send_probe(&mut self, mi: usize, req: ApiRequest, ctx: PendingProbe) {
        let req_id = self.next_req;
        self.next_req += 1;
        self.pending.insert((mi, req_id), ctx);
        let outs = self.managers[mi].m.on_api(req_id, req, self.now);
        self.manager_outputs(mi, outs);
    }

    fn on_reply(&mut self, mi: usize, req: ReqId, response: ApiResponse) {
        let Some(ctx) = self.pending.remove(&(mi, req)) else {
            return;
        };
        match ctx.relayed {
            Some(stale) => {
                let manager_sha = sha256_hex(&response.body);
                let relayed = Moms::relay(response, stale);
                self.finish_probe(ctx, Some(manager_sha), relayed);
            }
            None => self.finish_probe(ctx, None, response),
        }
    }

    fn finish_probe(&mut self, ctx: PendingProbe, manager_sha: Option<String>, r: ApiResponse) {
        let probe = &self.script.probes[ctx.probe];
        let mut ok = match probe.expect.status {
            Some(s) => r.status == s,
            None => r.is_success(),
        };
        let body = r.body_json().unwrap_or(Json::Null);
        let mut detail = None;
        if ok && probe.expect.matches_store {
            let check = self.matches_store(&ctx, &body);
            if let Err(e) = check {
                ok = false;
                detail = Some(e);
            }
        }
        let stale = r.headers.contains_key(crate::moms::STALE_HEADER);
        let result = ProbeResult {
            probe: ctx.probe,
            at: self.now,
            mtid: ctx.mtid,
            status: r.status,
            ok,
            body_sha256: sha256_hex(&r.body),
            manager_body_sha256: manager_sha,
            stale,
            body,
            detail,
        };
        self.trace.push(self.now, "client", format!("api:{}", r.status), &r.body);
        self.results.push(result);
    }

    /// The newest value in the body equals the owner's latest stored reading.
    fn matches_store(&self, ctx: &PendingProbe, body: &Json) -> Result<(), String> {
        let mtid = body["mtid"]
            .as_str()
            .and_then(|m| Mtid::new(m).ok())
            .or_else(|| ctx.mtid.clone())
            .ok_or("response names no thing")?;
        let attr = body["attribute"]
            .as_str()
            .and_then(|a| AttrName::new(a).ok())
            .ok_or("response names no attribute")?;
        let values = body["values"].as_array().ok_or("response has no values")?;
        let newest = values
            .iter()
            .max_by_key(|v| v["ts"].as_u64().unwrap_or(0))
            .ok_or("response has no values")?;
        let got: Value = serde_json::from_value(newest["value"].clone()).map_err(|e| e.to_string())?;
        let owner = self
            .managers
            .iter()
            .find(|s| s.m.store().record(&mtid).is_some())
            .ok_or("no manager holds the thing")?;
        let stored = owner.m.store().latest(&mtid, &attr).ok_or("nothing stored")?;
        if stored.reading.value == got {
            Ok(())
        } else {
            Err(format!("returned {got}, stored {}", stored.reading.value))
        }
    }
}

fn manager_key(id: &ManagerId) -> String {
    format!("key-{id}")
}

fn call_now(m: &mut Manager, next_req: &mut ReqId, req: ApiRequest, now: u64) -> ApiResponse {
    let id = *next_req;
    *next_req += 1;
    let outs = m.on_api(id, req, now);
    crate::manager::reply_for(&outs, id)
        .cloned()
        .unwrap_or_else(|| ApiResponse::error(500, "NoReply", "no immediate reply"))
}

fn event_label(e: &AgentEvent) -> &'static str {
    match e {
        AgentEvent::Joined { .. } => "joined",
        AgentEvent::JoinFailed(_) => "join_failed",
        AgentEvent::Reconnected { .. } => "reconnected",
        AgentEvent::ReconnectFailed(_) => "reconnect_failed",
        AgentEvent::Approved { .. } => "approved",
        AgentEvent::LinkDown => "link_down",
        AgentEvent::UpdateAcked { .. } => "update_acked",
        AgentEvent::Rejected { .. } => "rejected",
        AgentEvent::AlertAcked { .. } => "alert_acked",
        AgentEvent::Actuated { .. } => "actuated",
    }
}

fn validate(script: &ScenarioScript) -> Result<(), SimError> {
    if script.managers.is_empty() {
        return Err(invalid("at least one manager is required"));
    }
    if script.duration_ms == 0 {
        return Err(invalid("duration must be positive"));
    }
    let ids: BTreeSet<&str> = script.managers.iter().map(|m| m.id.as_str()).collect();
    if ids.len() != script.managers.len() {
        return Err(invalid("manager ids must be unique"));
    }
    if ids.contains(MOMS_TARGET) {
        return Err(invalid("`moms` is reserved"));
    }
    let apps: BTreeSet<&str> = script.apps.iter().map(|a| a.appid.as_str()).collect();
    if apps.len() != script.apps.len() || apps.contains(SIM_ADMIN) {
        return Err(invalid("application ids must be unique and not the operator's"));
    }
    for p in &script.probes {
        if p.at > script.duration_ms {
            return Err(invalid(format!("probe at {} is after the end of the run", p.at)));
        }
        match &p.via {
            Via::Moms if !script.moms => return Err(invalid("probe via moms without a manager of managers")),
            Via::Manager { id } if !ids.contains(id.as_str()) => {
                return Err(invalid(format!("probe names unknown manager {id}")));
            }
            _ => {}
        }
        if !apps.contains(p.app.as_str()) && p.app.as_str() != SIM_ADMIN {
            return Err(invalid(format!("probe uses unknown application {}", p.app)));
        }
        if p.method == Method::Get && p.body.is_some() {
            return Err(invalid("GET probes carry no body"));
        }
    }
    for f in &script.fleets {
        if f.profile.update_period_ms == 0 && f.profile.sensors.is_empty() {
            continue;
        }
        if f.profile.update_period_ms == 0 {
            return Err(invalid("update period must be positive"));
        }
    }
    Ok(())
}

/// Builds, runs and reports a scenario.
pub fn run_scenario(script: ScenarioScript) -> Result<SimReport, SimError> {
    let mut sim = Sim::new(script)?;
    Ok(sim.run())
}
