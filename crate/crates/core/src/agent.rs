//! Agent state machine. The agent owns one thing's descriptor, joins a manager
//! (directly, by association, or by reconnecting with a saved registration),
//! forwards readings, services manager requests and raises alerts.
//!
//! The agent performs no I/O. Every entry point takes the current time in
//! milliseconds and returns the actions the driver must carry out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Field, MessageKind, ProtocolMessage};
use crate::model::{
    check_behavioural_value, AgentId, AttrClass, AttrName, ManagerId, ModelError, Mtid,
    ValidatedDescriptor, Value,
};

/// Address of a manager's agent port, as understood by the driver.
pub type Endpoint = String;

/// Body field flagging that the agent runs on the thing itself.
pub const COLOCATED_FIELD: &str = "colocated";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Unregistered,
    Joining,
    PendingApproval,
    Registered,
    Disconnected,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinMethod {
    Direct { manager: Endpoint },
    Associate { endpoints: Vec<Endpoint> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
}

/// Raises an alert whenever a reading of `attribute` satisfies the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub attribute: AttrName,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl AlertRule {
    pub fn new(attribute: &str, comparator: Comparator, threshold: f64) -> Self {
        Self {
            attribute: AttrName::new(attribute).expect("valid attribute name"),
            comparator,
            threshold,
        }
    }

    /// Booleans compare as 0 and 1; other value types never match.
    pub fn matches(&self, name: &AttrName, value: &Value) -> bool {
        if *name != self.attribute {
            return false;
        }
        let x = match value {
            Value::Number(n) => *n,
            Value::Bool(b) => f64::from(u8::from(*b)),
            _ => return false,
        };
        match self.comparator {
            Comparator::Gt => x > self.threshold,
            Comparator::Ge => x >= self.threshold,
            Comparator::Lt => x < self.threshold,
            Comparator::Le => x <= self.threshold,
            Comparator::Eq => x == self.threshold,
        }
    }
}

/// An attribute the agent can change on request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSpec {
    pub initial: Value,
    /// Accepted target values; empty accepts any value of the initial type.
    #[serde(default)]
    pub allowed: Vec<Value>,
}

impl ActuatorSpec {
    fn accepts(&self, v: &Value) -> bool {
        if self.allowed.is_empty() {
            v.type_name() == self.initial.type_name()
        } else {
            self.allowed.contains(v)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentTiming {
    pub discovery_window_ms: u64,
    pub response_timeout_ms: u64,
    pub alert_retry_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for AgentTiming {
    fn default() -> Self {
        Self {
            discovery_window_ms: 500,
            response_timeout_ms: 3_000,
            alert_retry_ms: 1_000,
            backoff_base_ms: 1_000,
            backoff_cap_ms: 32_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub descriptor: ValidatedDescriptor,
    pub join: JoinMethod,
    /// The agent runs on the thing, so its AgentID is the MTID.
    pub colocated: bool,
    /// Behavioural attributes this thing reports.
    pub behavioural: BTreeSet<AttrName>,
    pub actuators: BTreeMap<AttrName, ActuatorSpec>,
    pub alert_rules: Vec<AlertRule>,
    pub timing: AgentTiming,
    /// Rejoin or reconnect automatically after failures and link loss.
    pub auto_rejoin: bool,
    pub seed: u64,
}

impl AgentConfig {
    pub fn new(descriptor: ValidatedDescriptor, join: JoinMethod) -> Self {
        Self {
            descriptor,
            join,
            colocated: false,
            behavioural: BTreeSet::new(),
            actuators: BTreeMap::new(),
            alert_rules: Vec::new(),
            timing: AgentTiming::default(),
            auto_rejoin: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let names = self.behavioural.iter().chain(self.actuators.keys());
        for name in names {
            if matches!(name.class(), AttrClass::Management | AttrClass::Location) {
                return Err(AgentError::NotBehavioural(name.clone()));
            }
        }
        for rule in &self.alert_rules {
            if !self.behavioural.contains(&rule.attribute) {
                return Err(AgentError::NotConfigured(rule.attribute.clone()));
            }
        }
        match &self.join {
            JoinMethod::Direct { manager } if manager.is_empty() => {
                Err(AgentError::NoManagerDiscovered)
            }
            JoinMethod::Associate { endpoints } if endpoints.is_empty() => {
                Err(AgentError::NoManagerDiscovered)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{op} not allowed in phase {phase}")]
    WrongPhase { op: &'static str, phase: Phase },
    #[error("a saved registration exists; reconnect instead")]
    ReconnectRequired,
    #[error("agent is not registered")]
    NotRegistered,
    #[error("{0} is not in the behavioural configuration")]
    NotConfigured(AttrName),
    #[error("{0} is not a behavioural attribute")]
    NotBehavioural(AttrName),
    #[error(transparent)]
    Malformed(#[from] ModelError),
    #[error("manager unreachable")]
    TransportUnreachable,
    #[error("join rejected: {0}")]
    JoinRejected(String),
    #[error("no manager answered the association request")]
    NoManagerDiscovered,
    #[error("manager has no record of this registration")]
    UnknownRegistration,
    #[error("manager refused traffic from an unapproved agent")]
    RejectedUnapproved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub mtid: Mtid,
    pub agentid: AgentId,
    pub manager: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinOutcome {
    PendingApproval { agentid: AgentId },
    Registered { mtid: Mtid, agentid: AgentId },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    Joined { manager: Endpoint, outcome: JoinOutcome },
    JoinFailed(AgentError),
    Reconnected { agentid: AgentId },
    ReconnectFailed(AgentError),
    Approved { agentid: AgentId },
    LinkDown,
    UpdateAcked { seq: u64 },
    Rejected { seq: u64, error: AgentError },
    AlertAcked { seq: u64 },
    Actuated { attribute: AttrName, value: Value },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentTimer {
    JoinTimeout(u64),
    DiscoveryClosed(u64),
    Retry(u64),
    AlertRetry(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentAction {
    Send { to: Endpoint, msg: ProtocolMessage },
    /// Drop any open connection to the endpoint.
    Close { to: Endpoint },
    Timer { after_ms: u64, timer: AgentTimer },
    Event(AgentEvent),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Advert {
    load: u64,
    managerid: ManagerId,
    endpoint: Endpoint,
}

#[derive(Debug, Clone, PartialEq)]
enum Attempt {
    Idle,
    Direct { manager: Endpoint },
    Discovering { endpoints: Vec<Endpoint>, ads: Vec<Advert> },
    Candidate { current: Advert, rest: Vec<Advert> },
    Reconnecting,
}

#[derive(Debug, Clone, PartialEq)]
struct CurrentValue {
    value: Value,
    unit: Option<String>,
    ts: u64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    phase: Phase,
    attempt: Attempt,
    epoch: u64,
    backoff_k: u32,
    saved: Option<Registration>,
    pending: Option<(Endpoint, AgentId)>,
    /// Manager holding this thing's record while it waits for approval; a
    /// rejoin after link loss goes back there.
    home: Option<Endpoint>,
    seq: u64,
    last_ts: u64,
    values: BTreeMap<AttrName, CurrentValue>,
    actuators: BTreeMap<AttrName, Value>,
    battery: f64,
    unacked_alerts: BTreeMap<u64, ProtocolMessage>,
    sent: BTreeMap<MessageKind, u64>,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(cfg: AgentConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        let battery = cfg
            .descriptor
            .get("BatteryLife")
            .and_then(|a| a.value.as_number())
            .unwrap_or(100.0);
        let actuators = cfg
            .actuators
            .iter()
            .map(|(k, v)| (k.clone(), v.initial.clone()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            phase: Phase::Unregistered,
            attempt: Attempt::Idle,
            epoch: 0,
            backoff_k: 0,
            saved: None,
            pending: None,
            home: None,
            seq: 0,
            last_ts: 0,
            values: BTreeMap::new(),
            actuators,
            battery,
            unacked_alerts: BTreeMap::new(),
            sent: BTreeMap::new(),
            rng,
        })
    }

    pub fn mtid(&self) -> &Mtid {
        self.cfg.descriptor.mtid()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn saved_registration(&self) -> Option<&Registration> {
        self.saved.as_ref()
    }

    pub fn agentid(&self) -> Option<&AgentId> {
        self.saved
            .as_ref()
            .map(|r| &r.agentid)
            .or(self.pending.as_ref().map(|(_, a)| a))
    }

    /// Endpoint of the manager this agent is bound to, if any.
    pub fn manager(&self) -> Option<&Endpoint> {
        self.saved
            .as_ref()
            .map(|r| &r.manager)
            .or(self.pending.as_ref().map(|(e, _)| e))
    }

    pub fn unacked_alerts(&self) -> usize {
        self.unacked_alerts.len()
    }

    pub fn sent_count(&self, kind: MessageKind) -> u64 {
        self.sent.get(&kind).copied().unwrap_or(0)
    }

    pub fn battery(&self) -> f64 {
        self.battery
    }

    pub fn set_battery(&mut self, pct: f64) {
        self.battery = pct.clamp(0.0, 100.0);
    }

    pub fn actuator_state(&self, name: &str) -> Option<&Value> {
        self.actuators
            .iter()
            .find(|(k, _)| k.as_str() == name)
            .map(|(_, v)| v)
    }

    fn sender(&self) -> String {
        self.agentid()
            .map_or_else(|| self.mtid().to_string(), ToString::to_string)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn message(&mut self, kind: MessageKind) -> ProtocolMessage {
        let seq = self.next_seq();
        ProtocolMessage::new(kind, seq, self.sender(), Some(self.mtid().clone()))
    }

    fn send(&mut self, to: &str, msg: ProtocolMessage, out: &mut Vec<AgentAction>) {
        *self.sent.entry(msg.kind).or_default() += 1;
        out.push(AgentAction::Send { to: to.to_string(), msg });
    }

    fn new_epoch(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch
    }

    /// Upper bound of the backoff delay after `k` consecutive failures.
    pub fn backoff_bound(timing: &AgentTiming, k: u32) -> u64 {
        timing
            .backoff_base_ms
            .saturating_mul(1u64 << k.min(32))
            .min(timing.backoff_cap_ms)
    }

    fn schedule_retry(&mut self, out: &mut Vec<AgentAction>) {
        if !self.cfg.auto_rejoin {
            return;
        }
        let bound = Self::backoff_bound(&self.cfg.timing, self.backoff_k);
        self.backoff_k = self.backoff_k.saturating_add(1);
        let delay = self.rng.random_range(0..=bound);
        let epoch = self.new_epoch();
        out.push(AgentAction::Timer {
            after_ms: delay,
            timer: AgentTimer::Retry(epoch),
        });
    }

    /// Begins the configured join method.
    pub fn start(&mut self, now: u64) -> Result<Vec<AgentAction>, AgentError> {
        match self.cfg.join.clone() {
            JoinMethod::Direct { manager } => self.direct_join(&manager, now),
            JoinMethod::Associate { endpoints } => self.associate_join(&endpoints, now),
        }
    }

    fn join_message(&mut self) -> ProtocolMessage {
        let mut msg = self.message(MessageKind::DirectJoin);
        for a in self.cfg.descriptor.attributes() {
            msg.body.push(Field::value(a.name.as_str(), a.value.clone()).with_unit(a.unit.clone()));
        }
        if self.cfg.colocated {
            msg.body.push(Field::value(COLOCATED_FIELD, Value::Bool(true)));
        }
        msg
    }

    fn guard_unregistered(&self, op: &'static str) -> Result<(), AgentError> {
        if self.saved.is_some() {
            return Err(AgentError::ReconnectRequired);
        }
        if self.phase != Phase::Unregistered {
            return Err(AgentError::WrongPhase { op, phase: self.phase });
        }
        Ok(())
    }

    /// Joins the manager at a known address.
    pub fn direct_join(&mut self, manager: &str, _now: u64) -> Result<Vec<AgentAction>, AgentError> {
        self.guard_unregistered("direct_join")?;
        let mut out = Vec::new();
        self.phase = Phase::Joining;
        self.attempt = Attempt::Direct {
            manager: manager.to_string(),
        };
        let msg = self.join_message();
        self.send(manager, msg, &mut out);
        let epoch = self.new_epoch();
        out.push(AgentAction::Timer {
            after_ms: self.cfg.timing.response_timeout_ms,
            timer: AgentTimer::JoinTimeout(epoch),
        });
        Ok(out)
    }

    /// Broadcasts an association request and joins the best advertiser.
    pub fn associate_join(&mut self, endpoints: &[Endpoint], _now: u64) -> Result<Vec<AgentAction>, AgentError> {
        self.guard_unregistered("associate_join")?;
        let mut out = Vec::new();
        self.phase = Phase::Joining;
        self.attempt = Attempt::Discovering {
            endpoints: endpoints.to_vec(),
            ads: Vec::new(),
        };
        for ep in endpoints {
            let msg = ProtocolMessage::new(MessageKind::AssociateReq, self.next_seq(), self.sender(), None)
                .with(Field::text("ID", self.mtid().as_str()));
            self.send(ep, msg, &mut out);
        }
        let epoch = self.new_epoch();
        out.push(AgentAction::Timer {
            after_ms: self.cfg.timing.discovery_window_ms,
            timer: AgentTimer::DiscoveryClosed(epoch),
        });
        Ok(out)
    }

    /// Re-attaches to the saved manager without creating a new record.
    pub fn reconnect(&mut self, _now: u64) -> Result<Vec<AgentAction>, AgentError> {
        if self.phase != Phase::Disconnected {
            return Err(AgentError::WrongPhase {
                op: "reconnect",
                phase: self.phase,
            });
        }
        let reg = self.saved.clone().ok_or(AgentError::NotRegistered)?;
        let mut out = Vec::new();
        self.attempt = Attempt::Reconnecting;
        let msg = self
            .message(MessageKind::Reconnect)
            .with(Field::text("agentid", reg.agentid.as_str()));
        self.send(&reg.manager, msg, &mut out);
        let epoch = self.new_epoch();
        out.push(AgentAction::Timer {
            after_ms: self.cfg.timing.response_timeout_ms,
            timer: AgentTimer::JoinTimeout(epoch),
        });
        Ok(out)
    }

    /// Records and forwards readings. Alert rules are checked on every reading.
    pub fn send_update(&mut self, readings: Vec<(AttrName, Value)>, now: u64) -> Result<Vec<AgentAction>, AgentError> {
        let manager = match self.phase {
            Phase::Registered | Phase::PendingApproval => {
                self.manager().cloned().ok_or(AgentError::NotRegistered)?
            }
            _ => return Err(AgentError::NotRegistered),
        };
        if readings.is_empty() {
            return Ok(Vec::new());
        }
        for (name, value) in &readings {
            if !self.cfg.behavioural.contains(name) {
                return Err(AgentError::NotConfigured(name.clone()));
            }
            check_behavioural_value(name, value)?;
        }
        let ts = now.max(self.last_ts);
        self.last_ts = ts;
        let mut out = Vec::new();
        let mut msg = self.message(MessageKind::Update);
        let mut alerts = Vec::new();
        for (name, value) in readings {
            if self.cfg.alert_rules.iter().any(|r| r.matches(&name, &value)) {
                alerts.push(Field::value(name.as_str(), value.clone()).at(ts));
            }
            msg.body.push(Field::value(name.as_str(), value.clone()).at(ts));
            self.values.insert(name, CurrentValue { value, unit: None, ts });
        }
        self.send(&manager, msg, &mut out);
        for field in alerts {
            let alert = self.message(MessageKind::Alert).with(field);
            self.unacked_alerts.insert(alert.seq, alert.clone());
            out.push(AgentAction::Timer {
                after_ms: self.cfg.timing.alert_retry_ms,
                timer: AgentTimer::AlertRetry(alert.seq),
            });
            self.send(&manager, alert, &mut out);
        }
        Ok(out)
    }

    pub fn on_timer(&mut self, timer: AgentTimer, now: u64) -> Vec<AgentAction> {
        let mut out = Vec::new();
        match timer {
            AgentTimer::AlertRetry(seq) => {
                let live = matches!(self.phase, Phase::Registered | Phase::PendingApproval);
                if let (true, Some(msg), Some(to)) =
                    (live, self.unacked_alerts.get(&seq).cloned(), self.manager().cloned())
                {
                    self.send(&to, msg, &mut out);
                    out.push(AgentAction::Timer {
                        after_ms: self.cfg.timing.alert_retry_ms,
                        timer,
                    });
                }
            }
            _ if timer_epoch(timer) != self.epoch => {}
            AgentTimer::JoinTimeout(_) => self.attempt_failed(None, now, &mut out),
            AgentTimer::DiscoveryClosed(_) => self.close_discovery(now, &mut out),
            AgentTimer::Retry(_) => {
                let res = match self.phase {
                    Phase::Disconnected => self.reconnect(now),
                    Phase::Unregistered => match self.home.clone() {
                        Some(home) => self.direct_join(&home, now),
                        None => self.start(now),
                    },
                    _ => Ok(Vec::new()),
                };
                if let Ok(actions) = res {
                    out.extend(actions);
                }
            }
        }
        out
    }

    fn close_discovery(&mut self, now: u64, out: &mut Vec<AgentAction>) {
        let Attempt::Discovering { endpoints, mut ads } = std::mem::replace(&mut self.attempt, Attempt::Idle) else {
            return;
        };
        ads.sort();
        ads.dedup_by(|a, b| a.endpoint == b.endpoint);
        for ep in &endpoints {
            if ads.first().is_none_or(|best| &best.endpoint != ep) {
                out.push(AgentAction::Close { to: ep.clone() });
            }
        }
        if ads.is_empty() {
            self.fail_join(AgentError::NoManagerDiscovered, out);
            return;
        }
        let current = ads.remove(0);
        self.try_candidate(current, ads, now, out);
    }

    fn try_candidate(&mut self, current: Advert, rest: Vec<Advert>, _now: u64, out: &mut Vec<AgentAction>) {
        let msg = self.join_message();
        let to = current.endpoint.clone();
        self.attempt = Attempt::Candidate { current, rest };
        self.send(&to, msg, out);
        let epoch = self.new_epoch();
        out.push(AgentAction::Timer {
            after_ms: self.cfg.timing.response_timeout_ms,
            timer: AgentTimer::JoinTimeout(epoch),
        });
    }

    fn fail_join(&mut self, err: AgentError, out: &mut Vec<AgentAction>) {
        self.phase = Phase::Unregistered;
        self.attempt = Attempt::Idle;
        self.new_epoch();
        out.push(AgentAction::Event(AgentEvent::JoinFailed(err)));
        self.schedule_retry(out);
    }

    /// The current attempt did not complete: timeout, unreachable endpoint or
    /// rejection. `reason` carries the rejection text when there was one.
    fn attempt_failed(&mut self, reason: Option<AgentError>, now: u64, out: &mut Vec<AgentAction>) {
        match std::mem::replace(&mut self.attempt, Attempt::Idle) {
            Attempt::Direct { .. } => {
                self.fail_join(reason.unwrap_or(AgentError::TransportUnreachable), out)
            }
            Attempt::Candidate { current, mut rest } => {
                out.push(AgentAction::Close {
                    to: current.endpoint.clone(),
                });
                if rest.is_empty() {
                    self.fail_join(reason.unwrap_or(AgentError::TransportUnreachable), out);
                } else {
                    let next = rest.remove(0);
                    self.try_candidate(next, rest, now, out);
                }
            }
            Attempt::Reconnecting => {
                self.new_epoch();
                out.push(AgentAction::Event(AgentEvent::ReconnectFailed(
                    reason.unwrap_or(AgentError::TransportUnreachable),
                )));
                self.schedule_retry(out);
            }
            other @ Attempt::Discovering { .. } => self.attempt = other,
            Attempt::Idle => {}
        }
    }

    /// The driver could not reach `endpoint`.
    pub fn on_unreachable(&mut self, endpoint: &str, now: u64) -> Vec<AgentAction> {
        let mut out = Vec::new();
        let relevant = match &self.attempt {
            Attempt::Direct { manager } => manager == endpoint,
            Attempt::Candidate { current, .. } => current.endpoint == endpoint,
            Attempt::Reconnecting => self.saved.as_ref().is_some_and(|r| r.manager == endpoint),
            Attempt::Discovering { .. } | Attempt::Idle => false,
        };
        if relevant {
            self.attempt_failed(None, now, &mut out);
        } else if self.manager().is_some_and(|m| m == endpoint)
            && matches!(self.phase, Phase::Registered | Phase::PendingApproval)
        {
            out.extend(self.on_link_down(endpoint, now));
        }
        out
    }

    /// The connection to `endpoint` closed.
    pub fn on_link_down(&mut self, endpoint: &str, now: u64) -> Vec<AgentAction> {
        let mut out = Vec::new();
        if self.manager().is_none_or(|m| m != endpoint) {
            if matches!(&self.attempt, Attempt::Direct { manager } if manager == endpoint)
                || matches!(&self.attempt, Attempt::Candidate { current, .. } if current.endpoint == endpoint)
            {
                self.attempt_failed(None, now, &mut out);
            }
            return out;
        }
        match self.phase {
            Phase::Registered => {
                self.phase = Phase::Disconnected;
                self.attempt = Attempt::Idle;
                self.backoff_k = 0;
                self.new_epoch();
                out.push(AgentAction::Event(AgentEvent::LinkDown));
                self.schedule_retry(&mut out);
            }
            Phase::PendingApproval => {
                self.home = self.pending.take().map(|(e, _)| e);
                self.phase = Phase::Unregistered;
                self.attempt = Attempt::Idle;
                self.backoff_k = 0;
                self.new_epoch();
                out.push(AgentAction::Event(AgentEvent::LinkDown));
                self.schedule_retry(&mut out);
            }
            Phase::Disconnected if self.attempt == Attempt::Reconnecting => {
                self.attempt_failed(None, now, &mut out);
            }
            _ => {}
        }
        out
    }

    pub fn on_message(&mut self, from: &str, msg: ProtocolMessage, now: u64) -> Vec<AgentAction> {
        let mut out = Vec::new();
        if msg.mtid.as_ref().is_some_and(|m| m != self.mtid()) {
            return out;
        }
        match msg.kind {
            MessageKind::AssociateResp => self.on_advert(from, &msg),
            MessageKind::JoinAck => self.on_join_ack(from, &msg, now, &mut out),
            MessageKind::Ack => self.on_ack(from, &msg, &mut out),
            MessageKind::Error => self.on_error(from, &msg, now, &mut out),
            MessageKind::Get => self.on_get(from, &msg, &mut out),
            MessageKind::Set => self.on_set(from, &msg, now, &mut out),
            MessageKind::MgmtGet => self.on_mgmt_get(from, &msg, &mut out),
            _ => {}
        }
        out
    }

    fn on_advert(&mut self, from: &str, msg: &ProtocolMessage) {
        let Attempt::Discovering { endpoints, ads } = &mut self.attempt else {
            return;
        };
        if !endpoints.iter().any(|e| e == from) {
            return;
        }
        let Some(managerid) = msg.text_field("managerid").and_then(|m| ManagerId::new(m).ok()) else {
            return;
        };
        let load = msg
            .field("load")
            .and_then(|f| f.value.as_ref())
            .and_then(Value::as_number)
            .filter(|n| *n >= 0.0)
            .map_or(u64::MAX, |n| n as u64);
        ads.push(Advert {
            load,
            managerid,
            endpoint: from.to_string(),
        });
    }

    fn expecting_ack_from(&self, from: &str) -> bool {
        match &self.attempt {
            Attempt::Direct { manager } => manager == from,
            Attempt::Candidate { current, .. } => current.endpoint == from,
            Attempt::Reconnecting => self.saved.as_ref().is_some_and(|r| r.manager == from),
            _ => false,
        }
    }

    fn on_join_ack(&mut self, from: &str, msg: &ProtocolMessage, now: u64, out: &mut Vec<AgentAction>) {
        let status = msg.text_field("status").unwrap_or_default();
        let agentid = msg.text_field("agentid").and_then(|a| AgentId::new(a).ok());
        if !self.expecting_ack_from(from) {
            // Approval pushed by the manager while this agent waits.
            if let (Phase::PendingApproval, "registered", Some(id)) = (self.phase, status, agentid) {
                if self.pending.as_ref().is_some_and(|(e, a)| e == from && *a == id) {
                    self.promote(from, id, out);
                }
            }
            return;
        }
        let reconnecting = self.attempt == Attempt::Reconnecting;
        match (status, agentid) {
            ("registered", Some(id)) => {
                self.attempt = Attempt::Idle;
                self.backoff_k = 0;
                self.new_epoch();
                self.pending = None;
                self.home = None;
                self.phase = Phase::Registered;
                self.saved = Some(Registration {
                    mtid: self.mtid().clone(),
                    agentid: id.clone(),
                    manager: from.to_string(),
                });
                out.push(AgentAction::Event(if reconnecting {
                    AgentEvent::Reconnected { agentid: id.clone() }
                } else {
                    AgentEvent::Joined {
                        manager: from.to_string(),
                        outcome: JoinOutcome::Registered {
                            mtid: self.mtid().clone(),
                            agentid: id,
                        },
                    }
                }));
                self.resend_alerts(from, out);
            }
            ("pending", Some(id)) => {
                self.attempt = Attempt::Idle;
                self.backoff_k = 0;
                self.new_epoch();
                self.saved = None;
                self.pending = Some((from.to_string(), id.clone()));
                self.phase = Phase::PendingApproval;
                out.push(AgentAction::Event(AgentEvent::Joined {
                    manager: from.to_string(),
                    outcome: JoinOutcome::PendingApproval { agentid: id },
                }));
            }
            _ => {
                self.home = None;
                let reason = msg.text_field("reason").unwrap_or("rejected").to_string();
                if reconnecting {
                    self.saved = None;
                    self.phase = Phase::Unregistered;
                    self.attempt = Attempt::Idle;
                    self.new_epoch();
                    out.push(AgentAction::Event(AgentEvent::ReconnectFailed(AgentError::JoinRejected(reason))));
                    self.schedule_retry(out);
                } else {
                    self.attempt_failed(Some(AgentError::JoinRejected(reason)), now, out);
                }
            }
        }
    }

    fn promote(&mut self, from: &str, id: AgentId, out: &mut Vec<AgentAction>) {
        self.pending = None;
        self.phase = Phase::Registered;
        self.saved = Some(Registration {
            mtid: self.mtid().clone(),
            agentid: id.clone(),
            manager: from.to_string(),
        });
        out.push(AgentAction::Event(AgentEvent::Approved { agentid: id }));
    }

    fn resend_alerts(&mut self, to: &str, out: &mut Vec<AgentAction>) {
        let pending: Vec<ProtocolMessage> = self.unacked_alerts.values().cloned().collect();
        for msg in pending {
            out.push(AgentAction::Timer {
                after_ms: self.cfg.timing.alert_retry_ms,
                timer: AgentTimer::AlertRetry(msg.seq),
            });
            self.send(to, msg, out);
        }
    }

    fn on_ack(&mut self, from: &str, msg: &ProtocolMessage, out: &mut Vec<AgentAction>) {
        let Some(re) = msg.re else { return };
        if self.phase == Phase::PendingApproval {
            // The manager only acknowledges data from approved agents.
            if let Some((ep, id)) = self.pending.clone() {
                if ep == from {
                    self.promote(from, id, out);
                }
            }
        }
        if self.unacked_alerts.remove(&re).is_some() {
            out.push(AgentAction::Event(AgentEvent::AlertAcked { seq: re }));
        } else {
            out.push(AgentAction::Event(AgentEvent::UpdateAcked { seq: re }));
        }
    }

    fn on_error(&mut self, from: &str, msg: &ProtocolMessage, now: u64, out: &mut Vec<AgentAction>) {
        let code = msg.text_field("code").unwrap_or_default();
        match code {
            "Unapproved" => {
                if let Some(re) = msg.re {
                    self.unacked_alerts.remove(&re);
                    out.push(AgentAction::Event(AgentEvent::Rejected {
                        seq: re,
                        error: AgentError::RejectedUnapproved,
                    }));
                }
            }
            "UnknownRegistration" => {
                let ours = self.manager().is_some_and(|m| m == from) || self.expecting_ack_from(from);
                if !ours {
                    return;
                }
                let was_reconnecting = self.attempt == Attempt::Reconnecting;
                self.saved = None;
                self.pending = None;
                self.home = None;
                self.phase = Phase::Unregistered;
                self.attempt = Attempt::Idle;
                self.backoff_k = 0;
                self.new_epoch();
                out.push(AgentAction::Event(if was_reconnecting {
                    AgentEvent::ReconnectFailed(AgentError::UnknownRegistration)
                } else {
                    AgentEvent::JoinFailed(AgentError::UnknownRegistration)
                }));
                if self.cfg.auto_rejoin {
                    if let Ok(actions) = self.start(now) {
                        out.extend(actions);
                    }
                }
            }
            other => {
                if self.expecting_ack_from(from) {
                    self.attempt_failed(Some(AgentError::JoinRejected(other.to_string())), now, out);
                }
            }
        }
    }

    fn error_reply(&mut self, to: &str, re: u64, code: &str, out: &mut Vec<AgentAction>) {
        let msg = self
            .message(MessageKind::Error)
            .reply_to(re)
            .with(Field::text("code", code));
        self.send(to, msg, out);
    }

    fn serving(&self, from: &str) -> bool {
        self.phase == Phase::Registered && self.manager().is_some_and(|m| m == from)
    }

    fn on_get(&mut self, from: &str, msg: &ProtocolMessage, out: &mut Vec<AgentAction>) {
        if !self.serving(from) {
            self.error_reply(from, msg.seq, "NotRegistered", out);
            return;
        }
        let names: Vec<String> = if msg.body.is_empty() {
            let mut all: Vec<String> = self.values.keys().map(ToString::to_string).collect();
            all.extend(self.actuators.keys().map(ToString::to_string));
            all.push("BatteryLife".into());
            all
        } else {
            msg.body.iter().map(|f| f.name.clone()).collect()
        };
        let mut reply = self.message(MessageKind::Update).reply_to(msg.seq);
        for name in names {
            match self.current(&name) {
                Some((value, unit, ts)) => reply.body.push(Field::value(name, value).with_unit(unit).at(ts)),
                None => {
                    self.error_reply(from, msg.seq, "UnknownAttribute", out);
                    return;
                }
            }
        }
        self.send(from, reply, out);
    }

    fn current(&self, name: &str) -> Option<(Value, Option<String>, u64)> {
        if let Some((_, v)) = self.values.iter().find(|(k, _)| k.as_str() == name) {
            return Some((v.value.clone(), v.unit.clone(), v.ts));
        }
        if let Some(v) = self.actuator_state(name) {
            return Some((v.clone(), None, self.last_ts));
        }
        if name == "BatteryLife" {
            return Some((Value::Number(self.battery), Some("%".into()), self.last_ts));
        }
        self.cfg
            .descriptor
            .get(name)
            .map(|a| (a.value.clone(), a.unit.clone(), self.last_ts))
    }

    fn on_set(&mut self, from: &str, msg: &ProtocolMessage, now: u64, out: &mut Vec<AgentAction>) {
        if !self.serving(from) {
            self.error_reply(from, msg.seq, "NotRegistered", out);
            return;
        }
        let mut changes = Vec::new();
        for f in &msg.body {
            let spec = self
                .cfg
                .actuators
                .iter()
                .find(|(k, _)| k.as_str() == f.name)
                .map(|(k, s)| (k.clone(), s.clone()));
            let Some((name, spec)) = spec else {
                self.error_reply(from, msg.seq, "NotActuatable", out);
                return;
            };
            let value = f.value.clone().expect("SET fields carry values");
            if !spec.accepts(&value) {
                self.error_reply(from, msg.seq, "ActuationFailed", out);
                return;
            }
            changes.push((name, value));
        }
        let ts = now.max(self.last_ts);
        self.last_ts = ts;
        let mut reply = self.message(MessageKind::Update).reply_to(msg.seq);
        for (name, value) in changes {
            reply.body.push(Field::value(name.as_str(), value.clone()).at(ts));
            self.actuators.insert(name.clone(), value.clone());
            out.push(AgentAction::Event(AgentEvent::Actuated { attribute: name, value }));
        }
        self.send(from, reply, out);
    }

    fn on_mgmt_get(&mut self, from: &str, msg: &ProtocolMessage, out: &mut Vec<AgentAction>) {
        if !self.serving(from) {
            self.error_reply(from, msg.seq, "NotRegistered", out);
            return;
        }
        let sent_total: u64 = self.sent.values().sum();
        let reply = self
            .message(MessageKind::Update)
            .reply_to(msg.seq)
            .with(Field::value("BatteryLife", Value::Number(self.battery)).with_unit(Some("%".into())))
            .with(Field::value("FramesSent", Value::Number(sent_total as f64)));
        self.send(from, reply, out);
    }
}

fn timer_epoch(t: AgentTimer) -> u64 {
    match t {
        AgentTimer::JoinTimeout(e) | AgentTimer::DiscoveryClosed(e) | AgentTimer::Retry(e) | AgentTimer::AlertRetry(e) => e,
    }
}
