//! Live agent: drives an [`Agent`] over TCP links to manager agent listeners.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use iotmp_core::agent::{Agent, AgentAction, AgentConfig, AgentEvent, AgentTimer, Endpoint, Phase};
use iotmp_core::codec::{encode_message, FrameBuffer, ProtocolMessage};
use iotmp_core::geo::GeoHierarchy;
use iotmp_core::model::{validate_descriptor, AgentId, Mtid};
use iotmp_core::sim::DeviceProfile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::clock::Clock;
use crate::config::{AgentRunConfig, ConfigError};
use crate::ServerError;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

type LinkId = u64;
type Inspector = Box<dyn FnOnce(&Agent) + Send>;

enum Cmd {
    Frame { link: LinkId, from: Endpoint, msg: ProtocolMessage },
    Unreachable { link: LinkId, to: Endpoint },
    Down { link: LinkId, to: Endpoint },
    Timer(AgentTimer),
    Sensor,
    Inspect(Inspector),
}

/// Snapshot published after every event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentStatus {
    pub mtid: Mtid,
    pub phase: Phase,
    pub agentid: Option<AgentId>,
    pub manager: Option<Endpoint>,
    pub last_event: Option<String>,
}

pub struct AgentHandle {
    pub mtid: Mtid,
    status: watch::Receiver<AgentStatus>,
    cmd: mpsc::UnboundedSender<Cmd>,
    task: JoinHandle<()>,
}

impl AgentHandle {
    pub fn status(&self) -> AgentStatus {
        self.status.borrow().clone()
    }

    /// Waits until `pred` holds or `timeout` passes; returns the last status.
    pub async fn wait_for(&mut self, timeout: Duration, pred: impl Fn(&AgentStatus) -> bool) -> Result<AgentStatus, AgentStatus> {
        let res = tokio::time::timeout(timeout, async { self.status.wait_for(|s| pred(s)).await.map(|s| s.clone()) }).await;
        match res {
            Ok(Ok(s)) => Ok(s),
            _ => Err(self.status()),
        }
    }

    pub async fn inspect<T: Send + 'static>(&self, f: impl FnOnce(&Agent) -> T + Send + 'static) -> Option<T> {
        let (tx, rx) = oneshot::channel();
        let job: Inspector = Box::new(move |a| {
            let _ = tx.send(f(a));
        });
        self.cmd.send(Cmd::Inspect(job)).ok()?;
        rx.await.ok()
    }

    pub async fn shutdown(self) {
        self.task.abort();
        let _ = self.task.await;
    }

    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

struct Link {
    id: LinkId,
    tx: mpsc::UnboundedSender<ProtocolMessage>,
}

struct Runner {
    agent: Agent,
    profile: DeviceProfile,
    hierarchy: Arc<GeoHierarchy>,
    rng: ChaCha8Rng,
    clock: Clock,
    cmd: mpsc::UnboundedSender<Cmd>,
    links: BTreeMap<Endpoint, Link>,
    next_link: LinkId,
    status: watch::Sender<AgentStatus>,
    last_event: Option<String>,
}

/// Validates the configuration and starts the agent.
pub fn start(cfg: AgentRunConfig) -> Result<AgentHandle, ServerError> {
    let hierarchy = match &cfg.hierarchy_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
            GeoHierarchy::from_json(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
        }
        None => GeoHierarchy::bundled(),
    };
    let descriptor = validate_descriptor(cfg.descriptor.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut acfg = AgentConfig::new(descriptor, cfg.join.clone());
    acfg.colocated = cfg.colocated;
    acfg.behavioural = cfg.profile.behavioural();
    acfg.actuators = cfg.profile.actuators.clone();
    acfg.alert_rules = cfg.profile.alert_rules.clone();
    acfg.timing = cfg.timing;
    acfg.seed = cfg.seed;
    let agent = Agent::new(acfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mtid = agent.mtid().clone();
    let initial = AgentStatus {
        mtid: mtid.clone(),
        phase: agent.phase(),
        agentid: None,
        manager: None,
        last_event: None,
    };
    let (status_tx, status_rx) = watch::channel(initial);
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let runner = Runner {
        agent,
        profile: cfg.profile,
        hierarchy: Arc::new(hierarchy),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        clock: Clock::system(),
        cmd: cmd_tx.clone(),
        links: BTreeMap::new(),
        next_link: 1,
        status: status_tx,
        last_event: None,
    };
    let task = tokio::spawn(runner.run(cmd_rx));
    Ok(AgentHandle {
        mtid,
        status: status_rx,
        cmd: cmd_tx,
        task,
    })
}

impl Runner {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Cmd>) {
        let actions = match self.agent.start(self.clock.now()) {
            Ok(a) => a,
            Err(e) => {
                tracing::warn!(mtid = %self.agent.mtid(), error = %e, "agent failed to start");
                return;
            }
        };
        self.apply(actions);
        let sensor = if self.profile.update_period_ms > 0 && !self.profile.sensors.is_empty() {
            let cmd = self.cmd.clone();
            let period = Duration::from_millis(self.profile.update_period_ms);
            Some(tokio::spawn(async move {
                let mut tick = tokio::time::interval(period);
                tick.tick().await;
                loop {
                    tick.tick().await;
                    if cmd.send(Cmd::Sensor).is_err() {
                        break;
                    }
                }
            }))
        } else {
            None
        };
        while let Some(cmd) = rx.recv().await {
            let now = self.clock.now();
            let actions = match cmd {
                Cmd::Frame { link, from, msg } => {
                    if !self.current(&from, link) {
                        continue;
                    }
                    self.agent.on_message(&from, msg, now)
                }
                Cmd::Unreachable { link, to } => {
                    if !self.current(&to, link) {
                        continue;
                    }
                    self.links.remove(&to);
                    self.agent.on_unreachable(&to, now)
                }
                Cmd::Down { link, to } => {
                    if !self.current(&to, link) {
                        continue;
                    }
                    self.links.remove(&to);
                    self.agent.on_link_down(&to, now)
                }
                Cmd::Timer(t) => self.agent.on_timer(t, now),
                Cmd::Sensor => self.sensor_tick(now),
                Cmd::Inspect(f) => {
                    f(&self.agent);
                    Vec::new()
                }
            };
            self.apply(actions);
        }
        if let Some(s) = sensor {
            s.abort();
        }
    }

    fn current(&self, endpoint: &str, link: LinkId) -> bool {
        self.links.get(endpoint).is_some_and(|l| l.id == link)
    }

    fn sensor_tick(&mut self, now: u64) -> Vec<AgentAction> {
        let sending = self.profile.updates_until_ms.is_none_or(|u| now < u);
        if !sending || !matches!(self.agent.phase(), Phase::Registered | Phase::PendingApproval) {
            return Vec::new();
        }
        let readings = self.profile.sample(&self.hierarchy, &mut self.rng);
        self.agent.send_update(readings, now).unwrap_or_default()
    }

    fn apply(&mut self, actions: Vec<AgentAction>) {
        for a in actions {
            match a {
                AgentAction::Send { to, msg } => self.send(to, msg),
                AgentAction::Close { to } => {
                    self.links.remove(&to);
                }
                AgentAction::Timer { after_ms, timer } => {
                    let cmd = self.cmd.clone();
                    tokio::spawn(async move {
                        tokio::time::sleep(Duration::from_millis(after_ms)).await;
                        let _ = cmd.send(Cmd::Timer(timer));
                    });
                }
                AgentAction::Event(e) => self.event(e),
            }
        }
        let agentid = self.agent.agentid().cloned();
        let manager = self.agent.manager().cloned();
        let snapshot = AgentStatus {
            mtid: self.agent.mtid().clone(),
            phase: self.agent.phase(),
            agentid,
            manager,
            last_event: self.last_event.clone(),
        };
        self.status.send_if_modified(|s| {
            let changed = *s != snapshot;
            *s = snapshot;
            changed
        });
    }

    fn event(&mut self, e: AgentEvent) {
        tracing::debug!(mtid = %self.agent.mtid(), event = ?e, "agent event");
        let name = match &e {
            AgentEvent::Joined { .. } => "joined",
            AgentEvent::JoinFailed(_) => "join_failed",
            AgentEvent::Reconnected { .. } => "reconnected",
            AgentEvent::ReconnectFailed(_) => "reconnect_failed",
            AgentEvent::Approved { .. } => "approved",
            AgentEvent::LinkDown => "link_down",
            AgentEvent::UpdateAcked { .. } => return,
            AgentEvent::Rejected { .. } => "rejected",
            AgentEvent::AlertAcked { .. } => return,
            AgentEvent::Actuated { .. } => "actuated",
        };
        self.last_event = Some(name.to_string());
    }

    /// Queues `msg` on the link to `to`, dialling it first when needed.
    fn send(&mut self, to: Endpoint, msg: ProtocolMessage) {
        if let Some(link) = self.links.get(&to) {
            if link.tx.send(msg.clone()).is_ok() {
                return;
            }
        }
        let id = self.next_link;
        self.next_link += 1;
        let (tx, rx) = mpsc::unbounded_channel();
        let _ = tx.send(msg);
        self.links.insert(to.clone(), Link { id, tx });
        tokio::spawn(link_task(id, to, rx, self.cmd.clone()));
    }
}

async fn link_task(id: LinkId, to: Endpoint, mut rx: mpsc::UnboundedReceiver<ProtocolMessage>, cmd: mpsc::UnboundedSender<Cmd>) {
    let stream = match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(to.as_str())).await {
        Ok(Ok(s)) => s,
        _ => {
            let _ = cmd.send(Cmd::Unreachable { link: id, to });
            return;
        }
    };
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let Ok(bytes) = encode_message(&msg) else { continue };
            if wr.write_all(&bytes).await.is_err() {
                break;
            }
        }
    });
    let mut buf = FrameBuffer::new();
    let mut chunk = vec![0u8; 16 * 1024];
    'read: loop {
        let n = match rd.read(&mut chunk).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        buf.extend(&chunk[..n]);
        loop {
            match buf.next_message() {
                Ok(Some(msg)) => {
                    if cmd.send(Cmd::Frame { link: id, from: to.clone(), msg }).is_err() {
                        break 'read;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::info!(endpoint = %to, error = %e, "bad frame from manager");
                    break 'read;
                }
            }
        }
    }
    writer.abort();
    let _ = cmd.send(Cmd::Down { link: id, to });
}
