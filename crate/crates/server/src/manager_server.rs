//! Manager service: agent TCP listener, plaintext and TLS API listeners, and
//! topology publishing. One task owns the [`Manager`]; everything else talks
//! to it over a channel.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Request, State};
use axum::response::Response;
use axum::Router;
use iotmp_core::codec::{encode_message, FrameBuffer, ProtocolMessage};
use iotmp_core::geo::GeoHierarchy;
use iotmp_core::http::{ApiRequest, ApiResponse, Method};
use iotmp_core::manager::{ConnId, Manager, ManagerOutput, ManagerTimer, ReqId};
use iotmp_core::model::ManagerId;
use iotmp_core::moms::{TopologyReport, MANAGER_KEY_HEADER};
use iotmp_core::api::OPERATOR_KEY_HEADER;
use iotmp_core::store::Store;
use serde::Deserialize;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::{JoinHandle, JoinSet};
use tower_http::services::ServeDir;

use crate::clock::Clock;
use crate::config::{ConfigError, ManagerServerConfig};
use crate::http_glue::{client_with_roots, to_api, to_response};
use crate::{tls, ServerError};

type Inspector = Box<dyn FnOnce(&Manager) + Send>;

enum Cmd {
    Connected { conn: ConnId, tx: mpsc::UnboundedSender<ProtocolMessage> },
    Frame { conn: ConnId, msg: ProtocolMessage },
    Closed { conn: ConnId },
    Api { req: ApiRequest, reply: oneshot::Sender<ApiResponse> },
    Timer(ManagerTimer),
    Published(bool),
    Inspect(Inspector),
}

/// A running manager.
pub struct ManagerHandle {
    pub id: ManagerId,
    pub http_addr: SocketAddr,
    pub https_addr: Option<SocketAddr>,
    pub agent_addr: SocketAddr,
    pub clock: Clock,
    cmd: mpsc::UnboundedSender<Cmd>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ManagerHandle {
    pub fn http_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// HTTPS base URL using the `localhost` name the certificate carries.
    pub fn https_url(&self) -> Option<String> {
        self.https_addr.map(|a| format!("https://localhost:{}", a.port()))
    }

    /// Runs `f` against the manager state between two events.
    pub async fn inspect<T: Send + 'static>(&self, f: impl FnOnce(&Manager) -> T + Send + 'static) -> Option<T> {
        let (tx, rx) = oneshot::channel();
        let job: Inspector = Box::new(move |m| {
            let _ = tx.send(f(m));
        });
        self.cmd.send(Cmd::Inspect(job)).ok()?;
        rx.await.ok()
    }

    /// Sends an API request straight to the manager, bypassing HTTP.
    pub async fn api(&self, req: ApiRequest) -> Option<ApiResponse> {
        let (tx, rx) = oneshot::channel();
        self.cmd.send(Cmd::Api { req, reply: tx }).ok()?;
        rx.await.ok()
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            t.abort();
            let _ = t.await;
        }
    }

    /// Resolves when the service stops.
    pub async fn wait(mut self) {
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::BindFailure { addr, source })
}

/// Base URL for the topology. TLS bases use `localhost` for loopback
/// listeners so certificate names match.
fn advertised(addr: SocketAddr, scheme: &str) -> String {
    let local = addr.ip().is_unspecified() || addr.ip().is_loopback();
    match (scheme, local) {
        ("https", true) => format!("https://localhost:{}", addr.port()),
        (_, true) => format!("{scheme}://127.0.0.1:{}", addr.port()),
        _ => format!("{scheme}://{addr}"),
    }
}

/// Binds every listener and starts the service.
pub async fn start(cfg: ManagerServerConfig) -> Result<ManagerHandle, ServerError> {
    cfg.validate()?;
    let hierarchy = match &cfg.hierarchy_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
            GeoHierarchy::from_json(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?
        }
        None => GeoHierarchy::bundled(),
    };
    let store = match &cfg.store_path {
        Some(p) => Store::open(p).map_err(|e| ConfigError::Invalid(format!("store {}: {e}", p.display())))?,
        None => Store::in_memory(),
    };
    let acceptor = cfg.tls.as_ref().map(tls::acceptor).transpose()?;
    let http = bind(cfg.http_listen).await?;
    let https = match cfg.https_listen {
        Some(a) => Some(bind(a).await?),
        None => None,
    };
    let agents = bind(cfg.agent_listen).await?;
    let http_addr = http.local_addr()?;
    let https_addr = https.as_ref().map(|l| l.local_addr()).transpose()?;
    let agent_addr = agents.local_addr()?;

    let mut mcfg = cfg.manager.clone();
    if mcfg.address.is_empty() {
        let mut bases = vec![advertised(http_addr, "http")];
        bases.extend(https_addr.map(|a| advertised(a, "https")));
        mcfg.address = bases.join(",");
    }
    mcfg.publish = mcfg.publish || cfg.moms.is_some();
    let id = mcfg.id.clone();
    let manager = Manager::new(mcfg, Arc::new(hierarchy), store);
    let clock = if cfg.simulated_clock { Clock::simulated() } else { Clock::system() };
    let publisher = match &cfg.moms {
        Some(link) => Some(Publisher {
            client: client_with_roots(&link.ca_certs, link.timeout_ms)?,
            url: format!("{}/topology", link.url.trim_end_matches('/')),
            key: link.key.clone(),
        }),
        None => None,
    };

    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut tasks = Vec::new();
    let core = Core {
        m: manager,
        clock: clock.clone(),
        cmd: cmd_tx.clone(),
        conns: BTreeMap::new(),
        pending: BTreeMap::new(),
        next_req: 1,
        publisher,
    };
    tasks.push(tokio::spawn(core.run(cmd_rx, stop_rx.clone())));
    tasks.push(tokio::spawn(accept_agents(agents, cmd_tx.clone(), stop_rx.clone())));

    let operator_key = cfg.manager.operator_key.clone();
    let app = |secure| {
        let st = HttpState {
            cmd: cmd_tx.clone(),
            secure,
            clock: clock.clone(),
            operator_key: operator_key.clone(),
        };
        let mut r = Router::new();
        if let Some(dir) = &cfg.console_dir {
            r = r.nest_service("/console", ServeDir::new(dir));
        }
        r.fallback(handle_http).with_state(st)
    };
    let plain = app(false);
    let mut stop = stop_rx.clone();
    tasks.push(tokio::spawn(async move {
        let _ = axum::serve(http, plain)
            .with_graceful_shutdown(async move {
                let _ = stop.changed().await;
            })
            .await;
    }));
    if let (Some(listener), Some(acceptor)) = (https, acceptor) {
        tasks.push(tokio::spawn(tls::serve(listener, acceptor, app(true), stop_rx.clone())));
    }
    tracing::info!(manager = %id, %http_addr, ?https_addr, %agent_addr, "manager ready");
    Ok(ManagerHandle {
        id,
        http_addr,
        https_addr,
        agent_addr,
        clock,
        cmd: cmd_tx,
        stop: stop_tx,
        tasks,
    })
}

#[derive(Clone)]
struct HttpState {
    cmd: mpsc::UnboundedSender<Cmd>,
    secure: bool,
    clock: Clock,
    operator_key: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClockBody {
    now: u64,
}

async fn handle_http(State(st): State<HttpState>, req: Request) -> Response {
    let api = match to_api(req, st.secure).await {
        Ok(a) => a,
        Err(e) => return to_response(e),
    };
    if api.path == "/clock" {
        return to_response(clock_route(&st, &api));
    }
    let (tx, rx) = oneshot::channel();
    if st.cmd.send(Cmd::Api { req: api, reply: tx }).is_err() {
        return to_response(ApiResponse::error(503, "Unavailable", "manager stopping"));
    }
    match rx.await {
        Ok(r) => to_response(r),
        Err(_) => to_response(ApiResponse::error(503, "Unavailable", "manager stopping")),
    }
}

/// `GET /clock` reads the service clock; `PUT /clock` moves a simulated
/// clock and needs the operator key.
fn clock_route(st: &HttpState, req: &ApiRequest) -> ApiResponse {
    match req.method {
        Method::Get => ApiResponse::json(
            200,
            &serde_json::json!({ "now": st.clock.now(), "simulated": st.clock.is_simulated() }),
        ),
        Method::Put => {
            if !st.clock.is_simulated() {
                return ApiResponse::error(409, "ClockNotSimulated", "the clock follows wall time");
            }
            let key_ok = st.operator_key.as_deref().is_some_and(|k| req.header(OPERATOR_KEY_HEADER) == Some(k));
            if !key_ok {
                return ApiResponse::error(401, "Unauthorized", "operator key required");
            }
            match serde_json::from_slice::<ClockBody>(&req.body) {
                Ok(b) => {
                    st.clock.set(b.now);
                    ApiResponse::json(200, &serde_json::json!({ "now": st.clock.now(), "simulated": true }))
                }
                Err(e) => ApiResponse::error(400, "MalformedBody", e),
            }
        }
        _ => ApiResponse::error(405, "MethodNotAllowed", "GET or PUT"),
    }
}

async fn accept_agents(listener: TcpListener, cmd: mpsc::UnboundedSender<Cmd>, mut stop: watch::Receiver<bool>) {
    let mut conns = JoinSet::new();
    let mut next: ConnId = 1;
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, peer)) = accepted else { continue };
                let conn = next;
                next += 1;
                tracing::debug!(conn, %peer, "agent connected");
                conns.spawn(agent_conn(conn, stream, cmd.clone()));
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
            _ = stop.changed() => break,
        }
    }
}

async fn agent_conn(conn: ConnId, stream: TcpStream, cmd: mpsc::UnboundedSender<Cmd>) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ProtocolMessage>();
    if cmd.send(Cmd::Connected { conn, tx }).is_err() {
        return;
    }
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
                    if cmd.send(Cmd::Frame { conn, msg }).is_err() {
                        break 'read;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::info!(conn, error = %e, "dropping agent connection on bad frame");
                    break 'read;
                }
            }
        }
    }
    writer.abort();
    let _ = cmd.send(Cmd::Closed { conn });
}

struct Publisher {
    client: reqwest::Client,
    url: String,
    key: String,
}

struct Core {
    m: Manager,
    clock: Clock,
    cmd: mpsc::UnboundedSender<Cmd>,
    conns: BTreeMap<ConnId, mpsc::UnboundedSender<ProtocolMessage>>,
    pending: BTreeMap<ReqId, oneshot::Sender<ApiResponse>>,
    next_req: ReqId,
    publisher: Option<Publisher>,
}

impl Core {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Cmd>, mut stop: watch::Receiver<bool>) {
        let outs = self.m.start(self.clock.now());
        self.apply(outs);
        loop {
            let cmd = tokio::select! {
                c = rx.recv() => match c { Some(c) => c, None => break },
                _ = stop.changed() => break,
            };
            let now = self.clock.now();
            let outs = match cmd {
                Cmd::Connected { conn, tx } => {
                    self.conns.insert(conn, tx);
                    Vec::new()
                }
                Cmd::Frame { conn, msg } => self.m.on_frame(conn, msg, now),
                Cmd::Closed { conn } => {
                    self.conns.remove(&conn);
                    self.m.on_disconnect(conn, now)
                }
                Cmd::Api { req, reply } => {
                    let id = self.next_req;
                    self.next_req += 1;
                    self.pending.insert(id, reply);
                    self.m.on_api(id, req, now)
                }
                Cmd::Timer(t) => self.m.on_timer(t, now),
                Cmd::Published(ok) => self.m.on_publish_result(ok, now),
                Cmd::Inspect(f) => {
                    f(&self.m);
                    Vec::new()
                }
            };
            self.apply(outs);
        }
    }

    fn apply(&mut self, outs: Vec<ManagerOutput>) {
        for o in outs {
            match o {
                ManagerOutput::Send { conn, msg } => {
                    if let Some(tx) = self.conns.get(&conn) {
                        let _ = tx.send(msg);
                    }
                }
                ManagerOutput::Reply { req, response } => {
                    if let Some(tx) = self.pending.remove(&req) {
                        let _ = tx.send(response);
                    }
                }
                ManagerOutput::Timer { at, timer } => {
                    let delay = at.saturating_sub(self.clock.now());
                    let cmd = self.cmd.clone();
                    tokio::spawn(async move {
                        tokio::time::sleep(Duration::from_millis(delay)).await;
                        let _ = cmd.send(Cmd::Timer(timer));
                    });
                }
                ManagerOutput::Publish(report) => self.publish(report),
            }
        }
    }

    fn publish(&self, report: TopologyReport) {
        let cmd = self.cmd.clone();
        let Some(p) = &self.publisher else {
            let _ = cmd.send(Cmd::Published(false));
            return;
        };
        let req = p
            .client
            .post(&p.url)
            .header(MANAGER_KEY_HEADER, &p.key)
            .header("content-type", "application/json")
            .body(serde_json::to_vec(&report).expect("report serialises"));
        tokio::spawn(async move {
            let ok = match req.send().await {
                Ok(r) => r.status().is_success(),
                Err(e) => {
                    tracing::info!(error = %e, "topology publish failed");
                    false
                }
            };
            let _ = cmd.send(Cmd::Published(ok));
        });
    }
}
