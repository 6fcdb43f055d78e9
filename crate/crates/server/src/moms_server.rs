//! Manager-of-managers service: topology ingestion and request forwarding.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Request, State};
use axum::response::Response;
use axum::Router;
use iotmp_core::moms::{Moms, MomsConfig, RouteDecision};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::client::send;
use crate::clock::Clock;
use crate::config::MomsServerConfig;
use crate::http_glue::{client_with_roots, to_api, to_response};
use crate::{tls, ServerError};

pub struct MomsHandle {
    pub http_addr: SocketAddr,
    pub https_addr: Option<SocketAddr>,
    moms: Arc<Mutex<Moms>>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl MomsHandle {
    pub fn http_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    pub fn https_url(&self) -> Option<String> {
        self.https_addr.map(|a| format!("https://localhost:{}", a.port()))
    }

    /// Full directory dump.
    pub fn scan(&self) -> serde_json::Value {
        self.moms.lock().expect("moms lock").scan()
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            t.abort();
            let _ = t.await;
        }
    }

    pub async fn wait(mut self) {
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

#[derive(Clone)]
struct HttpState {
    moms: Arc<Mutex<Moms>>,
    client: reqwest::Client,
    clock: Clock,
    secure: bool,
}

async fn bind(addr: SocketAddr) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::BindFailure { addr, source })
}

pub async fn start(cfg: MomsServerConfig) -> Result<MomsHandle, ServerError> {
    cfg.validate()?;
    let acceptor = cfg.tls.as_ref().map(tls::acceptor).transpose()?;
    let client = client_with_roots(&cfg.ca_certs, cfg.forward_timeout_ms)?;
    let http = bind(cfg.http_listen).await?;
    let https = match cfg.https_listen {
        Some(a) => Some(bind(a).await?),
        None => None,
    };
    let http_addr = http.local_addr()?;
    let https_addr = https.as_ref().map(|l| l.local_addr()).transpose()?;
    let moms = Arc::new(Mutex::new(Moms::new(MomsConfig {
        manager_keys: cfg.manager_keys.clone(),
        publish_period_ms: cfg.publish_period_ms,
    })));
    let (stop_tx, stop_rx) = watch::channel(false);
    let app = |secure| {
        Router::new().fallback(handle).with_state(HttpState {
            moms: moms.clone(),
            client: client.clone(),
            clock: Clock::system(),
            secure,
        })
    };
    let mut tasks = Vec::new();
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
        tasks.push(tokio::spawn(tls::serve(listener, acceptor, app(true), stop_rx)));
    }
    tracing::info!(%http_addr, ?https_addr, "manager of managers ready");
    Ok(MomsHandle {
        http_addr,
        https_addr,
        moms,
        stop: stop_tx,
        tasks,
    })
}

async fn handle(State(st): State<HttpState>, req: Request) -> Response {
    let api = match to_api(req, st.secure).await {
        Ok(a) => a,
        Err(e) => return to_response(e),
    };
    let decision = st.moms.lock().expect("moms lock").handle(&api, st.clock.now());
    match decision {
        RouteDecision::Respond(r) => to_response(r),
        RouteDecision::Forward { managerid, base_url, request, stale } => {
            let r = match send(&st.client, &base_url, &request).await {
                Ok(r) => Moms::relay(r, stale),
                Err(e) => {
                    tracing::info!(manager = %managerid, error = %e, "forward failed");
                    Moms::unreachable(&managerid)
                }
            };
            to_response(r)
        }
    }
}
