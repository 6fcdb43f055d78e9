//! HTTP client for the management API, shared by the forwarder and the CLI.

use std::path::PathBuf;

use iotmp_core::http::{ApiRequest, ApiResponse};
use iotmp_core::moms::APP_ID_HEADER;
use serde_json::{json, Value as Json};

use crate::http_glue::client_with_roots;
use crate::ServerError;

/// Hop-by-hop headers that are neither forwarded nor relayed.
pub const HOP_HEADERS: [&str; 6] = ["host", "connection", "content-length", "transfer-encoding", "keep-alive", "upgrade"];

/// Sends `req` to `base` and collects the full answer.
pub async fn send(client: &reqwest::Client, base: &str, req: &ApiRequest) -> Result<ApiResponse, reqwest::Error> {
    let url = format!("{}{}", base.trim_end_matches('/'), req.target());
    let method = reqwest::Method::from_bytes(req.method.as_str().as_bytes()).expect("standard method");
    let mut rb = client.request(method, url);
    for (k, v) in &req.headers {
        if !HOP_HEADERS.contains(&k.as_str()) {
            rb = rb.header(k, v);
        }
    }
    let resp = rb.body(req.body.clone()).send().await?;
    let status = resp.status().as_u16();
    let headers = resp
        .headers()
        .iter()
        .filter(|(k, _)| !HOP_HEADERS.contains(&k.as_str()))
        .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
        .collect();
    let body = resp.bytes().await?.to_vec();
    Ok(ApiResponse { status, headers, body })
}

/// Application-side client bound to one base URL and optional credentials.
#[derive(Clone)]
pub struct ApiClient {
    pub base: String,
    http: reqwest::Client,
    token: Option<String>,
    appid: Option<String>,
}

impl ApiClient {
    pub fn new(base: &str, ca_certs: &[PathBuf], timeout_ms: u64) -> Result<Self, ServerError> {
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            http: client_with_roots(ca_certs, timeout_ms)?,
            token: None,
            appid: None,
        })
    }

    /// Same transport, different base URL.
    pub fn with_base(&self, base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            ..self.clone()
        }
    }

    /// An empty `appid` sends the token without an `x-app-id` header.
    pub fn with_token(mut self, appid: &str, token: &str) -> Self {
        self.appid = (!appid.is_empty()).then(|| appid.to_string());
        self.token = Some(token.to_string());
        self
    }

    pub async fn call(&self, mut req: ApiRequest) -> Result<ApiResponse, reqwest::Error> {
        if let Some(t) = &self.token {
            if req.header("authorization").is_none() {
                req = req.bearer(t);
            }
        }
        if let Some(a) = &self.appid {
            if req.header(APP_ID_HEADER).is_none() {
                req = req.with_header(APP_ID_HEADER, a.clone());
            }
        }
        send(&self.http, &self.base, &req).await
    }

    /// Registers an application and returns the issued credentials body.
    pub async fn register_app(&self, appid: &str, role: &str, operator_key: Option<&str>) -> Result<ApiResponse, reqwest::Error> {
        let mut req = ApiRequest::post("/apps", &json!({ "appid": appid, "role": role }));
        if let Some(k) = operator_key {
            req = req.with_header(iotmp_core::api::OPERATOR_KEY_HEADER, k);
        }
        send(&self.http, &self.base, &req).await
    }

    pub async fn mint_token(&self, appid: &str, secret: &str) -> Result<ApiResponse, reqwest::Error> {
        let req = ApiRequest::post("/tokens", &json!({ "appid": appid, "secret_token": secret }));
        send(&self.http, &self.base, &req).await
    }

    /// Registers `appid` and returns a client carrying a fresh token for it.
    pub async fn enroll(&self, appid: &str, role: &str, operator_key: Option<&str>) -> Result<ApiClient, String> {
        let r = self.register_app(appid, role, operator_key).await.map_err(|e| e.to_string())?;
        let secret = field(&r, "secret_token").ok_or_else(|| format!("register {appid}: status {}", r.status))?;
        let r = self.mint_token(appid, &secret).await.map_err(|e| e.to_string())?;
        let token = field(&r, "token").ok_or_else(|| format!("token {appid}: status {}", r.status))?;
        Ok(self.clone().with_token(appid, &token))
    }

    pub async fn get(&self, target: &str) -> Result<ApiResponse, reqwest::Error> {
        self.call(ApiRequest::get(target)).await
    }

    pub async fn post(&self, target: &str, body: &Json) -> Result<ApiResponse, reqwest::Error> {
        self.call(ApiRequest::post(target, body)).await
    }

    pub async fn put(&self, target: &str, body: &Json) -> Result<ApiResponse, reqwest::Error> {
        self.call(ApiRequest::put(target, body)).await
    }
}

fn field(r: &ApiResponse, name: &str) -> Option<String> {
    r.body_json()?.get(name)?.as_str().map(str::to_string)
}
