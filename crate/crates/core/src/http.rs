//! Transport-neutral HTTP request and response values used by the manager
//! API, the manager-of-managers router and the simulator.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Ok(Method::Get),
            "POST" => Ok(Method::Post),
            "PUT" => Ok(Method::Put),
            "DELETE" => Ok(Method::Delete),
            other => Err(format!("unsupported method {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: Method,
    /// Path without the query string, percent-decoded segments not applied.
    pub path: String,
    #[serde(default)]
    pub query: BTreeMap<String, String>,
    /// Lower-case header names.
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: Vec<u8>,
    /// Arrived over the TLS listener.
    #[serde(default)]
    pub secure: bool,
}

impl ApiRequest {
    /// Builds a request from a path that may carry a `?query`.
    pub fn new(method: Method, target: &str) -> Self {
        let (path, query) = split_target(target);
        Self {
            method,
            path,
            query,
            headers: BTreeMap::new(),
            body: Vec::new(),
            secure: false,
        }
    }

    pub fn get(target: &str) -> Self {
        Self::new(Method::Get, target)
    }

    pub fn post(target: &str, body: &Json) -> Self {
        Self::new(Method::Post, target).with_json(body)
    }

    pub fn put(target: &str, body: &Json) -> Self {
        Self::new(Method::Put, target).with_json(body)
    }

    pub fn delete(target: &str) -> Self {
        Self::new(Method::Delete, target)
    }

    pub fn with_json(mut self, body: &Json) -> Self {
        self.body = serde_json::to_vec(body).expect("json serialises");
        self.headers
            .insert("content-type".into(), "application/json".into());
        self
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.into());
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.with_header("authorization", format!("Bearer {token}"))
    }

    pub fn secure(mut self, secure: bool) -> Self {
        self.secure = secure;
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).map(String::as_str)
    }

    pub fn bearer_token(&self) -> Option<&str> {
        let v = self.header("authorization")?;
        let (scheme, token) = v.split_once(' ')?;
        scheme.eq_ignore_ascii_case("bearer").then(|| token.trim())
    }

    pub fn segments(&self) -> Vec<&str> {
        self.path.split('/').filter(|s| !s.is_empty()).collect()
    }

    /// Path plus canonical query string.
    pub fn target(&self) -> String {
        if self.query.is_empty() {
            self.path.clone()
        } else {
            let q: Vec<String> = self.query.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("{}?{}", self.path, q.join("&"))
        }
    }
}

fn split_target(target: &str) -> (String, BTreeMap<String, String>) {
    match target.split_once('?') {
        None => (target.to_string(), BTreeMap::new()),
        Some((path, q)) => (path.to_string(), parse_query(q)),
    }
}

pub fn parse_query(q: &str) -> BTreeMap<String, String> {
    q.split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (kv.to_string(), String::new()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl ApiResponse {
    pub fn json(status: u16, body: &Json) -> Self {
        let mut headers = BTreeMap::new();
        headers.insert("content-type".into(), "application/json".into());
        Self {
            status,
            headers,
            body: serde_json::to_vec(body).expect("json serialises"),
        }
    }

    pub fn error(status: u16, code: &str, message: impl fmt::Display) -> Self {
        Self::json(
            status,
            &serde_json::json!({ "error": code, "message": message.to_string() }),
        )
    }

    pub fn body_json(&self) -> Option<Json> {
        serde_json::from_slice(&self.body).ok()
    }

    /// The `error` code of an error body.
    pub fn error_code(&self) -> Option<String> {
        self.body_json()?.get("error")?.as_str().map(str::to_string)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_split() {
        let r = ApiRequest::get("/mt/s1/Temperature?from=5&to=9&live");
        assert_eq!(r.path, "/mt/s1/Temperature");
        assert_eq!(r.query.get("from").map(String::as_str), Some("5"));
        assert_eq!(r.query.get("live").map(String::as_str), Some(""));
        assert_eq!(r.segments(), vec!["mt", "s1", "Temperature"]);
        assert_eq!(r.target(), "/mt/s1/Temperature?from=5&live=&to=9");
    }

    #[test]
    fn bearer() {
        let r = ApiRequest::get("/alerts").bearer("abc");
        assert_eq!(r.bearer_token(), Some("abc"));
        let r = ApiRequest::get("/alerts").with_header("Authorization", "Basic x");
        assert_eq!(r.bearer_token(), None);
    }

    #[test]
    fn error_body() {
        let r = ApiResponse::error(403, "Forbidden", "no");
        assert_eq!(r.error_code().as_deref(), Some("Forbidden"));
        assert!(!r.is_success());
    }
}
