//! Conversion between axum requests and the core's transport-free HTTP types.

use axum::body::{to_bytes, Body};
use axum::extract::Request;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::Response;
use iotmp_core::http::{parse_query, ApiRequest, ApiResponse};

pub const MAX_BODY: usize = 1 << 20;

/// Reads the whole request. Errors become the response to send.
pub async fn to_api(req: Request, secure: bool) -> Result<ApiRequest, ApiResponse> {
    let (parts, body) = req.into_parts();
    let method = parts
        .method
        .as_str()
        .parse()
        .map_err(|e| ApiResponse::error(405, "MethodNotAllowed", e))?;
    let body = to_bytes(body, MAX_BODY)
        .await
        .map_err(|_| ApiResponse::error(413, "PayloadTooLarge", "request body too large"))?;
    let headers = parts
        .headers
        .iter()
        .filter_map(|(k, v)| Some((k.as_str().to_ascii_lowercase(), v.to_str().ok()?.to_string())))
        .collect();
    Ok(ApiRequest {
        method,
        path: parts.uri.path().to_string(),
        query: parts.uri.query().map(parse_query).unwrap_or_default(),
        headers,
        body: body.to_vec(),
        secure,
    })
}

pub fn to_response(r: ApiResponse) -> Response {
    let mut resp = Response::new(Body::from(r.body));
    *resp.status_mut() = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    for (k, v) in r.headers {
        if let (Ok(k), Ok(v)) = (HeaderName::try_from(k), HeaderValue::try_from(v)) {
            resp.headers_mut().insert(k, v);
        }
    }
    resp
}

/// Loads extra PEM roots into a client builder.
pub fn client_with_roots(
    roots: &[std::path::PathBuf],
    timeout_ms: u64,
) -> Result<reqwest::Client, crate::ServerError> {
    let mut certs = Vec::new();
    for path in roots {
        let pem = std::fs::read(path)?;
        let cert = reqwest::Certificate::from_pem(&pem)
            .map_err(|e| crate::ServerError::Tls(format!("{}: {e}", path.display())))?;
        certs.push(cert);
    }
    reqwest::Client::builder()
        .tls_certs_merge(certs)
        .timeout(std::time::Duration::from_millis(timeout_ms))
        .build()
        .map_err(|e| crate::ServerError::Tls(e.to_string()))
}
