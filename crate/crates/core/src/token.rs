//! Application registration credentials and signed access tokens.
//!
//! A token is `header.payload.signature`, each segment base64url without
//! padding. The header names the algorithm, the payload carries the AppID, a
//! digest of the application's secret token, its role and an expiry, and the
//! signature is HMAC-SHA256 over `header.payload` keyed with the manager's
//! server secret.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::AppId;

type HmacSha256 = Hmac<Sha256>;

/// Exact JSON of the token header segment.
pub const TOKEN_HEADER: &str = r#"{"alg":"HS256","typ":"JWT"}"#;
pub const DEFAULT_TOKEN_TTL_MS: u64 = 3_600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IotApp,
    ManagementApp,
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iot_app" => Ok(Role::IotApp),
            "management_app" => Ok(Role::ManagementApp),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("bad credentials")]
    BadCredentials,
}

/// Stored registration. Only the digest of the secret is retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRegistration {
    pub appid: AppId,
    pub role: Role,
    pub secret_digest: String,
    pub created_at: u64,
}

/// Returned once, at registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedCredentials {
    pub appid: AppId,
    pub secret_token: String,
    pub role: Role,
    pub created_at: u64,
}

/// Fresh 256-bit secret, hex encoded.
pub fn generate_secret<R: RngCore + ?Sized>(rng: &mut R) -> String {
    let mut bytes = [0u8; 32];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub fn secret_digest(secret: &str) -> String {
    hex::encode(Sha256::digest(secret.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenClaims {
    pub appid: AppId,
    /// SHA-256 of the application's secret token, hex.
    pub proof: String,
    pub role: Role,
    /// Expiry, milliseconds since the epoch.
    pub exp: u64,
}

/// Identity established by a valid token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verified {
    pub appid: AppId,
    pub role: Role,
}

/// Signs and verifies tokens with the server secret.
#[derive(Clone)]
pub struct TokenAuthority {
    key: Vec<u8>,
    ttl_ms: u64,
}

impl std::fmt::Debug for TokenAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenAuthority").field("ttl_ms", &self.ttl_ms).finish_non_exhaustive()
    }
}

impl TokenAuthority {
    pub fn new(server_secret: impl Into<Vec<u8>>, ttl_ms: u64) -> Self {
        Self {
            key: server_secret.into(),
            ttl_ms,
        }
    }

    pub fn ttl_ms(&self) -> u64 {
        self.ttl_ms
    }

    fn mac(&self) -> HmacSha256 {
        <HmacSha256 as KeyInit>::new_from_slice(&self.key).expect("HMAC accepts any key length")
    }

    /// Signature bytes over `signing_input` (`header.payload`).
    pub fn sign(&self, signing_input: &[u8]) -> Vec<u8> {
        let mut mac = self.mac();
        mac.update(signing_input);
        mac.finalize().into_bytes().to_vec()
    }

    /// Issues a token after checking the secret against the registration.
    pub fn mint(
        &self,
        registration: &AppRegistration,
        secret_token: &str,
        now: u64,
    ) -> Result<(String, u64), TokenError> {
        let digest = secret_digest(secret_token);
        if !constant_time_eq(digest.as_bytes(), registration.secret_digest.as_bytes()) {
            return Err(TokenError::BadCredentials);
        }
        let exp = now.saturating_add(self.ttl_ms);
        let claims = TokenClaims {
            appid: registration.appid.clone(),
            proof: digest,
            role: registration.role,
            exp,
        };
        Ok((self.encode(&claims), exp))
    }

    /// Serialises and signs arbitrary claims.
    pub fn encode(&self, claims: &TokenClaims) -> String {
        let header = URL_SAFE_NO_PAD.encode(TOKEN_HEADER);
        let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialise"));
        let signing_input = format!("{header}.{payload}");
        let sig = URL_SAFE_NO_PAD.encode(self.sign(signing_input.as_bytes()));
        format!("{signing_input}.{sig}")
    }

    /// Structure, signature and expiry must all hold.
    pub fn verify(&self, token: &str, now: u64) -> Result<Verified, TokenError> {
        let mut parts = token.split('.');
        let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(TokenError::Unauthorized);
        };
        let header = strict_decode(h)?;
        let payload = strict_decode(p)?;
        let sig = strict_decode(s)?;
        if header != TOKEN_HEADER.as_bytes() {
            return Err(TokenError::Unauthorized);
        }
        let mut mac = self.mac();
        mac.update(h.as_bytes());
        mac.update(b".");
        mac.update(p.as_bytes());
        mac.verify_slice(&sig).map_err(|_| TokenError::Unauthorized)?;
        let claims: TokenClaims = serde_json::from_slice(&payload).map_err(|_| TokenError::Unauthorized)?;
        if claims.exp <= now {
            return Err(TokenError::Unauthorized);
        }
        Ok(Verified {
            appid: claims.appid,
            role: claims.role,
        })
    }
}

/// Base64url decode that only accepts the canonical encoding of the result.
fn strict_decode(segment: &str) -> Result<Vec<u8>, TokenError> {
    let bytes = URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|_| TokenError::Unauthorized)?;
    if URL_SAFE_NO_PAD.encode(&bytes) != segment {
        return Err(TokenError::Unauthorized);
    }
    Ok(bytes)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registration(secret: &str) -> AppRegistration {
        AppRegistration {
            appid: AppId::new("weatherApp").unwrap(),
            role: Role::IotApp,
            secret_digest: secret_digest(secret),
            created_at: 0,
        }
    }

    #[test]
    fn mint_then_verify() {
        let auth = TokenAuthority::new(b"server-secret".to_vec(), DEFAULT_TOKEN_TTL_MS);
        let (token, exp) = auth.mint(&registration("s3cret"), "s3cret", 1000).unwrap();
        assert_eq!(exp, 1000 + DEFAULT_TOKEN_TTL_MS);
        assert_eq!(token.split('.').count(), 3);
        let v = auth.verify(&token, 2000).unwrap();
        assert_eq!(v.appid.as_str(), "weatherApp");
        assert_eq!(v.role, Role::IotApp);
    }

    #[test]
    fn wrong_secret() {
        let auth = TokenAuthority::new(b"k".to_vec(), 10);
        assert_eq!(
            auth.mint(&registration("right"), "wrong", 0),
            Err(TokenError::BadCredentials)
        );
    }

    #[test]
    fn expiry_is_exclusive() {
        let auth = TokenAuthority::new(b"k".to_vec(), 10);
        let (token, exp) = auth.mint(&registration("x"), "x", 0).unwrap();
        assert!(auth.verify(&token, exp - 1).is_ok());
        assert_eq!(auth.verify(&token, exp), Err(TokenError::Unauthorized));
    }

    #[test]
    fn other_server_key_rejects() {
        let a = TokenAuthority::new(b"one".to_vec(), 1000);
        let b = TokenAuthority::new(b"two".to_vec(), 1000);
        let (token, _) = a.mint(&registration("x"), "x", 0).unwrap();
        assert_eq!(b.verify(&token, 1), Err(TokenError::Unauthorized));
    }

    #[test]
    fn payload_never_holds_cleartext_secret() {
        let auth = TokenAuthority::new(b"k".to_vec(), 1000);
        let secret = generate_secret(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(secret.len(), 64);
        let (token, _) = auth.mint(&registration(&secret), &secret, 0).unwrap();
        let payload = URL_SAFE_NO_PAD.decode(token.split('.').nth(1).unwrap()).unwrap();
        let text = String::from_utf8(payload).unwrap();
        assert!(!text.contains(&secret));
        assert!(text.contains(&secret_digest(&secret)));
    }

    #[test]
    fn non_canonical_base64_rejected() {
        assert!(strict_decode("QQ").is_ok());
        // same bytes with nonzero trailing bits
        assert!(strict_decode("QR").is_err());
        assert!(strict_decode("QQ==").is_err());
    }
}
