use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use iotmp_core::token::{Role, TokenAuthority, TokenClaims, TOKEN_HEADER};
use sha2::{Digest, Sha256};

/// HMAC-SHA256 written out from its definition.
fn hmac_sha256(key: &[u8], msg: &[u8]) -> Vec<u8> {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().to_vec()
}

#[test]
fn oracle_matches_published_vectors() {
    let got = hmac_sha256(&[0x0b; 20], b"Hi There");
    assert_eq!(hex::encode(got), "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7");
    let got = hmac_sha256(b"Jefe", b"what do ya want for nothing?");
    assert_eq!(hex::encode(got), "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843");
    let got = hmac_sha256(&[0xaa; 131], b"Test Using Larger Than Block-Size Key - Hash Key First");
    assert_eq!(hex::encode(got), "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54");
}

#[test]
fn signatures_match_the_oracle() {
    for key in [&b"k"[..], b"server-secret", &[7u8; 100]] {
        let auth = TokenAuthority::new(key.to_vec(), 1_000);
        for input in [&b""[..], b"a.b", b"eyJhbGciOiJIUzI1NiJ9.eyJ4IjoxfQ"] {
            assert_eq!(auth.sign(input), hmac_sha256(key, input));
        }
    }
}

fn claims(exp: u64) -> TokenClaims {
    TokenClaims {
        appid: "app-1".parse().unwrap(),
        proof: hex::encode(Sha256::digest(b"secret")),
        role: Role::IotApp,
        exp,
    }
}

fn oracle_token(key: &[u8], claims: &TokenClaims) -> String {
    let header = URL_SAFE_NO_PAD.encode(TOKEN_HEADER);
    let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).unwrap());
    let input = format!("{header}.{payload}");
    let sig = URL_SAFE_NO_PAD.encode(hmac_sha256(key, input.as_bytes()));
    format!("{input}.{sig}")
}

#[test]
fn encoded_tokens_match_the_oracle() {
    let auth = TokenAuthority::new(b"server-secret".to_vec(), 1_000);
    let c = claims(5_000);
    assert_eq!(auth.encode(&c), oracle_token(b"server-secret", &c));
    let v = auth.verify(&oracle_token(b"server-secret", &c), 4_999).unwrap();
    assert_eq!(v.appid.as_str(), "app-1");
    assert_eq!(v.role, Role::IotApp);
}

#[test]
fn foreign_or_expired_tokens_fail() {
    let auth = TokenAuthority::new(b"server-secret".to_vec(), 1_000);
    let c = claims(5_000);
    assert!(auth.verify(&oracle_token(b"other-secret", &c), 0).is_err());
    assert!(auth.verify(&oracle_token(b"server-secret", &c), 5_000).is_err());
    let mut forged = claims(5_000);
    forged.role = Role::ManagementApp;
    let good = oracle_token(b"server-secret", &c);
    let evil = oracle_token(b"server-secret", &forged);
    let mixed = format!(
        "{}.{}",
        evil.rsplit_once('.').unwrap().0,
        good.rsplit_once('.').unwrap().1
    );
    assert!(auth.verify(&mixed, 0).is_err());
}
