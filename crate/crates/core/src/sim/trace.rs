//! Event trace of a simulation run and its digest.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub t: u64,
    pub actor: String,
    pub kind: String,
    /// Short SHA-256 of the event payload.
    pub digest: String,
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn short_digest(bytes: &[u8]) -> String {
    let mut d = sha256_hex(bytes);
    d.truncate(16);
    d
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, t: u64, actor: &str, kind: impl Into<String>, payload: &[u8]) {
        self.events.push(TraceEvent {
            t,
            actor: actor.to_string(),
            kind: kind.into(),
            digest: short_digest(payload),
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Canonical serialisation: one compact JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace event serialises"));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_covers_every_field() {
        let mut a = Trace::default();
        a.push(1, "m1", "deliver:UPDATE", b"x");
        let mut b = Trace::default();
        b.push(1, "m1", "deliver:UPDATE", b"y");
        assert_ne!(a.digest(), b.digest());
        let mut c = Trace::default();
        c.push(1, "m1", "deliver:UPDATE", b"x");
        assert_eq!(a.digest(), c.digest());
        assert_eq!(a.to_jsonl().lines().count(), 1);
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
