//! Agent/manager protocol messages and their wire framing.
//!
//! A frame is a 4-byte big-endian length followed by exactly that many bytes
//! of UTF-8 JSON. The JSON object always carries `v`, `kind`, `seq` and
//! `sender`; `mtid` is present for every kind except `ASSOCIATE-REQ`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Mtid, Value};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4;
/// Upper bound on a frame body; larger length headers are rejected outright.
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    #[serde(rename = "DIRECT-JOIN")]
    DirectJoin,
    #[serde(rename = "ASSOCIATE-REQ")]
    AssociateReq,
    #[serde(rename = "ASSOCIATE-RESP")]
    AssociateResp,
    #[serde(rename = "RECONNECT")]
    Reconnect,
    #[serde(rename = "JOIN-ACK")]
    JoinAck,
    #[serde(rename = "GET")]
    Get,
    #[serde(rename = "SET")]
    Set,
    #[serde(rename = "UPDATE")]
    Update,
    #[serde(rename = "ALERT")]
    Alert,
    #[serde(rename = "MGMT-GET")]
    MgmtGet,
    #[serde(rename = "ERROR")]
    Error,
    #[serde(rename = "ACK")]
    Ack,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::DirectJoin,
        MessageKind::AssociateReq,
        MessageKind::AssociateResp,
        MessageKind::Reconnect,
        MessageKind::JoinAck,
        MessageKind::Get,
        MessageKind::Set,
        MessageKind::Update,
        MessageKind::Alert,
        MessageKind::MgmtGet,
        MessageKind::Error,
        MessageKind::Ack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::DirectJoin => "DIRECT-JOIN",
            MessageKind::AssociateReq => "ASSOCIATE-REQ",
            MessageKind::AssociateResp => "ASSOCIATE-RESP",
            MessageKind::Reconnect => "RECONNECT",
            MessageKind::JoinAck => "JOIN-ACK",
            MessageKind::Get => "GET",
            MessageKind::Set => "SET",
            MessageKind::Update => "UPDATE",
            MessageKind::Alert => "ALERT",
            MessageKind::MgmtGet => "MGMT-GET",
            MessageKind::Error => "ERROR",
            MessageKind::Ack => "ACK",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One name/value entry of a message body.
///
/// Request bodies (GET) list names without values; readings carry `ts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Field {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
}

impl Field {
    pub fn name(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: None,
            unit: None,
            ts: None,
        }
    }

    pub fn value(name: impl Into<String>, value: Value) -> Self {
        Self {
            value: Some(value),
            ..Self::name(name)
        }
    }

    pub fn text(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self::value(name, Value::Text(text.into()))
    }

    pub fn at(mut self, ts: u64) -> Self {
        self.ts = Some(ts);
        self
    }

    pub fn with_unit(mut self, unit: Option<String>) -> Self {
        self.unit = unit;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub seq: u64,
    pub sender: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtid: Option<Mtid>,
    /// Sequence number of the request this message answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re: Option<u64>,
    #[serde(default)]
    pub body: Vec<Field>,
}

impl ProtocolMessage {
    pub fn new(kind: MessageKind, seq: u64, sender: impl Into<String>, mtid: Option<Mtid>) -> Self {
        Self {
            kind,
            seq,
            sender: sender.into(),
            mtid,
            re: None,
            body: Vec::new(),
        }
    }

    pub fn reply_to(mut self, seq: u64) -> Self {
        self.re = Some(seq);
        self
    }

    pub fn with(mut self, field: Field) -> Self {
        self.body.push(field);
        self
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.body.iter().find(|f| f.name == name)
    }

    pub fn text_field(&self, name: &str) -> Option<&str> {
        self.field(name)
            .and_then(|f| f.value.as_ref())
            .and_then(Value::as_text)
    }

    /// Enforces the per-kind mandatory fields.
    pub fn validate(&self) -> Result<(), CodecError> {
        let fail = |why: &str| Err(CodecError::InvalidKindBody(self.kind, why.to_string()));
        if self.sender.is_empty() {
            return fail("empty sender");
        }
        if self.kind != MessageKind::AssociateReq && self.mtid.is_none() {
            return fail("missing mtid");
        }
        for f in &self.body {
            if f.name.is_empty() {
                return fail("empty field name");
            }
            if let Some(v) = &f.value {
                if !v.is_well_formed() {
                    return fail("non-finite number or empty location");
                }
            }
        }
        let has_values = !self.body.is_empty() && self.body.iter().all(|f| f.value.is_some());
        match self.kind {
            MessageKind::DirectJoin | MessageKind::AssociateReq => match self.text_field("ID") {
                None => return fail("join body must carry ID"),
                Some(id) if self.mtid.as_ref().is_some_and(|m| m.as_str() != id) => {
                    return fail("ID does not match mtid")
                }
                _ => {}
            },
            MessageKind::AssociateResp => {
                if self.text_field("managerid").is_none() || self.field("load").is_none() {
                    return fail("advertisement needs managerid and load");
                }
            }
            MessageKind::Reconnect => {
                if self.text_field("agentid").is_none() {
                    return fail("reconnect needs agentid");
                }
            }
            MessageKind::JoinAck => match self.text_field("status") {
                Some("rejected") => {}
                Some("pending") | Some("registered") => {
                    if self.text_field("agentid").is_none() {
                        return fail("join ack needs agentid");
                    }
                }
                _ => return fail("join ack needs a status"),
            },
            MessageKind::Update | MessageKind::Set | MessageKind::Alert => {
                if !has_values {
                    return fail("body with values required");
                }
            }
            MessageKind::Error => {
                if self.text_field("code").is_none() {
                    return fail("error needs a code");
                }
            }
            MessageKind::Ack => {
                if self.re.is_none() {
                    return fail("ack must reference a sequence number");
                }
            }
            MessageKind::Get | MessageKind::MgmtGet => {}
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("{0} message invalid: {1}")]
    InvalidKindBody(MessageKind, String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
}

#[derive(Serialize)]
struct WireOut<'a> {
    v: u8,
    #[serde(flatten)]
    msg: &'a ProtocolMessage,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    v: u8,
    kind: MessageKind,
    seq: u64,
    sender: String,
    #[serde(default)]
    mtid: Option<Mtid>,
    #[serde(default)]
    re: Option<u64>,
    #[serde(default)]
    body: Vec<Field>,
}

/// Canonical encoding: length header followed by the JSON body.
pub fn encode_message(msg: &ProtocolMessage) -> Result<Vec<u8>, CodecError> {
    msg.validate()?;
    let json = serde_json::to_vec(&WireOut {
        v: WIRE_VERSION,
        msg,
    })
    .map_err(|e| CodecError::InvalidKindBody(msg.kind, e.to_string()))?;
    if json.len() > MAX_FRAME_LEN {
        return Err(CodecError::InvalidKindBody(msg.kind, "frame too large".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + json.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Reads the body length from a frame header.
pub fn frame_len(header: [u8; HEADER_LEN]) -> Result<usize, CodecError> {
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(CodecError::MalformedFrame(format!("bad length {len}")));
    }
    Ok(len)
}

/// Decodes a frame body (the bytes after the length header).
pub fn decode_body(body: &[u8]) -> Result<ProtocolMessage, CodecError> {
    let wire: WireIn =
        serde_json::from_slice(body).map_err(|e| CodecError::MalformedFrame(e.to_string()))?;
    if wire.v != WIRE_VERSION {
        return Err(CodecError::MalformedFrame(format!(
            "unsupported version {}",
            wire.v
        )));
    }
    let msg = ProtocolMessage {
        kind: wire.kind,
        seq: wire.seq,
        sender: wire.sender,
        mtid: wire.mtid,
        re: wire.re,
        body: wire.body,
    };
    msg.validate()
        .map_err(|e| CodecError::MalformedFrame(e.to_string()))?;
    Ok(msg)
}

/// Decodes one complete frame; trailing or missing bytes are an error.
pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::MalformedFrame("truncated header".into()));
    }
    let header: [u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().expect("header slice");
    let len = frame_len(header)?;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() != len {
        return Err(CodecError::MalformedFrame(format!(
            "length header says {len}, got {}",
            rest.len()
        )));
    }
    decode_body(rest)
}

/// Incremental decoder for stream transports.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete frame, if any. A malformed header poisons the
    /// stream and the caller should drop the connection.
    pub fn next_message(&mut self) -> Result<Option<ProtocolMessage>, CodecError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let header: [u8; HEADER_LEN] = self.buf[..HEADER_LEN].try_into().expect("header slice");
        let len = frame_len(header)?;
        if self.buf.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let frame: Vec<u8> = self.buf.drain(..HEADER_LEN + len).collect();
        decode_body(&frame[HEADER_LEN..]).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeoPoint, SemanticLocation};
    use proptest::prelude::*;

    fn mtid(s: &str) -> Option<Mtid> {
        Some(Mtid::new(s).unwrap())
    }

    #[test]
    fn update_roundtrip() {
        let m = ProtocolMessage::new(MessageKind::Update, 1, "s1", mtid("s1"))
            .with(Field::value("Temperature", Value::Number(21.5)).at(1000));
        let bytes = encode_message(&m).unwrap();
        assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_get_roundtrip() {
        let m = ProtocolMessage::new(MessageKind::Get, 9, "m1", mtid("s1"));
        let bytes = encode_message(&m).unwrap();
        assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn alert_without_mtid_rejected() {
        let m = ProtocolMessage::new(MessageKind::Alert, 1, "s1", None)
            .with(Field::value("Temperature", Value::Number(31.0)));
        assert!(matches!(
            encode_message(&m),
            Err(CodecError::InvalidKindBody(MessageKind::Alert, _))
        ));
    }

    #[test]
    fn associate_req_needs_no_mtid() {
        let m = ProtocolMessage::new(MessageKind::AssociateReq, 1, "s1", None)
            .with(Field::text("ID", "s1"));
        let bytes = encode_message(&m).unwrap();
        assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn wire_shape() {
        let m = ProtocolMessage::new(MessageKind::Get, 3, "m1", mtid("s1"));
        let bytes = encode_message(&m).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&bytes[4..]).unwrap();
        assert_eq!(json["v"], 1);
        assert_eq!(json["kind"], "GET");
        assert_eq!(json["seq"], 3);
        assert_eq!(json["sender"], "m1");
        assert_eq!(json["mtid"], "s1");
        assert_eq!(
            u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize,
            bytes.len() - 4
        );
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            decode_message(&[]),
            Err(CodecError::MalformedFrame(_))
        ));
        assert!(decode_message(&[0, 0, 0, 2, b'{', b'}']).is_err());
        let body = br#"{"v":2,"kind":"GET","seq":1,"sender":"m","mtid":"s"}"#;
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        assert!(decode_message(&frame).is_err());
        let body = br#"{"v":1,"kind":"GET","seq":1,"sender":"m","mtid":"s","extra":1}"#;
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        assert!(decode_message(&frame).is_err());
    }

    #[test]
    fn frame_buffer_splits_stream() {
        let a = ProtocolMessage::new(MessageKind::Get, 1, "m1", mtid("s1"));
        let b = ProtocolMessage::new(MessageKind::Ack, 2, "m1", mtid("s1")).reply_to(5);
        let mut stream = encode_message(&a).unwrap();
        stream.extend(encode_message(&b).unwrap());
        let mut fb = FrameBuffer::new();
        fb.extend(&stream[..7]);
        assert_eq!(fb.next_message().unwrap(), None);
        fb.extend(&stream[7..]);
        assert_eq!(fb.next_message().unwrap(), Some(a));
        assert_eq!(fb.next_message().unwrap(), Some(b));
        assert_eq!(fb.next_message().unwrap(), None);
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            ".{0,12}".prop_map(Value::Text),
            (-1e9f64..1e9).prop_map(Value::Number),
            any::<bool>().prop_map(Value::Bool),
            (
                prop::collection::vec("[A-Za-z]{1,6}", 1..6),
                -90.0f64..90.0,
                -180.0f64..180.0
            )
                .prop_map(|(p, lat, lon)| Value::Location(SemanticLocation::new(
                    p,
                    GeoPoint::new(lat, lon)
                ))),
        ]
    }

    fn arb_field() -> impl Strategy<Value = Field> {
        (
            "[A-Za-z][A-Za-z0-9_]{0,10}",
            arb_value(),
            proptest::option::of("[a-zA-Z%]{1,3}"),
            proptest::option::of(any::<u64>()),
        )
            .prop_map(|(n, v, u, ts)| Field {
                name: n,
                value: Some(v),
                unit: u,
                ts,
            })
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = ProtocolMessage> {
        let kinds = prop::sample::select(vec![
            MessageKind::Update,
            MessageKind::Set,
            MessageKind::Alert,
            MessageKind::Get,
            MessageKind::MgmtGet,
        ]);
        (
            kinds,
            any::<u64>(),
            "[a-z0-9-]{1,12}",
            "[a-z0-9_-]{1,12}",
            proptest::option::of(any::<u64>()),
            prop::collection::vec(arb_field(), 1..5),
        )
            .prop_map(|(kind, seq, sender, mtid, re, body)| ProtocolMessage {
                kind,
                seq,
                sender,
                mtid: Some(Mtid::new(mtid).unwrap()),
                re,
                body,
            })
    }

    proptest! {
        #[test]
        fn roundtrip(m in arb_message()) {
            let bytes = encode_message(&m).unwrap();
            prop_assert_eq!(decode_message(&bytes).unwrap(), m);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_message(&bytes);
        }
    }
}
