//! Management API of a manager. Every read of thing data runs the same
//! pipeline: token verification, the security gate, the privacy gate for
//! location attributes, and only then the store.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::{json, Value as Json};

use crate::codec::{Field, MessageKind};
use crate::http::{ApiRequest, ApiResponse, Method};
use crate::manager::{CallKind, Manager, ManagerOutput, ReqId, Stage};
use crate::model::{check_management_value, AgentId, AppId, AttrClass, AttrName, Attribute, Mtid, Reading, Value};
use crate::moms::APP_ID_HEADER;
use crate::privacy::{evaluate, obfuscate, validate_policies, Decision, DisclosurePolicy, RequestContext};
use crate::security::{check_policy_detailed, AdmissionState, ProfileChange};
use crate::store::{ManagedThingRecord, Mutation, Source, StoreError, StoredReading};
use crate::token::{generate_secret, secret_digest, AppRegistration, IssuedCredentials, Role, Verified};

/// Header carrying the operator key on `POST /apps` when one is configured.
pub const OPERATOR_KEY_HEADER: &str = "x-operator-key";

type Outcome<T> = Result<T, ApiResponse>;

fn bad_request(msg: impl std::fmt::Display) -> ApiResponse {
    ApiResponse::error(400, "MalformedBody", msg)
}

fn parse_body<T: for<'de> Deserialize<'de>>(req: &ApiRequest) -> Outcome<T> {
    serde_json::from_slice(&req.body).map_err(bad_request)
}

fn parse_mtid(s: &str) -> Outcome<Mtid> {
    Mtid::new(s).map_err(|_| ApiResponse::error(404, "UnknownMT", format!("no record for {s}")))
}

fn query_u64(req: &ApiRequest, key: &str, default: u64) -> Outcome<u64> {
    match req.query.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| ApiResponse::error(400, "MalformedQuery", format!("{key} must be an integer"))),
    }
}

fn query_flag(req: &ApiRequest, key: &str) -> bool {
    req.query.get(key).is_some_and(|v| v.is_empty() || v == "1" || v == "true")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    #[serde(default)]
    appid: Option<AppId>,
    role: Role,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MintBody {
    appid: AppId,
    secret_token: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActuationBody {
    attribute: AttrName,
    value: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContributedReading {
    name: String,
    value: Value,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    ts: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataBody {
    readings: Vec<ContributedReading>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributesBody {
    attributes: Vec<Attribute>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileBody {
    changes: Vec<ProfileChange>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoliciesBody {
    policies: Vec<DisclosurePolicy>,
}

fn reading_json(r: &StoredReading) -> Json {
    let mut v = json!({
        "value": r.reading.value,
        "ts": r.reading.ts,
        "source": r.source.to_string(),
    });
    if let Some(u) = &r.reading.unit {
        v["unit"] = json!(u);
    }
    v
}

/// Record view without readings or locations.
fn record_json(rec: &ManagedThingRecord, approval: AdmissionState) -> Json {
    let attributes: Vec<&Attribute> = rec.attributes.values().filter(|a| !a.name.is_location()).collect();
    json!({
        "mtid": rec.mtid,
        "agentid": rec.agentid,
        "approval": approval,
        "connection": rec.connection,
        "security_ref": rec.security_ref,
        "registered_at": rec.registered_at,
        "last_seen": rec.last_seen,
        "attributes": attributes,
    })
}

fn summary_json(rec: &ManagedThingRecord, approval: AdmissionState) -> Json {
    let text = |n: &str| rec.attribute(n).and_then(|a| a.value.as_text()).map(str::to_string);
    json!({
        "mtid": rec.mtid,
        "agentid": rec.agentid,
        "name": text("Name"),
        "type": text("Type"),
        "approval": approval,
        "connection": rec.connection,
        "last_seen": rec.last_seen,
    })
}

impl Manager {
    /// Dispatches one API request. `None` means the reply will follow once a
    /// device call completes or times out.
    pub(crate) fn route_api(&mut self, req_id: ReqId, req: &ApiRequest, now: u64, out: &mut Vec<ManagerOutput>) -> Option<ApiResponse> {
        let segs = req.segments();
        let result = match (req.method, segs.as_slice()) {
            (Method::Post, ["apps"]) => self.api_register(req, now),
            (Method::Post, ["tokens"]) => self.api_mint(req, now),
            (Method::Get, ["mt"]) => self.api_list(req_id, req, now),
            (Method::Get, ["mt", m]) => self.api_record(req_id, req, m, now),
            (Method::Delete, ["mt", m]) => self.api_delete_thing(req_id, req, m, now, out),
            (Method::Get, ["mt", m, "status"]) => self.api_status(req_id, req, m, now, out),
            (Method::Post, ["mt", m, "actuation"]) => self.api_actuate(req_id, req, m, now, out),
            (Method::Post, ["mt", m, "data"]) => self.api_contribute(req_id, req, m, now),
            (Method::Put, ["mt", m, "attributes"]) => self.api_put_attributes(req_id, req, m, now),
            (Method::Delete, ["mt", m, "readings", a]) => self.api_delete_readings(req_id, req, m, a, now),
            (Method::Get, ["mt", m, a]) => self.api_get(req_id, req, m, a, now, out),
            (Method::Get, ["alerts"]) => self.api_alerts(req_id, req, now),
            (Method::Get, ["profiles", m]) => self.api_get_profile(req_id, req, m, now),
            (Method::Put, ["profiles", m]) => self.api_put_profile(req_id, req, m, now),
            (Method::Get, ["policies", m]) => self.api_get_policies(req_id, req, m, now),
            (Method::Put, ["policies", m]) => self.api_put_policies(req_id, req, m, now),
            (Method::Get, ["agents", "pending"]) => self.api_pending(req_id, req, now),
            (Method::Post, ["agents", a, "approve"]) => self.api_approve(req_id, req, a, now, out),
            (Method::Post, ["agents", a, "revoke"]) => self.api_revoke(req_id, req, a, now),
            _ => Err(ApiResponse::error(404, "NotFound", "no such route")),
        };
        match result {
            Ok(r) => r,
            Err(e) => Some(e),
        }
    }

    fn api_register(&mut self, req: &ApiRequest, now: u64) -> Outcome<Option<ApiResponse>> {
        if let Some(key) = &self.cfg.operator_key {
            if req.header(OPERATOR_KEY_HEADER) != Some(key.as_str()) {
                return Err(ApiResponse::error(401, "Unauthorized", "operator key required"));
            }
        }
        let body: RegisterBody = parse_body(req)?;
        let appid = match body.appid {
            Some(a) => a,
            None => loop {
                let bytes: [u8; 8] = rand::Rng::random(&mut self.rng);
                let candidate = AppId::new(format!("app-{}", hex::encode(bytes))).expect("valid app id");
                if self.store.app(&candidate).is_none() {
                    break candidate;
                }
            },
        };
        let secret = generate_secret(&mut self.rng);
        let reg = AppRegistration {
            appid: appid.clone(),
            role: body.role,
            secret_digest: secret_digest(&secret),
            created_at: now,
        };
        match self.store.register_app(reg) {
            Ok(()) => {}
            Err(StoreError::AppIdTaken(_)) => {
                return Err(ApiResponse::error(409, "AppIDTaken", format!("{appid} is already registered")))
            }
            Err(e) => return Err(ApiResponse::error(500, "StoreError", e)),
        }
        tracing::info!(manager = %self.cfg.id, %appid, role = ?body.role, "application registered");
        let creds = IssuedCredentials {
            appid,
            secret_token: secret,
            role: body.role,
            created_at: now,
        };
        Ok(Some(ApiResponse::json(201, &serde_json::to_value(creds).expect("serialises"))))
    }

    fn api_mint(&mut self, req: &ApiRequest, now: u64) -> Outcome<Option<ApiResponse>> {
        let body: MintBody = parse_body(req)?;
        let bad = || ApiResponse::error(401, "BadCredentials", "unknown application or wrong secret");
        let reg = self.store.app(&body.appid).cloned().ok_or_else(bad)?;
        let (token, exp) = self.tokens.mint(&reg, &body.secret_token, now).map_err(|_| bad())?;
        Ok(Some(ApiResponse::json(
            200,
            &json!({ "token": token, "expires_at": exp, "appid": reg.appid, "role": reg.role }),
        )))
    }

    fn verify(&mut self, req_id: ReqId, req: &ApiRequest, now: u64) -> Outcome<Verified> {
        let unauthorized = |m: &str| ApiResponse::error(401, "Unauthorized", m);
        let Some(token) = req.bearer_token() else {
            self.record_audit(req_id, Stage::Verify, false, Some("missing token".into()));
            return Err(unauthorized("bearer token required"));
        };
        let verified = match self.tokens.verify(token, now) {
            Ok(v) => v,
            Err(_) => {
                self.record_audit(req_id, Stage::Verify, false, Some("invalid token".into()));
                tracing::info!(manager = %self.cfg.id, path = %req.path, "token rejected");
                return Err(unauthorized("invalid or expired token"));
            }
        };
        if req.header(APP_ID_HEADER).is_some_and(|a| a != verified.appid.as_str()) {
            self.record_audit(req_id, Stage::Verify, false, Some("appid mismatch".into()));
            return Err(unauthorized("x-app-id does not match the token"));
        }
        self.record_audit(req_id, Stage::Verify, true, None);
        Ok(verified)
    }

    fn require_management(&mut self, req_id: ReqId, who: &Verified) -> Outcome<()> {
        if who.role == Role::ManagementApp {
            Ok(())
        } else {
            self.record_audit(req_id, Stage::Security, false, Some("role".into()));
            Err(ApiResponse::error(403, "RoleForbidden", "management applications only"))
        }
    }

    fn known_record(&self, mtid: &Mtid) -> Outcome<ManagedThingRecord> {
        self.store
            .record(mtid)
            .cloned()
            .ok_or_else(|| ApiResponse::error(404, "UnknownMT", format!("no record for {mtid}")))
    }

    /// The security gate: channel first, then requester.
    fn security_gate(&mut self, req_id: ReqId, who: &Verified, mtid: &Mtid, secure: bool) -> Outcome<()> {
        let Some(profile) = self.store.profile(mtid) else {
            self.record_audit(req_id, Stage::Security, false, Some("unknown mt".into()));
            return Err(ApiResponse::error(404, "UnknownMT", format!("no record for {mtid}")));
        };
        match check_policy_detailed(profile, &who.appid, secure) {
            Ok(()) => {
                self.record_audit(req_id, Stage::Security, true, None);
                Ok(())
            }
            Err(point) => {
                self.record_audit(req_id, Stage::Security, false, Some(point.as_str().into()));
                tracing::info!(manager = %self.cfg.id, %mtid, appid = %who.appid, point = point.as_str(), "security gate denied request");
                Err(ApiResponse::json(
                    403,
                    &json!({ "error": "Forbidden", "message": "access denied", "decision_point": point }),
                ))
            }
        }
    }

    fn edit_gate(&mut self, req_id: ReqId, who: &Verified, mtid: &Mtid) -> Outcome<()> {
        self.require_management(req_id, who)?;
        let Some(profile) = self.store.profile(mtid) else {
            return Err(ApiResponse::error(404, "UnknownMT", format!("no record for {mtid}")));
        };
        profile.authorize_edit(&who.appid, &self.cfg.admins).map_err(|e| {
            self.record_audit(req_id, Stage::Security, false, Some("not owner".into()));
            ApiResponse::error(403, "NotOwner", e)
        })?;
        self.record_audit(req_id, Stage::Security, true, None);
        Ok(())
    }

    /// The privacy gate; yields the obfuscation level to apply.
    fn privacy_gate(&mut self, req_id: ReqId, who: &Verified, rec: &ManagedThingRecord, now: u64) -> Outcome<u32> {
        let deny = |m: String| ApiResponse::error(403, "PrivacyDenied", m);
        let Some(loc) = rec.loc.clone() else {
            self.record_audit(req_id, Stage::Privacy, false, Some("no location".into()));
            return Err(ApiResponse::error(404, "UnknownAttribute", "thing has no location"));
        };
        let ctx = RequestContext {
            requester: who.appid.clone(),
            mtid: rec.mtid.clone(),
            time: now,
            mt_location: loc,
        };
        match evaluate(&ctx, self.store.policies(&rec.mtid)) {
            Decision::Disclose(level) => {
                self.record_audit(req_id, Stage::Privacy, true, Some(format!("level {level}")));
                Ok(level)
            }
            Decision::Deny => {
                self.record_audit(req_id, Stage::Privacy, false, Some("deny".into()));
                tracing::info!(manager = %self.cfg.id, mtid = %rec.mtid, appid = %who.appid, "privacy gate denied location");
                Err(deny("location not disclosed".into()))
            }
        }
    }

    /// Generalises every location value in `values` by `level`.
    fn obfuscate_values(&mut self, req_id: ReqId, values: Vec<StoredReading>, level: u32) -> Outcome<Vec<StoredReading>> {
        let mut outv = Vec::with_capacity(values.len());
        for mut r in values {
            if let Value::Location(loc) = &r.reading.value {
                match obfuscate(loc, level, &self.hierarchy) {
                    Ok(g) => r.reading.value = Value::Location(g),
                    Err(e) => {
                        self.record_audit(req_id, Stage::Privacy, false, Some(e.to_string()));
                        return Err(ApiResponse::error(403, "PrivacyDenied", e));
                    }
                }
            }
            outv.push(r);
        }
        Ok(outv)
    }

    fn values_response(mtid: &Mtid, attr: &AttrName, values: &[StoredReading]) -> ApiResponse {
        let values: Vec<Json> = values.iter().map(reading_json).collect();
        ApiResponse::json(200, &json!({ "mtid": mtid, "attribute": attr, "values": values }))
    }

    fn api_get(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, a: &str, now: u64, out: &mut Vec<ManagerOutput>) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        let mtid = parse_mtid(m)?;
        self.security_gate(req_id, &who, &mtid, req.secure)?;
        let rec = self.known_record(&mtid)?;
        let attr = AttrName::new(a).map_err(|_| ApiResponse::error(404, "UnknownAttribute", format!("no attribute {a}")))?;
        let level = if attr.is_location() {
            Some(self.privacy_gate(req_id, &who, &rec, now)?)
        } else {
            None
        };
        if query_flag(req, "live") && attr.class() != AttrClass::Location {
            self.record_audit(req_id, Stage::StoreRead, true, Some("live".into()));
            let body = vec![Field::name(attr.as_str())];
            return match self.start_call(req_id, &mtid, CallKind::Get { attr, level }, MessageKind::Get, body, now, out) {
                Ok(()) => Ok(None),
                Err(e) => Err(e),
            };
        }
        let from = query_u64(req, "from", 0)?;
        let to = query_u64(req, "to", u64::MAX)?;
        let values: Vec<StoredReading> = if attr.class() == AttrClass::Location {
            let loc = rec.loc.clone().expect("privacy gate checked the location");
            vec![StoredReading {
                reading: Reading { name: attr.clone(), value: Value::Location(loc), unit: None, ts: rec.last_seen },
                source: Source::Agent,
            }]
        } else if self.store.series(&mtid, &attr).is_some() {
            let mut v: Vec<StoredReading> = self.store.query(&mtid, &attr, from, to).into_iter().cloned().collect();
            if query_flag(req, "latest") {
                v = v.pop().into_iter().collect();
            }
            v
        } else if let Some(at) = rec.attributes.get(&attr) {
            vec![StoredReading {
                reading: Reading { name: attr.clone(), value: at.value.clone(), unit: at.unit.clone(), ts: rec.registered_at },
                source: Source::Agent,
            }]
        } else {
            self.record_audit(req_id, Stage::StoreRead, false, Some("unknown attribute".into()));
            return Err(ApiResponse::error(404, "UnknownAttribute", format!("{mtid} has no {attr}")));
        };
        let values = match level {
            Some(k) => self.obfuscate_values(req_id, values, k)?,
            None => values,
        };
        self.record_audit(req_id, Stage::StoreRead, true, None);
        Ok(Some(Self::values_response(&mtid, &attr, &values)))
    }

    /// Completes a live read once the agent answered.
    pub(crate) fn finish_live_get(&mut self, req_id: ReqId, mtid: &Mtid, attr: &AttrName, level: Option<u32>, msg: &crate::codec::ProtocolMessage, now: u64) -> ApiResponse {
        let Some(f) = msg.body.iter().find(|f| f.name == attr.as_str()) else {
            return ApiResponse::error(502, "DeviceError", "reply lacks the attribute");
        };
        let reading = match self.reading_from(f, now) {
            Ok(r) => r,
            Err(e) => return ApiResponse::error(502, "DeviceError", e),
        };
        self.append_reading(mtid, reading.clone(), Source::Agent);
        let stored = StoredReading { reading, source: Source::Agent };
        let values = match level {
            Some(k) => match self.obfuscate_values(req_id, vec![stored], k) {
                Ok(v) => v,
                Err(e) => return e,
            },
            None => vec![stored],
        };
        Self::values_response(mtid, attr, &values)
    }

    fn api_list(&mut self, req_id: ReqId, req: &ApiRequest, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        let things: Vec<Json> = self
            .store
            .state()
            .records
            .values()
            .filter(|r| {
                who.role == Role::ManagementApp
                    || self
                        .store
                        .profile(&r.mtid)
                        .is_some_and(|p| check_policy_detailed(p, &who.appid, req.secure).is_ok())
            })
            .map(|r| summary_json(r, self.store.admission_state(&r.mtid)))
            .collect();
        Ok(Some(ApiResponse::json(200, &json!({ "things": things }))))
    }

    fn api_record(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        let rec = self.known_record(&mtid)?;
        Ok(Some(ApiResponse::json(200, &record_json(&rec, self.store.admission_state(&mtid)))))
    }

    fn api_delete_thing(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64, out: &mut Vec<ManagerOutput>) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        self.known_record(&mtid)?;
        self.edit_gate(req_id, &who, &mtid)?;
        self.commit(Mutation::DeleteRecord { mtid: mtid.clone() });
        self.forget_thing(&mtid);
        tracing::info!(manager = %self.cfg.id, %mtid, by = %who.appid, "thing deleted");
        self.request_publish(out);
        Ok(Some(ApiResponse::json(200, &json!({ "deleted": mtid }))))
    }

    fn api_status(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64, out: &mut Vec<ManagerOutput>) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        let mtid = parse_mtid(m)?;
        if who.role != Role::ManagementApp {
            self.security_gate(req_id, &who, &mtid, req.secure)?;
        }
        self.known_record(&mtid)?;
        let reachable = self.is_live(&mtid) && self.store.admission_state(&mtid) == AdmissionState::Approved;
        if !reachable {
            return Ok(Some(self.status_response(&mtid, false)));
        }
        match self.start_call(req_id, &mtid, CallKind::Status, MessageKind::MgmtGet, Vec::new(), now, out) {
            Ok(()) => Ok(None),
            Err(_) => Ok(Some(self.status_response(&mtid, false))),
        }
    }

    fn api_actuate(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64, out: &mut Vec<ManagerOutput>) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        let mtid = parse_mtid(m)?;
        self.security_gate(req_id, &who, &mtid, req.secure)?;
        self.known_record(&mtid)?;
        let body: ActuationBody = parse_body(req)?;
        if !body.value.is_well_formed() {
            return Err(bad_request("value is not well formed"));
        }
        let field = Field::value(body.attribute.as_str(), body.value);
        tracing::info!(manager = %self.cfg.id, %mtid, appid = %who.appid, attribute = %body.attribute, "actuation requested");
        self.start_call(req_id, &mtid, CallKind::Set { attr: body.attribute }, MessageKind::Set, vec![field], now, out)?;
        Ok(None)
    }

    fn api_contribute(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        let mtid = parse_mtid(m)?;
        self.security_gate(req_id, &who, &mtid, req.secure)?;
        self.known_record(&mtid)?;
        let body: DataBody = parse_body(req)?;
        if body.readings.is_empty() {
            return Err(bad_request("no readings"));
        }
        let mut readings = Vec::with_capacity(body.readings.len());
        for r in body.readings {
            let f = Field {
                name: r.name,
                value: Some(r.value),
                unit: r.unit,
                ts: r.ts,
            };
            readings.push(self.reading_from(&f, now).map_err(bad_request)?);
        }
        let n = readings.len();
        for r in readings {
            self.append_reading(&mtid, r, Source::App(who.appid.clone()));
        }
        Ok(Some(ApiResponse::json(201, &json!({ "mtid": mtid, "stored": n }))))
    }

    fn api_put_attributes(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        let mut rec = self.known_record(&mtid)?;
        self.edit_gate(req_id, &who, &mtid)?;
        let body: AttributesBody = parse_body(req)?;
        for a in &body.attributes {
            if a.name == AttrName::id() {
                return Err(ApiResponse::error(400, "ImmutableAttribute", "ID cannot change"));
            }
            if a.name.class() != AttrClass::Management {
                return Err(bad_request(format!("{} is not a management attribute", a.name)));
            }
            check_management_value(&a.name, &a.value).map_err(bad_request)?;
            if let Value::Location(loc) = &a.value {
                self.hierarchy.validate_location(loc).map_err(bad_request)?;
            }
        }
        let mobile = AttrName::new("MobileLocation").expect("valid");
        for a in body.attributes {
            if let Value::Location(loc) = &a.value {
                if self.store.latest(&mtid, &mobile).is_none() {
                    rec.loc = Some(loc.clone());
                }
            }
            rec.attributes.insert(a.name.clone(), a);
        }
        self.commit(Mutation::PutRecord { record: rec.clone() });
        Ok(Some(ApiResponse::json(200, &record_json(&rec, self.store.admission_state(&mtid)))))
    }

    fn api_delete_readings(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, a: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        self.known_record(&mtid)?;
        self.edit_gate(req_id, &who, &mtid)?;
        let attr = AttrName::new(a).map_err(|_| ApiResponse::error(404, "UnknownAttribute", format!("no attribute {a}")))?;
        let from = query_u64(req, "from", 0)?;
        let to = query_u64(req, "to", u64::MAX)?;
        let removed = self.store.query(&mtid, &attr, from, to).len();
        self.commit(Mutation::DeleteReadings { mtid: mtid.clone(), attribute: attr.clone(), from, to });
        Ok(Some(ApiResponse::json(200, &json!({ "mtid": mtid, "attribute": attr, "deleted": removed }))))
    }

    fn api_alerts(&mut self, req_id: ReqId, req: &ApiRequest, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        let only = req.query.get("mtid").cloned();
        let mut allowed: BTreeMap<Mtid, bool> = BTreeMap::new();
        let mut alerts = Vec::new();
        for a in self.store.alerts() {
            if only.as_deref().is_some_and(|m| m != a.mtid.as_str()) || matches!(a.value, Value::Location(_)) {
                continue;
            }
            let ok = *allowed.entry(a.mtid.clone()).or_insert_with(|| {
                self.store
                    .profile(&a.mtid)
                    .is_some_and(|p| check_policy_detailed(p, &who.appid, req.secure).is_ok())
            });
            if ok {
                alerts.push(serde_json::to_value(a).expect("serialises"));
            }
        }
        self.record_audit(req_id, Stage::Security, true, None);
        Ok(Some(ApiResponse::json(200, &json!({ "alerts": alerts }))))
    }

    fn api_get_profile(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        let p = self
            .store
            .profile(&mtid)
            .ok_or_else(|| ApiResponse::error(404, "UnknownMT", format!("no record for {mtid}")))?;
        Ok(Some(ApiResponse::json(200, &serde_json::to_value(p).expect("serialises"))))
    }

    fn api_put_profile(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        self.edit_gate(req_id, &who, &mtid)?;
        let body: ProfileBody = parse_body(req)?;
        let mut profile = self.store.profile(&mtid).cloned().expect("edit gate checked");
        for c in &body.changes {
            profile = profile.apply(c);
        }
        self.commit(Mutation::PutProfile { profile: profile.clone() });
        tracing::info!(manager = %self.cfg.id, %mtid, by = %who.appid, "security profile edited");
        Ok(Some(ApiResponse::json(200, &serde_json::to_value(profile).expect("serialises"))))
    }

    fn api_get_policies(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        self.known_record(&mtid)?;
        let policies = self.store.policies(&mtid);
        Ok(Some(ApiResponse::json(200, &json!({ "mtid": mtid, "policies": policies }))))
    }

    fn api_put_policies(&mut self, req_id: ReqId, req: &ApiRequest, m: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let mtid = parse_mtid(m)?;
        self.known_record(&mtid)?;
        self.edit_gate(req_id, &who, &mtid)?;
        let body: PoliciesBody = parse_body(req)?;
        validate_policies(&mtid, &body.policies, &self.hierarchy)
            .map_err(|e| ApiResponse::error(400, "InvalidPolicy", e))?;
        self.commit(Mutation::PutPolicies { mtid: mtid.clone(), policies: body.policies.clone() });
        tracing::info!(manager = %self.cfg.id, %mtid, by = %who.appid, count = body.policies.len(), "disclosure policies replaced");
        Ok(Some(ApiResponse::json(200, &json!({ "mtid": mtid, "policies": body.policies }))))
    }

    fn api_pending(&mut self, req_id: ReqId, req: &ApiRequest, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let pending: Vec<Json> = self
            .store
            .state()
            .admissions
            .values()
            .filter(|a| a.state == AdmissionState::Pending)
            .map(|a| serde_json::to_value(a).expect("serialises"))
            .collect();
        Ok(Some(ApiResponse::json(200, &json!({ "pending": pending }))))
    }

    fn admission_for(&self, a: &str) -> Outcome<crate::security::AgentAdmission> {
        AgentId::new(a)
            .ok()
            .and_then(|id| self.store.admission(&id).cloned())
            .ok_or_else(|| ApiResponse::error(404, "UnknownAgent", format!("no agent {a}")))
    }

    fn api_approve(&mut self, req_id: ReqId, req: &ApiRequest, a: &str, now: u64, out: &mut Vec<ManagerOutput>) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let adm = self.admission_for(a)?;
        let next = adm
            .approve(who.appid.as_str(), now)
            .map_err(|e| ApiResponse::error(409, "NotPending", e))?;
        self.commit(Mutation::PutAdmission { admission: next.clone() });
        tracing::info!(manager = %self.cfg.id, agentid = %next.agentid, by = %who.appid, "agent approved");
        self.push_approval(&next.mtid, &next.agentid, out);
        Ok(Some(ApiResponse::json(200, &serde_json::to_value(next).expect("serialises"))))
    }

    fn api_revoke(&mut self, req_id: ReqId, req: &ApiRequest, a: &str, now: u64) -> Outcome<Option<ApiResponse>> {
        let who = self.verify(req_id, req, now)?;
        self.require_management(req_id, &who)?;
        let adm = self.admission_for(a)?;
        let next = adm.revoke().map_err(|e| ApiResponse::error(409, "NotRevocable", e))?;
        self.commit(Mutation::PutAdmission { admission: next.clone() });
        tracing::info!(manager = %self.cfg.id, agentid = %next.agentid, by = %who.appid, "agent revoked");
        Ok(Some(ApiResponse::json(200, &serde_json::to_value(next).expect("serialises"))))
    }
}
