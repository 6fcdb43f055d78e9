//! Management database: thing records, reading series, admissions, security
//! profiles, disclosure policies, application registrations and alerts.
//!
//! State lives in memory. When a journal path is given every mutation is
//! appended to it as one JSON line and replayed on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, AppId, Attribute, AttrName, Mtid, Reading, SemanticLocation, Value};
use crate::privacy::DisclosurePolicy;
use crate::security::{AdmissionState, AgentAdmission, SecurityProfile};
use crate::token::AppRegistration;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("journal I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("appid {0} is taken")]
    AppIdTaken(AppId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    Connected,
    Disconnected,
}

/// One row of the managed-things table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagedThingRecord {
    pub mtid: Mtid,
    pub agentid: AgentId,
    pub attributes: BTreeMap<AttrName, Attribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc: Option<SemanticLocation>,
    pub security_ref: String,
    pub registered_at: u64,
    pub last_seen: u64,
    pub connection: Connection,
}

impl ManagedThingRecord {
    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.values().find(|a| a.name.as_str() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Agent,
    App(AppId),
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Agent => f.write_str("agent"),
            Source::App(a) => write!(f, "app:{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReading {
    pub reading: Reading,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub mtid: Mtid,
    pub seq: u64,
    pub attribute: AttrName,
    pub value: Value,
    pub ts: u64,
    pub received_at: u64,
}

/// Journaled state change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum Mutation {
    PutRecord { record: ManagedThingRecord },
    DeleteRecord { mtid: Mtid },
    AppendReading { mtid: Mtid, reading: StoredReading },
    DeleteReadings { mtid: Mtid, attribute: AttrName, from: u64, to: u64 },
    PutAdmission { admission: AgentAdmission },
    PutProfile { profile: SecurityProfile },
    PutPolicies { mtid: Mtid, policies: Vec<DisclosurePolicy> },
    PutApp { app: AppRegistration },
    PutAlert { alert: AlertRecord },
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct StoreState {
    pub records: BTreeMap<Mtid, ManagedThingRecord>,
    pub readings: BTreeMap<(Mtid, AttrName), Vec<StoredReading>>,
    pub admissions: BTreeMap<AgentId, AgentAdmission>,
    pub profiles: BTreeMap<Mtid, SecurityProfile>,
    pub policies: BTreeMap<Mtid, Vec<DisclosurePolicy>>,
    pub apps: BTreeMap<AppId, AppRegistration>,
    pub alerts: BTreeMap<(Mtid, u64), AlertRecord>,
}

impl StoreState {
    fn apply(&mut self, m: Mutation) {
        match m {
            Mutation::PutRecord { record } => {
                self.records.insert(record.mtid.clone(), record);
            }
            Mutation::DeleteRecord { mtid } => {
                if let Some(rec) = self.records.remove(&mtid) {
                    self.admissions.remove(&rec.agentid);
                }
                self.readings.retain(|(m, _), _| *m != mtid);
                self.profiles.remove(&mtid);
                self.policies.remove(&mtid);
                self.alerts.retain(|(m, _), _| *m != mtid);
            }
            Mutation::AppendReading { mtid, reading } => {
                let series = self
                    .readings
                    .entry((mtid, reading.reading.name.clone()))
                    .or_default();
                let at = series.partition_point(|r| r.reading.ts <= reading.reading.ts);
                series.insert(at, reading);
            }
            Mutation::DeleteReadings { mtid, attribute, from, to } => {
                if let Some(series) = self.readings.get_mut(&(mtid, attribute)) {
                    series.retain(|r| r.reading.ts < from || r.reading.ts > to);
                }
            }
            Mutation::PutAdmission { admission } => {
                self.admissions.insert(admission.agentid.clone(), admission);
            }
            Mutation::PutProfile { profile } => {
                self.profiles.insert(profile.mtid.clone(), profile);
            }
            Mutation::PutPolicies { mtid, policies } => {
                self.policies.insert(mtid, policies);
            }
            Mutation::PutApp { app } => {
                self.apps.insert(app.appid.clone(), app);
            }
            Mutation::PutAlert { alert } => {
                self.alerts.insert((alert.mtid.clone(), alert.seq), alert);
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Store {
    state: StoreState,
    journal: Option<(PathBuf, File)>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a journal and replays it. A torn final line, left by
    /// a crash mid-write, is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut state = StoreState::default();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path)?)
                .lines()
                .collect::<Result<_, _>>()?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Mutation>(line) {
                    Ok(m) => state.apply(m),
                    Err(_) if i + 1 == last => break,
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            line: i + 1,
                            reason: e.to_string(),
                        })
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            state,
            journal: Some((path, file)),
        })
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|(p, _)| p.as_path())
    }

    /// Applies a mutation, journaling it first when persistence is on.
    pub fn commit(&mut self, m: Mutation) -> Result<(), StoreError> {
        if let Some((_, file)) = &mut self.journal {
            let mut line = serde_json::to_vec(&m).expect("mutation serialises");
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        self.state.apply(m);
        Ok(())
    }

    /// Connection state and last-seen time are volatile and not journaled.
    pub fn touch(&mut self, mtid: &Mtid, now: u64, connection: Option<Connection>) {
        if let Some(rec) = self.state.records.get_mut(mtid) {
            rec.last_seen = rec.last_seen.max(now);
            if let Some(c) = connection {
                rec.connection = c;
            }
        }
    }

    pub fn record(&self, mtid: &Mtid) -> Option<&ManagedThingRecord> {
        self.state.records.get(mtid)
    }

    pub fn record_by_agent(&self, agentid: &AgentId) -> Option<&ManagedThingRecord> {
        let adm = self.state.admissions.get(agentid)?;
        self.state.records.get(&adm.mtid)
    }

    pub fn admission(&self, agentid: &AgentId) -> Option<&AgentAdmission> {
        self.state.admissions.get(agentid)
    }

    pub fn admission_state(&self, mtid: &Mtid) -> AdmissionState {
        self.record(mtid)
            .and_then(|r| self.admission(&r.agentid))
            .map_or(AdmissionState::Unknown, |a| a.state)
    }

    pub fn profile(&self, mtid: &Mtid) -> Option<&SecurityProfile> {
        self.state.profiles.get(mtid)
    }

    pub fn policies(&self, mtid: &Mtid) -> &[DisclosurePolicy] {
        self.state.policies.get(mtid).map_or(&[], Vec::as_slice)
    }

    pub fn app(&self, appid: &AppId) -> Option<&AppRegistration> {
        self.state.apps.get(appid)
    }

    /// Uniqueness of AppIDs is enforced here, where registrations serialize.
    pub fn register_app(&mut self, app: AppRegistration) -> Result<(), StoreError> {
        if self.state.apps.contains_key(&app.appid) {
            return Err(StoreError::AppIdTaken(app.appid));
        }
        self.commit(Mutation::PutApp { app })
    }

    pub fn series(&self, mtid: &Mtid, attr: &AttrName) -> Option<&[StoredReading]> {
        self.state
            .readings
            .get(&(mtid.clone(), attr.clone()))
            .map(Vec::as_slice)
    }

    /// Readings with `from <= ts <= to`, oldest first.
    pub fn query(&self, mtid: &Mtid, attr: &AttrName, from: u64, to: u64) -> Vec<&StoredReading> {
        self.series(mtid, attr)
            .unwrap_or_default()
            .iter()
            .filter(|r| r.reading.ts >= from && r.reading.ts <= to)
            .collect()
    }

    pub fn latest(&self, mtid: &Mtid, attr: &AttrName) -> Option<&StoredReading> {
        self.series(mtid, attr).and_then(<[_]>::last)
    }

    pub fn reading_count(&self, mtid: &Mtid) -> usize {
        self.state
            .readings
            .iter()
            .filter(|((m, _), _)| m == mtid)
            .map(|(_, s)| s.len())
            .sum()
    }

    pub fn attributes_with_readings(&self, mtid: &Mtid) -> BTreeSet<AttrName> {
        self.state
            .readings
            .iter()
            .filter(|((m, _), s)| m == mtid && !s.is_empty())
            .map(|((_, a), _)| a.clone())
            .collect()
    }

    pub fn has_alert(&self, mtid: &Mtid, seq: u64) -> bool {
        self.state.alerts.contains_key(&(mtid.clone(), seq))
    }

    pub fn alerts(&self) -> impl Iterator<Item = &AlertRecord> {
        self.state.alerts.values()
    }
}
