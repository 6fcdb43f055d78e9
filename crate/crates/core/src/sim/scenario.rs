//! Scenario scripts: topology, device fleets, applications, admin behaviour,
//! faults and probes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::agent::{ActuatorSpec, AlertRule};
use crate::codec::MessageKind;
use crate::geo::GeoHierarchy;
use crate::http::Method;
use crate::model::{AppId, AttrName, ManagerId, Mtid, Value};
use crate::token::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub seed: u64,
    /// Simulated run length.
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
    pub managers: Vec<ManagerSpec>,
    /// Run a manager of managers that every manager publishes to.
    #[serde(default)]
    pub moms: bool,
    #[serde(default)]
    pub fleets: Vec<FleetSpec>,
    #[serde(default)]
    pub apps: Vec<AppSpec>,
    #[serde(default)]
    pub admin: AdminSpec,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub probes: Vec<Probe>,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub hierarchy: HierarchySpec,
}

fn default_duration() -> u64 {
    60_000
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerSpec {
    pub id: ManagerId,
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub allowlist: BTreeSet<String>,
    #[serde(default = "default_device_timeout")]
    pub device_timeout_ms: u64,
    #[serde(default = "default_publish_period")]
    pub publish_period_ms: u64,
}

fn default_device_timeout() -> u64 {
    5_000
}

fn default_publish_period() -> u64 {
    10_000
}

impl ManagerSpec {
    pub fn new(id: &str) -> Self {
        Self {
            id: ManagerId::new(id).expect("valid manager id"),
            capacity: None,
            allowlist: BTreeSet::new(),
            device_timeout_ms: default_device_timeout(),
            publish_period_ms: default_publish_period(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum FleetJoin {
    /// Every agent joins this manager directly.
    Direct { manager: ManagerId },
    /// Direct joins assigned round-robin over the managers.
    Spread { managers: Vec<ManagerId> },
    /// Agents discover the managers and pick the least loaded.
    Associate { managers: Vec<ManagerId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub count: usize,
    #[serde(default = "default_prefix")]
    pub prefix: String,
    pub join: FleetJoin,
    #[serde(default)]
    pub profile: DeviceProfile,
    #[serde(default)]
    pub colocated: bool,
    /// Agents start at a random instant in `[0, start_spread_ms]`.
    #[serde(default = "default_spread")]
    pub start_spread_ms: u64,
}

fn default_prefix() -> String {
    "mt".into()
}

fn default_spread() -> u64 {
    1_000
}

impl FleetSpec {
    pub fn new(count: usize, prefix: &str, join: FleetJoin) -> Self {
        Self {
            count,
            prefix: prefix.into(),
            join,
            profile: DeviceProfile::default(),
            colocated: false,
            start_spread_ms: default_spread(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SensorKind {
    Number { min: f64, max: f64 },
    Bool { p_true: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub attribute: AttrName,
    pub kind: SensorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub sensors: Vec<SensorSpec>,
    pub update_period_ms: u64,
    /// No device updates are sent from this instant on.
    #[serde(default)]
    pub updates_until_ms: Option<u64>,
    #[serde(default)]
    pub alert_rules: Vec<AlertRule>,
    #[serde(default)]
    pub actuators: BTreeMap<AttrName, ActuatorSpec>,
    /// Report a random MobileLocation with every update.
    #[serde(default)]
    pub mobile: bool,
}

impl DeviceProfile {
    /// One reading per sensor, plus a MobileLocation for mobile devices.
    pub fn sample<R: Rng + ?Sized>(&self, h: &GeoHierarchy, rng: &mut R) -> Vec<(AttrName, Value)> {
        let mut readings = Vec::new();
        for s in &self.sensors {
            let v = match s.kind {
                SensorKind::Number { min, max } => {
                    let x = if max > min { rng.random_range(min..=max) } else { min };
                    Value::Number((x * 10.0).round() / 10.0)
                }
                SensorKind::Bool { p_true } => Value::Bool(rng.random_bool(p_true.clamp(0.0, 1.0))),
            };
            readings.push((s.attribute.clone(), v));
        }
        if self.mobile {
            let loc = h.random_leaf_location(rng);
            readings.push((AttrName::new("MobileLocation").expect("valid"), Value::Location(loc)));
        }
        readings
    }

    /// Attributes the device reports.
    pub fn behavioural(&self) -> BTreeSet<AttrName> {
        let mut names: BTreeSet<AttrName> = self.sensors.iter().map(|s| s.attribute.clone()).collect();
        if self.mobile {
            names.insert(AttrName::new("MobileLocation").expect("valid"));
        }
        names
    }
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            sensors: vec![SensorSpec {
                attribute: AttrName::new("Temperature").expect("valid"),
                kind: SensorKind::Number { min: 15.0, max: 35.0 },
            }],
            update_period_ms: 1_000,
            updates_until_ms: None,
            alert_rules: Vec::new(),
            actuators: BTreeMap::new(),
            mobile: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub appid: AppId,
    pub role: Role,
    /// Added to every thing's authorized entities.
    #[serde(default)]
    pub grant: bool,
    /// Installs a disclosure policy at this level for every thing.
    #[serde(default)]
    pub disclose_level: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdminAction {
    Approve,
    Revoke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledAdmin {
    pub at: u64,
    pub mtid: Mtid,
    pub action: AdminAction,
}

/// The simulated operator: polls for pending agents, approves them, and
/// provisions profiles and policies for new things.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdminSpec {
    pub poll_ms: u64,
    /// Things whose agents the operator leaves pending.
    #[serde(default)]
    pub hold_pending: BTreeSet<Mtid>,
    #[serde(default)]
    pub actions: Vec<ScheduledAdmin>,
    /// Things provisioned with `secure_only`.
    #[serde(default)]
    pub secure_only: BTreeSet<Mtid>,
}

impl Default for AdminSpec {
    fn default() -> Self {
        Self {
            poll_ms: 200,
            hold_pending: BTreeSet::new(),
            actions: Vec::new(),
            secure_only: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FaultKind {
    /// Links of the target drop; an agent target stays unreachable for the
    /// duration.
    Disconnect,
    /// Frames to and from the target are lost with this probability,
    /// optionally only for some kinds.
    DropPct {
        pct: f64,
        #[serde(default)]
        kinds: Vec<MessageKind>,
    },
    /// The target manager (or `moms`) is down.
    ManagerOutage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub at: u64,
    /// An MTID, a manager id, or `moms`.
    pub target: String,
    pub kind: FaultKind,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "to")]
pub enum Via {
    Moms,
    Manager { id: ManagerId },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Required status; any 2xx when absent.
    #[serde(default)]
    pub status: Option<u16>,
    /// The newest returned value must equal the owning manager's latest
    /// stored reading.
    #[serde(default)]
    pub matches_store: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub at: u64,
    pub via: Via,
    pub app: AppId,
    pub method: Method,
    /// `{mtid}` is replaced per thing when `for_each_mt` is set.
    pub path: String,
    #[serde(default)]
    pub body: Option<Json>,
    #[serde(default)]
    pub secure: bool,
    #[serde(default)]
    pub for_each_mt: bool,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub base_latency_ms: u64,
    pub jitter_ms: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            base_latency_ms: 5,
            jitter_ms: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum HierarchySpec {
    #[default]
    Bundled,
    Synthetic { branching: Vec<usize> },
}
