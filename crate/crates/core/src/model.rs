//! Identifiers, attribute vocabulary and descriptor validation shared by every
//! component of the platform.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest identifier accepted for MTIDs, AgentIDs, AppIDs and ManagerIDs.
pub const MAX_ID_LEN: usize = 64;

/// Built-in management attribute names.
pub const MANAGEMENT_ATTRIBUTES: [&str; 9] = [
    "ID",
    "Name",
    "SerialNumber",
    "FirmwareVersion",
    "NetworkAddress",
    "BatteryLife",
    "FixedLocation",
    "Type",
    "Admin",
];

/// Built-in behavioural attribute names.
pub const BEHAVIOURAL_ATTRIBUTES: [&str; 7] = [
    "Temperature",
    "Motion",
    "Sound",
    "Pressure",
    "WaterDetection",
    "FireDetection",
    "MobileLocation",
];

/// Pseudo attribute naming the current location of a thing (fixed or latest mobile).
pub const LOCATION: &str = "Location";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid {kind} {value:?}")]
    InvalidId { kind: &'static str, value: String },
    #[error("invalid attribute name {0:?}")]
    InvalidAttributeName(String),
    #[error("descriptor has no ID attribute")]
    MissingId,
    #[error("duplicate attribute name {0}")]
    DuplicateAttributeName(String),
    #[error("malformed value for {name}: {reason}")]
    MalformedValue { name: String, reason: String },
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_ID_LEN
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

macro_rules! ident_type {
    ($(#[$meta:meta])* $name:ident, $kind:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
                let value = value.into();
                if valid_ident(&value) {
                    Ok(Self(value))
                } else {
                    Err(ModelError::InvalidId { kind: $kind, value })
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = ModelError;
            fn try_from(value: String) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl FromStr for $name {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

ident_type!(
    /// Managed thing identifier, unique within one deployment.
    Mtid,
    "MTID"
);
ident_type!(
    /// Agent identifier assigned by the manager at registration.
    AgentId,
    "AgentID"
);
ident_type!(
    /// Application identifier, unique among registered applications.
    AppId,
    "AppID"
);
ident_type!(
    /// Manager identifier, unique within a MoMs domain.
    ManagerId,
    "ManagerID"
);

impl From<Mtid> for AgentId {
    /// An agent residing on the thing itself uses the MTID as its AgentID.
    fn from(mtid: Mtid) -> Self {
        AgentId(mtid.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrClass {
    Management,
    Behavioural,
    /// The [`LOCATION`] pseudo attribute.
    Location,
    Custom,
}

/// Attribute name: a built-in vocabulary entry or an operator-defined name.
///
/// Operator names may not collide (case-insensitively) with the built-ins.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttrName(String);

impl AttrName {
    pub fn new(name: impl Into<String>) -> Result<Self, ModelError> {
        let name = name.into();
        if !valid_ident(&name) {
            return Err(ModelError::InvalidAttributeName(name));
        }
        let reserved = MANAGEMENT_ATTRIBUTES
            .iter()
            .chain(BEHAVIOURAL_ATTRIBUTES.iter())
            .chain(std::iter::once(&LOCATION));
        for builtin in reserved {
            if builtin.eq_ignore_ascii_case(&name) && *builtin != name {
                return Err(ModelError::InvalidAttributeName(name));
            }
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn class(&self) -> AttrClass {
        let s = self.0.as_str();
        if s == LOCATION {
            AttrClass::Location
        } else if MANAGEMENT_ATTRIBUTES.contains(&s) {
            AttrClass::Management
        } else if BEHAVIOURAL_ATTRIBUTES.contains(&s) {
            AttrClass::Behavioural
        } else {
            AttrClass::Custom
        }
    }

    /// True for attributes whose values are locations and therefore subject to
    /// the privacy module.
    pub fn is_location(&self) -> bool {
        matches!(self.0.as_str(), "FixedLocation" | "MobileLocation" | LOCATION)
    }

    pub fn id() -> Self {
        Self("ID".into())
    }
}

impl TryFrom<String> for AttrName {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<AttrName> for String {
    fn from(n: AttrName) -> String {
        n.0
    }
}

impl FromStr for AttrName {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for AttrName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A location expressed as a path through a geographic containment hierarchy,
/// coarsest region first, plus coordinates inside the finest region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticLocation {
    pub path: Vec<String>,
    pub coords: GeoPoint,
}

impl SemanticLocation {
    pub fn new<S: Into<String>>(path: impl IntoIterator<Item = S>, coords: GeoPoint) -> Self {
        Self {
            path: path.into_iter().map(Into::into).collect(),
            coords,
        }
    }

    pub fn is_prefix_of(&self, other: &SemanticLocation) -> bool {
        self.path.len() <= other.path.len() && other.path[..self.path.len()] == self.path[..]
    }
}

/// Attribute value carried in descriptors, readings and protocol bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Text(String),
    Number(f64),
    Bool(bool),
    Location(SemanticLocation),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_location(&self) -> Option<&SemanticLocation> {
        match self {
            Value::Location(l) => Some(l),
            _ => None,
        }
    }

    /// Numbers must be finite and locations well formed; anything else is
    /// representable on the wire.
    pub fn is_well_formed(&self) -> bool {
        match self {
            Value::Number(n) => n.is_finite(),
            Value::Location(l) => !l.path.is_empty() && l.coords.is_valid(),
            Value::Text(_) | Value::Bool(_) => true,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Text(_) => "text",
            Value::Number(_) => "number",
            Value::Bool(_) => "bool",
            Value::Location(_) => "location",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Number(n) => write!(f, "{n}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Location(l) => f.write_str(&l.path.join("/")),
        }
    }
}

/// A management attribute of a thing (Table-1 style descriptor entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: AttrName,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl Attribute {
    pub fn new(name: &str, value: Value) -> Result<Self, ModelError> {
        Ok(Self {
            name: AttrName::new(name)?,
            value,
            unit: None,
        })
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }
}

/// A timestamped behavioural reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub name: AttrName,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// Milliseconds since the epoch, assigned by the agent at reading time.
    pub ts: u64,
}

fn malformed(name: &AttrName, reason: impl Into<String>) -> ModelError {
    ModelError::MalformedValue {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn expect_type(name: &AttrName, value: &Value, want: &'static str) -> Result<(), ModelError> {
    if value.type_name() == want {
        Ok(())
    } else {
        Err(malformed(
            name,
            format!("expected {want}, got {}", value.type_name()),
        ))
    }
}

/// Type-checks a management attribute value.
pub fn check_management_value(name: &AttrName, value: &Value) -> Result<(), ModelError> {
    if !value.is_well_formed() {
        return Err(malformed(name, "non-finite number or empty location"));
    }
    match name.as_str() {
        "ID" => {
            let id = value
                .as_text()
                .ok_or_else(|| malformed(name, "expected text"))?;
            Mtid::new(id).map_err(|e| malformed(name, e.to_string()))?;
            Ok(())
        }
        "Name" | "SerialNumber" | "FirmwareVersion" | "NetworkAddress" | "Type" | "Admin" => {
            expect_type(name, value, "text")
        }
        "BatteryLife" => {
            let pct = value
                .as_number()
                .ok_or_else(|| malformed(name, "expected number"))?;
            if (0.0..=100.0).contains(&pct) {
                Ok(())
            } else {
                Err(malformed(name, "battery percentage outside 0..=100"))
            }
        }
        "FixedLocation" => expect_type(name, value, "location"),
        _ => match name.class() {
            AttrClass::Behavioural | AttrClass::Location => {
                Err(malformed(name, "not a management attribute"))
            }
            _ => Ok(()),
        },
    }
}

/// Type-checks a behavioural reading value.
pub fn check_behavioural_value(name: &AttrName, value: &Value) -> Result<(), ModelError> {
    if !value.is_well_formed() {
        return Err(malformed(name, "non-finite number or empty location"));
    }
    match name.as_str() {
        "Temperature" | "Sound" | "Pressure" => expect_type(name, value, "number"),
        "Motion" | "WaterDetection" | "FireDetection" => expect_type(name, value, "bool"),
        "MobileLocation" => expect_type(name, value, "location"),
        _ => match name.class() {
            AttrClass::Management | AttrClass::Location => {
                Err(malformed(name, "not a behavioural attribute"))
            }
            _ => Ok(()),
        },
    }
}

/// Management descriptor that passed [`validate_descriptor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedDescriptor {
    mtid: Mtid,
    attrs: BTreeMap<AttrName, Attribute>,
}

impl ValidatedDescriptor {
    pub fn mtid(&self) -> &Mtid {
        &self.mtid
    }

    pub fn get(&self, name: &str) -> Option<&Attribute> {
        self.attrs.values().find(|a| a.name.as_str() == name)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &Attribute> {
        self.attrs.values()
    }

    pub fn fixed_location(&self) -> Option<&SemanticLocation> {
        self.get("FixedLocation").and_then(|a| a.value.as_location())
    }

    pub fn into_attributes(self) -> Vec<Attribute> {
        self.attrs.into_values().collect()
    }
}

/// Accepts a descriptor iff it carries an ID, attribute names are unique and
/// every value is well typed. The result does not depend on attribute order.
pub fn validate_descriptor(attrs: Vec<Attribute>) -> Result<ValidatedDescriptor, ModelError> {
    let mut map = BTreeMap::new();
    for attr in attrs {
        if map.contains_key(&attr.name) {
            return Err(ModelError::DuplicateAttributeName(attr.name.to_string()));
        }
        map.insert(attr.name.clone(), attr);
    }
    let id = map.get(&AttrName::id()).ok_or(ModelError::MissingId)?;
    for attr in map.values() {
        check_management_value(&attr.name, &attr.value)?;
    }
    let mtid = Mtid::new(id.value.as_text().unwrap_or_default())
        .map_err(|e| malformed(&AttrName::id(), e.to_string()))?;
    Ok(ValidatedDescriptor { mtid, attrs: map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn attr(name: &str, value: Value) -> Attribute {
        Attribute::new(name, value).unwrap()
    }

    fn loc() -> SemanticLocation {
        SemanticLocation::new(["AU", "NSW"], GeoPoint::new(-33.0, 151.0))
    }

    #[test]
    fn id_and_location_is_enough() {
        let d = validate_descriptor(vec![
            attr("ID", Value::text("s1")),
            attr("FixedLocation", Value::Location(loc())),
        ])
        .unwrap();
        assert_eq!(d.mtid().as_str(), "s1");
        assert_eq!(d.fixed_location(), Some(&loc()));
    }

    #[test]
    fn empty_descriptor_is_missing_id() {
        assert_eq!(validate_descriptor(vec![]), Err(ModelError::MissingId));
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = validate_descriptor(vec![
            attr("ID", Value::text("s1")),
            attr("Name", Value::text("a")),
            attr("Name", Value::text("b")),
        ])
        .unwrap_err();
        assert_eq!(err, ModelError::DuplicateAttributeName("Name".into()));
    }

    #[test]
    fn malformed_values() {
        let bad = [
            attr("BatteryLife", Value::Number(120.0)),
            attr("BatteryLife", Value::text("full")),
            attr("FixedLocation", Value::text("Sydney")),
            attr("Temperature", Value::Number(1.0)),
            attr("Gauge", Value::Number(f64::NAN)),
        ];
        for a in bad {
            let res = validate_descriptor(vec![attr("ID", Value::text("s1")), a.clone()]);
            assert!(
                matches!(res, Err(ModelError::MalformedValue { .. })),
                "{a:?} -> {res:?}"
            );
        }
        let res = validate_descriptor(vec![attr("ID", Value::text("bad id!"))]);
        assert!(matches!(res, Err(ModelError::MalformedValue { .. })));
    }

    #[test]
    fn identifier_rules() {
        assert!(Mtid::new("sensor_01-a").is_ok());
        assert!(Mtid::new("").is_err());
        assert!(Mtid::new("a".repeat(65)).is_err());
        assert!(Mtid::new("a".repeat(64)).is_ok());
        assert!(AgentId::new("x.y").is_err());
        let parsed: Result<Mtid, _> = serde_json::from_str("\"no spaces\"");
        assert!(parsed.is_err());
    }

    #[test]
    fn operator_names_cannot_shadow_builtins() {
        assert!(AttrName::new("Temperature").is_ok());
        assert!(AttrName::new("temperature").is_err());
        assert!(AttrName::new("BATTERYLIFE").is_err());
        assert!(AttrName::new("location").is_err());
        assert!(AttrName::new("Valve").is_ok());
        assert_eq!(AttrName::new("Valve").unwrap().class(), AttrClass::Custom);
        assert_eq!(
            AttrName::new("MobileLocation").unwrap().class(),
            AttrClass::Behavioural
        );
    }

    #[test]
    fn behavioural_types() {
        let t = AttrName::new("Temperature").unwrap();
        assert!(check_behavioural_value(&t, &Value::Number(21.5)).is_ok());
        assert!(check_behavioural_value(&t, &Value::Bool(true)).is_err());
        let m = AttrName::new("Motion").unwrap();
        assert!(check_behavioural_value(&m, &Value::Bool(true)).is_ok());
        let b = AttrName::new("BatteryLife").unwrap();
        assert!(check_behavioural_value(&b, &Value::Number(1.0)).is_err());
    }

    #[test]
    fn path_prefixes() {
        let full = SemanticLocation::new(["A", "B", "C"], GeoPoint::new(0.0, 0.0));
        for n in 1..=3 {
            let p = SemanticLocation::new(full.path[..n].to_vec(), GeoPoint::new(1.0, 1.0));
            assert!(p.is_prefix_of(&full));
        }
        let other = SemanticLocation::new(["A", "X"], GeoPoint::new(0.0, 0.0));
        assert!(!other.is_prefix_of(&full));
    }

    fn arb_attr() -> impl Strategy<Value = Attribute> {
        let names = prop::sample::select(vec![
            "ID", "Name", "Type", "Admin", "BatteryLife", "Colour", "Temperature",
        ]);
        let values = prop_oneof![
            "[a-z0-9]{1,6}".prop_map(Value::Text),
            (0.0f64..150.0).prop_map(Value::Number),
            any::<bool>().prop_map(Value::Bool),
        ];
        (names, values).prop_map(|(n, v)| Attribute::new(n, v).unwrap())
    }

    proptest! {
        #[test]
        fn validation_is_permutation_invariant(
            attrs in prop::collection::vec(arb_attr(), 0..6),
            seed in any::<u64>(),
        ) {
            let mut shuffled = attrs.clone();
            // deterministic Fisher-Yates driven by the seed
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let a = validate_descriptor(attrs).is_ok();
            let b = validate_descriptor(shuffled).is_ok();
            prop_assert_eq!(a, b);
        }
    }
}
