//! Location privacy: disclosure policies, context matching and semantic
//! obfuscation by hierarchy-path truncation.
//!
//! A policy says, for one thing, who may see its location, when, and while the
//! thing is inside which zone. The matched policy either denies or discloses
//! the location with `level` steps of granularity removed from the finest end
//! of its path. Requests that match no policy are denied.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoHierarchy;
use crate::model::{AppId, Mtid, SemanticLocation};

pub const MS_PER_MINUTE: u64 = 60_000;
pub const MS_PER_DAY: u64 = 86_400_000;
pub const MINUTES_PER_DAY: u16 = 1440;
pub const MINUTES_PER_WEEK: u32 = 7 * 1440;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrivacyError {
    #[error("obfuscation level {level} out of range for a path of length {len}")]
    LevelOutOfRange { level: u32, len: usize },
    #[error("location path {0:?} is not in the hierarchy")]
    PathNotInHierarchy(Vec<String>),
    #[error("invalid policy {id}: {reason}")]
    InvalidPolicy { id: u64, reason: String },
}

/// Who a policy applies to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RequesterScope {
    /// Any requester (`"*"` in policy files).
    Any,
    App(AppId),
}

impl RequesterScope {
    pub fn matches(&self, requester: &AppId) -> bool {
        match self {
            RequesterScope::Any => true,
            RequesterScope::App(a) => a == requester,
        }
    }

    /// Lower is more specific.
    fn rank(&self) -> u8 {
        match self {
            RequesterScope::App(_) => 0,
            RequesterScope::Any => 1,
        }
    }
}

impl fmt::Display for RequesterScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequesterScope::Any => f.write_str("*"),
            RequesterScope::App(a) => f.write_str(a.as_str()),
        }
    }
}

impl FromStr for RequesterScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "*" {
            Ok(RequesterScope::Any)
        } else {
            AppId::new(s).map(RequesterScope::App).map_err(|e| e.to_string())
        }
    }
}

impl Serialize for RequesterScope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RequesterScope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Minute of day in `HH:MM` form; `24:00` is allowed as an end bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DayMinute(pub u16);

impl Serialize for DayMinute {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&format_args!("{:02}:{:02}", self.0 / 60, self.0 % 60))
    }
}

impl<'de> Deserialize<'de> for DayMinute {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (h, m) = s
            .split_once(':')
            .ok_or_else(|| serde::de::Error::custom("expected HH:MM"))?;
        let h: u16 = h.parse().map_err(serde::de::Error::custom)?;
        let m: u16 = m.parse().map_err(serde::de::Error::custom)?;
        if m >= 60 || h * 60 + m > MINUTES_PER_DAY {
            return Err(serde::de::Error::custom("time of day out of range"));
        }
        Ok(DayMinute(h * 60 + m))
    }
}

/// Weekly recurring window `[start, end)` on the listed weekdays
/// (0 = Monday .. 6 = Sunday; empty = every day). Times are UTC.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    #[serde(default)]
    pub days: BTreeSet<u8>,
    pub start: DayMinute,
    pub end: DayMinute,
}

impl TimeWindow {
    pub fn new(days: impl IntoIterator<Item = u8>, start_min: u16, end_min: u16) -> Self {
        Self {
            days: days.into_iter().collect(),
            start: DayMinute(start_min),
            end: DayMinute(end_min),
        }
    }

    pub fn contains(&self, time_ms: u64) -> bool {
        let (day, minute) = weekday_minute(time_ms);
        (self.days.is_empty() || self.days.contains(&day))
            && self.start.0 <= minute
            && minute < self.end.0
    }

    /// Minutes per week covered by the window.
    pub fn width(&self) -> u32 {
        let days = if self.days.is_empty() { 7 } else { self.days.len() as u32 };
        days * u32::from(self.end.0.saturating_sub(self.start.0))
    }

    fn validate(&self) -> Result<(), String> {
        if self.start >= self.end || self.end.0 > MINUTES_PER_DAY {
            return Err("window start must precede end within one day".into());
        }
        if self.days.iter().any(|&d| d > 6) {
            return Err("weekday out of range".into());
        }
        Ok(())
    }
}

/// Weekday (0 = Monday) and minute of day for a UTC millisecond timestamp.
pub fn weekday_minute(time_ms: u64) -> (u8, u16) {
    // 1970-01-01 was a Thursday
    let day = ((time_ms / MS_PER_DAY + 3) % 7) as u8;
    let minute = ((time_ms % MS_PER_DAY) / MS_PER_MINUTE) as u16;
    (day, minute)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    Disclose,
    Deny,
}

/// Owner rule governing location disclosure for one thing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisclosurePolicy {
    pub id: u64,
    pub mtid: Mtid,
    pub requester: RequesterScope,
    /// Empty means the policy holds at all times.
    #[serde(default)]
    pub windows: Vec<TimeWindow>,
    /// Region path the thing must currently be inside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<Vec<String>>,
    pub action: PolicyAction,
    #[serde(default)]
    pub level: u32,
}

impl DisclosurePolicy {
    pub fn disclose(id: u64, mtid: Mtid, requester: RequesterScope, level: u32) -> Self {
        Self {
            id,
            mtid,
            requester,
            windows: Vec::new(),
            zone: None,
            action: PolicyAction::Disclose,
            level,
        }
    }

    pub fn deny(id: u64, mtid: Mtid, requester: RequesterScope) -> Self {
        Self {
            action: PolicyAction::Deny,
            level: 0,
            ..Self::disclose(id, mtid, requester, 0)
        }
    }

    pub fn with_windows(mut self, windows: Vec<TimeWindow>) -> Self {
        self.windows = windows;
        self
    }

    pub fn with_zone<S: Into<String>>(mut self, zone: impl IntoIterator<Item = S>) -> Self {
        self.zone = Some(zone.into_iter().map(Into::into).collect());
        self
    }

    /// Minutes per week during which the time predicate holds.
    pub fn window_width(&self) -> u32 {
        if self.windows.is_empty() {
            MINUTES_PER_WEEK
        } else {
            self.windows.iter().map(TimeWindow::width).sum::<u32>().min(MINUTES_PER_WEEK)
        }
    }

    pub fn in_window(&self, time_ms: u64) -> bool {
        self.windows.is_empty() || self.windows.iter().any(|w| w.contains(time_ms))
    }

    pub fn in_zone(&self, loc: &SemanticLocation) -> bool {
        match &self.zone {
            None => true,
            Some(zone) => zone.len() <= loc.path.len() && loc.path[..zone.len()] == zone[..],
        }
    }

    pub fn matches(&self, ctx: &RequestContext) -> bool {
        self.mtid == ctx.mtid
            && self.requester.matches(&ctx.requester)
            && self.in_window(ctx.time)
            && self.in_zone(&ctx.mt_location)
    }

    /// Sort key: exact requester before wildcard, narrower window before
    /// wider, then lowest id.
    pub fn specificity_key(&self) -> (u8, u32, u64) {
        (self.requester.rank(), self.window_width(), self.id)
    }

    pub fn decision(&self) -> Decision {
        match self.action {
            PolicyAction::Disclose => Decision::Disclose(self.level),
            PolicyAction::Deny => Decision::Deny,
        }
    }
}

/// Checks a policy set for one thing before it is installed.
pub fn validate_policies(
    mtid: &Mtid,
    policies: &[DisclosurePolicy],
    hierarchy: &GeoHierarchy,
) -> Result<(), PrivacyError> {
    let mut ids = BTreeSet::new();
    let mut triples = BTreeSet::new();
    for p in policies {
        let invalid = |reason: &str| PrivacyError::InvalidPolicy {
            id: p.id,
            reason: reason.to_string(),
        };
        if &p.mtid != mtid {
            return Err(invalid("policy names a different MTID"));
        }
        if !ids.insert(p.id) {
            return Err(invalid("duplicate policy id"));
        }
        if p.level as usize > hierarchy.depth() {
            return Err(invalid("level exceeds hierarchy depth"));
        }
        if p.action == PolicyAction::Deny && p.level != 0 {
            return Err(invalid("deny policies carry no level"));
        }
        for w in &p.windows {
            w.validate().map_err(|r| invalid(&r))?;
        }
        if let Some(zone) = &p.zone {
            if hierarchy.resolve(zone).is_none() {
                return Err(invalid("zone is not a region of the hierarchy"));
            }
        }
        let mut windows = p.windows.clone();
        windows.sort();
        if !triples.insert((p.requester.clone(), windows, p.zone.clone())) {
            return Err(invalid("another policy has the same requester and context"));
        }
    }
    Ok(())
}

/// Facts about one location request.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestContext {
    pub requester: AppId,
    pub mtid: Mtid,
    /// Manager clock, milliseconds since the epoch.
    pub time: u64,
    pub mt_location: SemanticLocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Disclose(u32),
    Deny,
}

/// The most specific policy whose scope and context predicates hold.
pub fn match_policy<'a>(
    ctx: &RequestContext,
    policies: &'a [DisclosurePolicy],
) -> Option<&'a DisclosurePolicy> {
    policies
        .iter()
        .filter(|p| p.matches(ctx))
        .min_by_key(|p| p.specificity_key())
}

/// Default-deny evaluation.
pub fn evaluate(ctx: &RequestContext, policies: &[DisclosurePolicy]) -> Decision {
    match_policy(ctx, policies).map_or(Decision::Deny, DisclosurePolicy::decision)
}

/// Generalises `loc` by removing `level` regions from the finest end of its
/// path and substituting the representative point of the remaining region.
pub fn obfuscate(
    loc: &SemanticLocation,
    level: u32,
    hierarchy: &GeoHierarchy,
) -> Result<SemanticLocation, PrivacyError> {
    if hierarchy.resolve(&loc.path).is_none() {
        return Err(PrivacyError::PathNotInHierarchy(loc.path.clone()));
    }
    let len = loc.path.len();
    let level_us = level as usize;
    if level_us >= len {
        return Err(PrivacyError::LevelOutOfRange { level, len });
    }
    if level == 0 {
        return Ok(loc.clone());
    }
    let path = &loc.path[..len - level_us];
    let idx = hierarchy
        .resolve(path)
        .expect("prefix of a valid path is valid");
    Ok(hierarchy.location_of(idx))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Disclosure {
    Location(SemanticLocation),
    Denied,
}

/// Evaluates the policies and, when disclosure is allowed, returns the
/// location at the permitted granularity.
pub fn disclose_location(
    ctx: &RequestContext,
    policies: &[DisclosurePolicy],
    hierarchy: &GeoHierarchy,
) -> Result<Disclosure, PrivacyError> {
    match evaluate(ctx, policies) {
        Decision::Deny => Ok(Disclosure::Denied),
        Decision::Disclose(level) => {
            obfuscate(&ctx.mt_location, level, hierarchy).map(Disclosure::Location)
        }
    }
}
