//! Agent admission and the per-thing security profile gate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, AppId, Mtid};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SecurityError {
    #[error("agent {0} is already known")]
    AlreadyKnown(AgentId),
    #[error("agent {0} is not pending approval")]
    NotPending(AgentId),
    #[error("agent {0} cannot be revoked from its current state")]
    NotRevocable(AgentId),
    #[error("{actor} does not own {mtid}")]
    NotOwner { actor: AppId, mtid: Mtid },
    #[error("unknown MT {0}")]
    UnknownMt(Mtid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionState {
    Unknown,
    Pending,
    Approved,
    Revoked,
}

/// Admission record for one agent. Transitions: Unknown→Pending→Approved,
/// Pending→Revoked, Approved→Revoked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAdmission {
    pub agentid: AgentId,
    pub mtid: Mtid,
    pub state: AdmissionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approved_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approved_at: Option<u64>,
}

impl AgentAdmission {
    /// Creates the pending entry for a newly seen agent.
    pub fn admit(existing: Option<&AgentAdmission>, agentid: AgentId, mtid: Mtid) -> Result<Self, SecurityError> {
        match existing {
            Some(a) if a.state != AdmissionState::Unknown => Err(SecurityError::AlreadyKnown(agentid)),
            _ => Ok(Self {
                agentid,
                mtid,
                state: AdmissionState::Pending,
                approved_by: None,
                approved_at: None,
            }),
        }
    }

    pub fn approve(&self, admin: &str, now: u64) -> Result<Self, SecurityError> {
        if self.state != AdmissionState::Pending {
            return Err(SecurityError::NotPending(self.agentid.clone()));
        }
        Ok(Self {
            state: AdmissionState::Approved,
            approved_by: Some(admin.to_string()),
            approved_at: Some(now),
            ..self.clone()
        })
    }

    pub fn revoke(&self) -> Result<Self, SecurityError> {
        match self.state {
            AdmissionState::Pending | AdmissionState::Approved => Ok(Self {
                state: AdmissionState::Revoked,
                ..self.clone()
            }),
            _ => Err(SecurityError::NotRevocable(self.agentid.clone())),
        }
    }

    pub fn is_approved(&self) -> bool {
        self.state == AdmissionState::Approved
    }
}

/// Owner-maintained disclosure requirements for one thing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityProfile {
    pub mtid: Mtid,
    pub authorized_entities: BTreeSet<AppId>,
    pub secure_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<String>,
}

impl SecurityProfile {
    pub fn new(mtid: Mtid, owner: Option<String>) -> Self {
        Self {
            mtid,
            authorized_entities: BTreeSet::new(),
            secure_only: false,
            owner,
        }
    }

    /// Identifier stored in the thing's record as its security pointer.
    pub fn reference(mtid: &Mtid) -> String {
        format!("sp-{mtid}")
    }

    /// Returns the edited profile; the original is untouched so callers can
    /// swap it in atomically.
    pub fn apply(&self, change: &ProfileChange) -> SecurityProfile {
        let mut next = self.clone();
        match change {
            ProfileChange::AddEntity(app) => {
                next.authorized_entities.insert(app.clone());
            }
            ProfileChange::RemoveEntity(app) => {
                next.authorized_entities.remove(app);
            }
            ProfileChange::SetSecureOnly(flag) => next.secure_only = *flag,
        }
        next
    }

    /// Owners and deployment admins may edit.
    pub fn authorize_edit(&self, actor: &AppId, admins: &BTreeSet<AppId>) -> Result<(), SecurityError> {
        if admins.contains(actor) || self.owner.as_deref() == Some(actor.as_str()) {
            Ok(())
        } else {
            Err(SecurityError::NotOwner {
                actor: actor.clone(),
                mtid: self.mtid.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileChange {
    AddEntity(AppId),
    RemoveEntity(AppId),
    SetSecureOnly(bool),
}

/// Decision point at which a policy check failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenialPoint {
    /// The profile requires a secure channel and the request used plaintext.
    InsecureChannel,
    /// The requester is not on the authorized-entity list.
    RequesterNotApproved,
}

impl DenialPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            DenialPoint::InsecureChannel => "insecure_channel",
            DenialPoint::RequesterNotApproved => "requester_not_approved",
        }
    }
}

/// The channel decision is taken before the requester decision.
pub fn check_policy_detailed(
    profile: &SecurityProfile,
    requester: &AppId,
    channel_secure: bool,
) -> Result<(), DenialPoint> {
    if profile.secure_only && !channel_secure {
        return Err(DenialPoint::InsecureChannel);
    }
    if !profile.authorized_entities.contains(requester) {
        return Err(DenialPoint::RequesterNotApproved);
    }
    Ok(())
}

/// True only clears the security gate; the privacy module still decides
/// whether location data is disclosed.
pub fn check_policy(profile: &SecurityProfile, requester: &AppId, channel_secure: bool) -> bool {
    check_policy_detailed(profile, requester, channel_secure).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mt() -> Mtid {
        Mtid::new("s1").unwrap()
    }

    fn app(s: &str) -> AppId {
        AppId::new(s).unwrap()
    }

    fn profile(in_list: bool, secure_only: bool) -> SecurityProfile {
        let mut p = SecurityProfile::new(mt(), Some("owner".into()));
        if in_list {
            p.authorized_entities.insert(app("appA"));
        }
        p.secure_only = secure_only;
        p
    }

    #[test]
    fn truth_table() {
        let mut true_cells = Vec::new();
        for in_list in [false, true] {
            for secure_only in [false, true] {
                for secure in [false, true] {
                    if check_policy(&profile(in_list, secure_only), &app("appA"), secure) {
                        true_cells.push((in_list, secure_only, secure));
                    }
                }
            }
        }
        assert_eq!(
            true_cells,
            vec![(true, false, false), (true, false, true), (true, true, true)]
        );
    }

    #[test]
    fn channel_checked_first() {
        assert_eq!(
            check_policy_detailed(&profile(false, true), &app("appA"), false),
            Err(DenialPoint::InsecureChannel)
        );
        assert_eq!(
            check_policy_detailed(&profile(false, false), &app("appA"), false),
            Err(DenialPoint::RequesterNotApproved)
        );
    }

    #[test]
    fn edits() {
        let p = profile(false, false);
        let added = p.apply(&ProfileChange::AddEntity(app("appA")));
        assert!(check_policy(&added, &app("appA"), true));
        let removed = added.apply(&ProfileChange::RemoveEntity(app("appA")));
        assert!(!check_policy(&removed, &app("appA"), true));
        let admins = BTreeSet::from([app("root")]);
        assert!(p.authorize_edit(&app("owner"), &admins).is_ok());
        assert!(p.authorize_edit(&app("root"), &admins).is_ok());
        assert!(matches!(
            p.authorize_edit(&app("mallory"), &admins),
            Err(SecurityError::NotOwner { .. })
        ));
    }

    #[test]
    fn admission_transitions() {
        let agent = AgentId::new("a1").unwrap();
        let pending = AgentAdmission::admit(None, agent.clone(), mt()).unwrap();
        assert_eq!(pending.state, AdmissionState::Pending);
        assert!(matches!(
            AgentAdmission::admit(Some(&pending), agent.clone(), mt()),
            Err(SecurityError::AlreadyKnown(_))
        ));
        let approved = pending.approve("admin", 5).unwrap();
        assert!(approved.is_approved());
        assert_eq!(approved.approved_at, Some(5));
        assert!(matches!(approved.approve("admin", 6), Err(SecurityError::NotPending(_))));
        let revoked = approved.revoke().unwrap();
        assert!(!revoked.is_approved());
        assert!(revoked.approve("admin", 7).is_err());
        assert!(revoked.revoke().is_err());
        assert_eq!(pending.revoke().unwrap().state, AdmissionState::Revoked);
    }

    fn arb_profile() -> impl Strategy<Value = SecurityProfile> {
        (prop::collection::btree_set("[a-d]", 0..4), any::<bool>()).prop_map(|(apps, secure_only)| {
            let mut p = SecurityProfile::new(mt(), None);
            p.authorized_entities = apps.into_iter().map(|a| app(&a)).collect();
            p.secure_only = secure_only;
            p
        })
    }

    proptest! {
        #[test]
        fn adding_an_entity_never_revokes(p in arb_profile(), new in "[a-d]", req in "[a-e]", secure in any::<bool>()) {
            let before = check_policy(&p, &app(&req), secure);
            let after = check_policy(&p.apply(&ProfileChange::AddEntity(app(&new))), &app(&req), secure);
            prop_assert!(!before || after);
        }

        #[test]
        fn secure_only_never_grants(p in arb_profile(), req in "[a-e]", secure in any::<bool>()) {
            let before = check_policy(&p, &app(&req), secure);
            let after = check_policy(&p.apply(&ProfileChange::SetSecureOnly(true)), &app(&req), secure);
            prop_assert!(before || !after);
        }

        #[test]
        fn check_is_pure(p in arb_profile(), req in "[a-e]", secure in any::<bool>()) {
            prop_assert_eq!(check_policy(&p, &app(&req), secure), check_policy(&p.clone(), &app(&req), secure));
        }
    }
}
