//! Domain types shared by every other module, and the two lifecycle state
//! machines (sections and pilots).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactId;
use crate::time::SimTime;

/// Default number of infrastructure retries granted to a section.
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PilotId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub String);

impl SiteId {
    pub fn new(s: impl Into<String>) -> Self {
        SiteId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PilotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A section is addressed as `<job>.<index>`, e.g. `1.3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SectionId {
    pub job: JobId,
    pub index: u32,
}

impl SectionId {
    pub fn new(job: JobId, index: u32) -> Self {
        SectionId { job, index }
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.job.0, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed section id {0:?}, expected <job>.<index>")]
pub struct BadSectionId(pub String);

impl FromStr for SectionId {
    type Err = BadSectionId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadSectionId(s.into());
        let (job, index) = s.split_once('.').ok_or_else(bad)?;
        Ok(SectionId {
            job: JobId(job.parse().map_err(|_| bad())?),
            index: index.parse().map_err(|_| bad())?,
        })
    }
}

/// Attribute value in a slot ad or a requirements expression.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Str(String),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Int(_) => ValueKind::Int,
            Value::Str(_) => ValueKind::Str,
            Value::Bool(_) => ValueKind::Bool,
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.into())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueKind {
    Int,
    Str,
    Bool,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Int => "integer",
            ValueKind::Str => "string",
            ValueKind::Bool => "boolean",
        })
    }
}

pub type Attributes = BTreeMap<String, Value>;

/// Attributes every slot ad must carry.
pub const REQUIRED_AD_ATTRIBUTES: [&str; 4] = ["Site", "Memory", "Arch", "GridFlavor"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecBackend {
    Simulated,
    Local,
}

/// What a SIMULATED section does: how long it runs, how much it logs and
/// writes, and how it exits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimProfile {
    pub duration_s: u64,
    pub log_lines: u32,
    pub output_bytes: u64,
    pub exit_code: i32,
}

impl Default for SimProfile {
    fn default() -> Self {
        SimProfile { duration_s: 60, log_lines: 10, output_bytes: 1024, exit_code: 0 }
    }
}

/// A user submission. Sections are homogeneous: every section runs the same
/// command, told apart only by the `CAF_SECTION` environment variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub user: String,
    pub vo: String,
    pub n_sections: u32,
    pub command: String,
    #[serde(default, rename = "input_manifest", skip_serializing_if = "Option::is_none")]
    pub input_manifest_id: Option<ArtifactId>,
    #[serde(default, rename = "user_tarball", skip_serializing_if = "Option::is_none")]
    pub user_tarball_id: Option<ArtifactId>,
    #[serde(rename = "requirements")]
    pub requirements_expr: String,
    pub output_destination: String,
    pub exec_backend: ExecBackend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_profile: Option<SimProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("a job needs at least one section")]
    NoSections,
    #[error("LOCAL jobs need an input manifest or a user tarball")]
    NoSoftware,
    #[error("user must not be empty")]
    NoUser,
}

impl JobSpec {
    /// Structural checks. Requirements are parsed separately by the portal
    /// so the parse error can be reported with its position.
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.n_sections < 1 {
            return Err(SpecError::NoSections);
        }
        if self.user.is_empty() {
            return Err(SpecError::NoUser);
        }
        let has_software = self.input_manifest_id.is_some() || self.user_tarball_id.is_some();
        if !has_software && self.exec_backend == ExecBackend::Local {
            return Err(SpecError::NoSoftware);
        }
        Ok(())
    }

    pub fn profile(&self) -> SimProfile {
        self.sim_profile.unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SectionState {
    Waiting,
    Matched,
    Transferring,
    Running,
    StagingOut,
    Completed,
    FailedUser,
    FailedInfra,
    Killed,
}

impl SectionState {
    pub const ALL: [SectionState; 9] = [
        SectionState::Waiting,
        SectionState::Matched,
        SectionState::Transferring,
        SectionState::Running,
        SectionState::StagingOut,
        SectionState::Completed,
        SectionState::FailedUser,
        SectionState::FailedInfra,
        SectionState::Killed,
    ];

    /// FAILED_INFRA counts as terminal; only a granted retry leaves it.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SectionState::Completed
                | SectionState::FailedUser
                | SectionState::FailedInfra
                | SectionState::Killed
        )
    }

    /// States in which the section occupies an execution slot.
    pub fn is_on_worker(self) -> bool {
        matches!(
            self,
            SectionState::Transferring | SectionState::Running | SectionState::StagingOut
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SectionState::Waiting => "WAITING",
            SectionState::Matched => "MATCHED",
            SectionState::Transferring => "TRANSFERRING",
            SectionState::Running => "RUNNING",
            SectionState::StagingOut => "STAGING_OUT",
            SectionState::Completed => "COMPLETED",
            SectionState::FailedUser => "FAILED_USER",
            SectionState::FailedInfra => "FAILED_INFRA",
            SectionState::Killed => "KILLED",
        }
    }
}

impl fmt::Display for SectionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SectionEvent {
    SlotMatched,
    /// The matched slot accepted the claim and stage-in began.
    TransferStarted,
    StageInDone,
    /// Execution began without a separate stage-in step (lazily mounted
    /// namespaces fetch during execution).
    ExecStarted,
    ExecExited(i32),
    /// Output is back at the portal; carries the exit code that decides
    /// between COMPLETED and FAILED_USER.
    StageOutDone(i32),
    /// The execution slot went away: pilot preempted, worker crashed or
    /// stage-in failed.
    PilotLost,
    KillRequested,
    RetryGranted,
}

impl SectionEvent {
    /// One representative of every event kind, with exit codes covering the
    /// zero and non-zero cases.
    pub const SAMPLES: [SectionEvent; 12] = [
        SectionEvent::SlotMatched,
        SectionEvent::TransferStarted,
        SectionEvent::StageInDone,
        SectionEvent::ExecStarted,
        SectionEvent::ExecExited(0),
        SectionEvent::ExecExited(3),
        SectionEvent::StageOutDone(0),
        SectionEvent::StageOutDone(1),
        SectionEvent::StageOutDone(-9),
        SectionEvent::PilotLost,
        SectionEvent::KillRequested,
        SectionEvent::RetryGranted,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal section transition: {state} on {event:?}")]
pub struct IllegalSectionTransition {
    pub state: SectionState,
    pub event: SectionEvent,
}

/// The section lifecycle table.
///
/// ```text
/// WAITING      --SlotMatched-->        MATCHED
/// MATCHED      --TransferStarted-->    TRANSFERRING
/// TRANSFERRING --StageInDone|ExecStarted--> RUNNING
/// RUNNING      --ExecExited(_)-->      STAGING_OUT
/// STAGING_OUT  --StageOutDone(0)-->    COMPLETED
/// STAGING_OUT  --StageOutDone(!0)-->   FAILED_USER
/// MATCHED..STAGING_OUT --PilotLost-->  FAILED_INFRA
/// WAITING..STAGING_OUT --KillRequested--> KILLED
/// FAILED_INFRA --RetryGranted-->       WAITING
/// ```
pub fn section_next_state(
    state: SectionState,
    event: SectionEvent,
) -> Result<SectionState, IllegalSectionTransition> {
    use SectionEvent as E;
    use SectionState as S;
    let next = match (state, event) {
        (S::Waiting, E::SlotMatched) => S::Matched,
        (S::Matched, E::TransferStarted) => S::Transferring,
        (S::Transferring, E::StageInDone | E::ExecStarted) => S::Running,
        (S::Running, E::ExecExited(_)) => S::StagingOut,
        (S::StagingOut, E::StageOutDone(0)) => S::Completed,
        (S::StagingOut, E::StageOutDone(_)) => S::FailedUser,
        (S::Matched | S::Transferring | S::Running | S::StagingOut, E::PilotLost) => S::FailedInfra,
        (
            S::Waiting | S::Matched | S::Transferring | S::Running | S::StagingOut,
            E::KillRequested,
        ) => S::Killed,
        (S::FailedInfra, E::RetryGranted) => S::Waiting,
        _ => return Err(IllegalSectionTransition { state, event }),
    };
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PilotState {
    Requested,
    QueuedAtSite,
    Booting,
    Advertising,
    Claimed,
    Retiring,
    Terminated,
    Preempted,
    Failed,
}

impl PilotState {
    pub const ALL: [PilotState; 9] = [
        PilotState::Requested,
        PilotState::QueuedAtSite,
        PilotState::Booting,
        PilotState::Advertising,
        PilotState::Claimed,
        PilotState::Retiring,
        PilotState::Terminated,
        PilotState::Preempted,
        PilotState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, PilotState::Terminated | PilotState::Preempted | PilotState::Failed)
    }

    /// States the glidekeeper counts as live supply.
    pub fn is_live(self) -> bool {
        matches!(
            self,
            PilotState::Requested
                | PilotState::QueuedAtSite
                | PilotState::Booting
                | PilotState::Advertising
                | PilotState::Claimed
        )
    }

    /// States in which the pilot holds a worker.
    pub fn holds_worker(self) -> bool {
        matches!(
            self,
            PilotState::Booting | PilotState::Advertising | PilotState::Claimed | PilotState::Retiring
        )
    }

    pub fn has_ad(self) -> bool {
        matches!(self, PilotState::Advertising | PilotState::Claimed | PilotState::Retiring)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PilotState::Requested => "REQUESTED",
            PilotState::QueuedAtSite => "QUEUED_AT_SITE",
            PilotState::Booting => "BOOTING",
            PilotState::Advertising => "ADVERTISING",
            PilotState::Claimed => "CLAIMED",
            PilotState::Retiring => "RETIRING",
            PilotState::Terminated => "TERMINATED",
            PilotState::Preempted => "PREEMPTED",
            PilotState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for PilotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotEvent {
    /// The gatekeeper queued the pilot; from QUEUED_AT_SITE, the site's
    /// batch system started it on a worker.
    SiteAccepted,
    Booted,
    Claimed,
    /// The claim ended. For a RETIRING pilot this means the slot drained
    /// and the pilot exits.
    ClaimReleased,
    IdleTimeout,
    LifetimeExpired,
    /// Eviction by the resource owner, or loss of the worker node.
    Preempted,
    /// Dropped or rejected at submission, or failed to start.
    BootFailed,
}

impl PilotEvent {
    pub const ALL: [PilotEvent; 8] = [
        PilotEvent::SiteAccepted,
        PilotEvent::Booted,
        PilotEvent::Claimed,
        PilotEvent::ClaimReleased,
        PilotEvent::IdleTimeout,
        PilotEvent::LifetimeExpired,
        PilotEvent::Preempted,
        PilotEvent::BootFailed,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal pilot transition: {state} on {event:?}")]
pub struct IllegalPilotTransition {
    pub state: PilotState,
    pub event: PilotEvent,
}

/// The pilot lifecycle table. A claimed pilot returns to ADVERTISING when
/// its claim is released, so one pilot can run many sections.
pub fn pilot_next_state(
    state: PilotState,
    event: PilotEvent,
) -> Result<PilotState, IllegalPilotTransition> {
    use PilotEvent as E;
    use PilotState as S;
    let next = match (state, event) {
        (S::Requested, E::SiteAccepted) => S::QueuedAtSite,
        (S::QueuedAtSite, E::SiteAccepted) => S::Booting,
        (S::Booting, E::Booted) => S::Advertising,
        (S::Advertising, E::Claimed) => S::Claimed,
        (S::Claimed, E::ClaimReleased) => S::Advertising,
        (S::Advertising, E::IdleTimeout | E::LifetimeExpired) => S::Retiring,
        (S::Claimed, E::LifetimeExpired) => S::Retiring,
        (S::Retiring, E::ClaimReleased | E::IdleTimeout | E::LifetimeExpired) => S::Terminated,
        (S::Requested | S::QueuedAtSite | S::Booting, E::LifetimeExpired) => S::Terminated,
        (S::Requested | S::QueuedAtSite | S::Booting, E::BootFailed) => S::Failed,
        (
            S::QueuedAtSite | S::Booting | S::Advertising | S::Claimed | S::Retiring,
            E::Preempted,
        ) => S::Preempted,
        _ => return Err(IllegalPilotTransition { state, event }),
    };
    Ok(next)
}

/// Where a matched section is placed: on a pilot's slot (DIRECT sites) or
/// directly on a site worker chosen by the broker (BROKERED sites).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Pilot(PilotId),
    Site(SiteId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub id: SectionId,
    pub state: SectionState,
    pub attempts: u32,
    pub placement: Option<Placement>,
    /// Site of the current or last placement.
    pub site: Option<SiteId>,
    pub cpu_seconds: f64,
    pub submit_time: SimTime,
    pub start_time: Option<SimTime>,
    pub end_time: Option<SimTime>,
    pub exit_code: Option<i32>,
    pub kill_requested_at: Option<SimTime>,
}

impl Section {
    pub fn new(id: SectionId, submit_time: SimTime) -> Self {
        Section {
            id,
            state: SectionState::Waiting,
            attempts: 0,
            placement: None,
            site: None,
            cpu_seconds: 0.0,
            submit_time,
            start_time: None,
            end_time: None,
            exit_code: None,
            kill_requested_at: None,
        }
    }

    /// The pilot whose slot this section occupies; only set while the
    /// section is on a worker.
    pub fn claimed_pilot(&self) -> Option<PilotId> {
        match (&self.placement, self.state.is_on_worker()) {
            (Some(Placement::Pilot(p)), true) => Some(*p),
            _ => None,
        }
    }

    /// The pilot offered to this section, from MATCHED onwards.
    pub fn pilot(&self) -> Option<PilotId> {
        match self.placement {
            Some(Placement::Pilot(p)) => Some(p),
            _ => None,
        }
    }

    pub fn apply(&mut self, event: SectionEvent) -> Result<SectionState, IllegalSectionTransition> {
        let next = section_next_state(self.state, event)?;
        self.state = next;
        Ok(next)
    }
}

/// Split a job into `n_sections` WAITING sections indexed from zero.
pub fn split_job(
    job: JobId,
    spec: &JobSpec,
    submit_time: SimTime,
) -> Result<Vec<Section>, SpecError> {
    if spec.n_sections < 1 {
        return Err(SpecError::NoSections);
    }
    Ok((0..spec.n_sections)
        .map(|i| Section::new(SectionId::new(job, i), submit_time))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAd {
    pub pilot_id: PilotId,
    pub attributes: Attributes,
    pub advertised_at: SimTime,
}

impl SlotAd {
    pub fn missing_required(&self) -> Option<&'static str> {
        REQUIRED_AD_ATTRIBUTES
            .into_iter()
            .find(|k| !self.attributes.contains_key(*k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pilot {
    pub pilot_id: PilotId,
    pub site_id: SiteId,
    pub state: PilotState,
    pub slot_ad: Option<SlotAd>,
    pub submitted_time: SimTime,
    pub boot_time: Option<SimTime>,
    pub last_claim_end: Option<SimTime>,
    /// Subject of the delegated proxy the pilot was submitted with.
    pub proxy_subject: String,
}

impl Pilot {
    pub fn apply(&mut self, event: PilotEvent) -> Result<PilotState, IllegalPilotTransition> {
        let next = pilot_next_state(self.state, event)?;
        self.state = next;
        if !next.has_ad() {
            self.slot_ad = None;
        }
        Ok(next)
    }

    /// Start of the current idle period, if the pilot is idle.
    pub fn idle_since(&self) -> Option<SimTime> {
        if self.state != PilotState::Advertising {
            return None;
        }
        match (self.boot_time, self.last_claim_end) {
            (Some(b), Some(c)) => Some(b.max(c)),
            (b, c) => b.or(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::{BTreeSet, VecDeque};

    fn spec(n: u32) -> JobSpec {
        JobSpec {
            user: "alice@CDF".into(),
            vo: "cdf".into(),
            n_sections: n,
            command: "true".into(),
            input_manifest_id: None,
            user_tarball_id: None,
            requirements_expr: "true".into(),
            output_destination: "file:///tmp/out".into(),
            exec_backend: ExecBackend::Simulated,
            sim_profile: None,
        }
    }

    #[test]
    fn section_examples() {
        assert_eq!(
            section_next_state(SectionState::Waiting, SectionEvent::SlotMatched),
            Ok(SectionState::Matched)
        );
        assert_eq!(
            section_next_state(SectionState::Running, SectionEvent::PilotLost),
            Ok(SectionState::FailedInfra)
        );
        assert!(section_next_state(SectionState::Completed, SectionEvent::KillRequested).is_err());
    }

    #[test]
    fn pilot_examples() {
        assert_eq!(pilot_next_state(PilotState::Booting, PilotEvent::Booted), Ok(PilotState::Advertising));
        assert_eq!(
            pilot_next_state(PilotState::Claimed, PilotEvent::ClaimReleased),
            Ok(PilotState::Advertising)
        );
        assert_eq!(
            pilot_next_state(PilotState::Advertising, PilotEvent::IdleTimeout),
            Ok(PilotState::Retiring)
        );
    }

    #[test]
    fn every_section_state_reachable_from_waiting() {
        let mut seen = BTreeSet::from([SectionState::Waiting]);
        let mut queue = VecDeque::from([SectionState::Waiting]);
        while let Some(s) = queue.pop_front() {
            for e in SectionEvent::SAMPLES {
                if let Ok(n) = section_next_state(s, e) {
                    if seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        assert_eq!(seen.len(), SectionState::ALL.len());
    }

    #[test]
    fn every_pilot_state_reachable_from_requested() {
        let mut seen = BTreeSet::from([PilotState::Requested]);
        let mut queue = VecDeque::from([PilotState::Requested]);
        while let Some(s) = queue.pop_front() {
            for e in PilotEvent::ALL {
                if let Ok(n) = pilot_next_state(s, e) {
                    if seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        assert_eq!(seen.len(), PilotState::ALL.len());
    }

    #[test]
    fn pilot_terminal_states_have_no_exit() {
        for s in PilotState::ALL.into_iter().filter(|s| s.is_terminal()) {
            for e in PilotEvent::ALL {
                assert!(pilot_next_state(s, e).is_err(), "{s} escaped on {e:?}");
            }
        }
    }

    #[test]
    fn split_examples() {
        let secs = split_job(JobId(1), &spec(3), SimTime::ZERO).unwrap();
        assert_eq!(secs.iter().map(|s| s.id.index).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(secs.iter().all(|s| s.state == SectionState::Waiting && s.attempts == 0));
        assert_eq!(split_job(JobId(1), &spec(1), SimTime::ZERO).unwrap().len(), 1);
        assert_eq!(split_job(JobId(1), &spec(0), SimTime::ZERO), Err(SpecError::NoSections));
    }

    #[test]
    fn local_job_needs_software() {
        let mut s = spec(1);
        s.exec_backend = ExecBackend::Local;
        assert_eq!(s.validate(), Err(SpecError::NoSoftware));
        s.user_tarball_id = Some(ArtifactId::of(b"tarball"));
        assert_eq!(s.validate(), Ok(()));
    }

    #[test]
    fn claimed_pilot_only_on_worker() {
        let mut s = Section::new(SectionId::new(JobId(1), 0), SimTime::ZERO);
        s.apply(SectionEvent::SlotMatched).unwrap();
        s.placement = Some(Placement::Pilot(PilotId(7)));
        assert_eq!(s.claimed_pilot(), None);
        s.apply(SectionEvent::TransferStarted).unwrap();
        assert_eq!(s.claimed_pilot(), Some(PilotId(7)));
        s.apply(SectionEvent::KillRequested).unwrap();
        assert_eq!(s.claimed_pilot(), None);
    }

    #[test]
    fn section_id_parses() {
        assert_eq!("4.2".parse::<SectionId>(), Ok(SectionId::new(JobId(4), 2)));
        assert!("4".parse::<SectionId>().is_err());
    }

    #[test]
    fn jobspec_json_uses_wire_names() {
        let json = serde_json::to_string(&spec(2)).unwrap();
        assert!(json.contains("\"requirements\":\"true\""));
        assert!(json.contains("\"exec_backend\":\"SIMULATED\""));
        let back: JobSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec(2));
    }
}
