//! The head node: submission, matchmaking, pilot provisioning policy,
//! result collection, kill, output delivery and accounting.
//!
//! [`Portal`] is a single logical event processor. Every mutation takes the
//! current sim time and appends to the portal's [`Tracer`]; the grid fabric
//! (or a wall-clock driver) calls in as things happen on the sites.

pub mod accounting;
pub mod credentials;
pub mod delivery;
pub mod glidekeeper;
pub mod negotiator;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::artifact::{ArtifactId, ArtifactStore};
use crate::auth::{verify_encoded_token, AuthError, IdentityMap, ProxyLink, RealmKey};
use crate::fabric::SiteConfig;
use crate::matchlang::{eval_requirements, parse_requirements, Expr, ParseError};
use crate::model::{
    split_job, Attributes, IllegalPilotTransition, IllegalSectionTransition, JobId, JobSpec, Pilot, PilotEvent, PilotId,
    PilotState, Placement, Section, SectionEvent, SectionId, SectionState, SiteId, SlotAd, SpecError,
    DEFAULT_MAX_RETRIES,
};
use crate::monitoring::{Collector, FileInfo, Heartbeat, HeartbeatAck, KillDelivery, MonitorError, TailView};
use crate::time::SimTime;
use crate::trace::{TraceEvent, Tracer};

pub use accounting::{accounting_report, AccountingRecord, ReportRow};
pub use credentials::{GridCredentials, SiteProxy};
pub use delivery::{MemorySink, OutputSink, Receipt, Unreachable};
pub use glidekeeper::{GlidekeeperConfig, GlidekeeperPlan, PilotRequest, RetireReason};
pub use negotiator::{match_sections, MatchOutcome, QueuedSection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortalConfig {
    pub name: String,
    pub max_retries: u32,
    pub kill_deadline_s: u64,
    pub usage_half_life_s: u64,
    /// Lifetime of the proxies the portal delegates to each site.
    pub site_proxy_ttl_s: u64,
    pub glidekeeper: GlidekeeperConfig,
}

impl Default for PortalConfig {
    fn default() -> Self {
        PortalConfig {
            name: "caf".into(),
            max_retries: DEFAULT_MAX_RETRIES,
            kill_deadline_s: 120,
            usage_half_life_s: 3600,
            site_proxy_ttl_s: 12 * 3600,
            glidekeeper: GlidekeeperConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PortalError {
    #[error("authentication failed: {0}")]
    AuthFailed(AuthError),
    #[error("token principal {token} does not match spec user {spec}")]
    PrincipalMismatch { token: String, spec: String },
    #[error("invalid spec: {0}")]
    InvalidSpec(SpecError),
    #[error("requirements: {0}")]
    RequirementsParse(ParseError),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown section {0}")]
    UnknownSection(SectionId),
    #[error("unknown pilot {0}")]
    UnknownPilot(PilotId),
    #[error("{0} does not own job {1}")]
    NotOwner(String, JobId),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalSectionTransition),
    #[error(transparent)]
    IllegalPilotTransition(#[from] IllegalPilotTransition),
    #[error("job {0} has sections that are not finished")]
    JobNotFinished(JobId),
    #[error(transparent)]
    DestinationUnreachable(#[from] Unreachable),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

impl PortalError {
    /// True for errors caused by the caller's request rather than the portal.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, PortalError::DestinationUnreachable(_))
    }
}

#[derive(Clone, Debug)]
pub struct JobRecord {
    pub id: JobId,
    pub spec: JobSpec,
    pub requirements: Expr,
    pub sections: Vec<Section>,
    /// Grid subject the user's principal maps to.
    pub subject: String,
    pub submit_time: SimTime,
    pub summary_emitted: bool,
}

impl JobRecord {
    pub fn is_finished(&self) -> bool {
        self.sections.iter().all(|s| s.state.is_terminal())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionOutcome {
    pub index: u32,
    pub state: SectionState,
    pub exit_code: Option<i32>,
    pub cpu_seconds: f64,
    pub start: Option<SimTime>,
    pub end: Option<SimTime>,
}

/// The completion notice a user receives once per finished job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: JobId,
    pub user: String,
    pub sections: Vec<SectionOutcome>,
    pub output_archive_ids: Vec<ArtifactId>,
    pub destination: String,
    pub finished_at: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KillSelector {
    All,
    Sections(Vec<u32>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SelectorRepr {
    Word(String),
    List(Vec<u32>),
}

impl Serialize for KillSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            KillSelector::All => SelectorRepr::Word("ALL".into()),
            KillSelector::Sections(v) => SelectorRepr::List(v.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KillSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match SelectorRepr::deserialize(d)? {
            SelectorRepr::Word(w) if w == "ALL" => Ok(KillSelector::All),
            SelectorRepr::Word(w) => Err(serde::de::Error::custom(format!("unknown selector {w:?}"))),
            SelectorRepr::List(v) => Ok(KillSelector::Sections(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardedKill {
    pub index: u32,
    pub delivery: KillDelivery,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillAck {
    pub job: u64,
    /// Sections killed on the spot (they had not reached a worker).
    pub killed: Vec<u32>,
    /// Sections on a worker; they die on acknowledgment or at the deadline.
    pub forwarded: Vec<ForwardedKill>,
    pub already_terminal: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionResult {
    pub exit_code: i32,
    pub cpu_seconds: f64,
    pub output: Option<ArtifactId>,
}

/// Exponentially decayed CPU usage, brought forward lazily on read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecayedUsage {
    pub value: f64,
    pub as_of: SimTime,
}

impl DecayedUsage {
    pub fn at(&self, now: SimTime, half_life_ms: u64) -> f64 {
        if half_life_ms == 0 {
            return 0.0;
        }
        let dt = now.millis_since(self.as_of) as f64;
        self.value * libm::exp2(-dt / half_life_ms as f64)
    }

    pub fn add(&mut self, cpu_seconds: f64, now: SimTime, half_life_ms: u64) {
        self.value = self.at(now, half_life_ms) + cpu_seconds;
        self.as_of = self.as_of.max(now);
    }
}

/// Cumulative pilot counters; with the current CLAIMED count they give the
/// provisioning invariant `claimed <= booted <= requested`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotCounters {
    pub requested: u64,
    pub booted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionView {
    pub index: u32,
    pub state: SectionState,
    pub attempts: u32,
    pub site: Option<SiteId>,
    pub pilot: Option<PilotId>,
    pub cpu_seconds: f64,
    pub start_time: Option<SimTime>,
    pub end_time: Option<SimTime>,
    pub exit_code: Option<i32>,
    pub kill_pending: bool,
    pub stale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: JobId,
    pub user: String,
    pub vo: String,
    pub n_sections: u32,
    pub submit_time: SimTime,
    pub finished: bool,
    /// Section count per state name; states with no sections are omitted.
    pub states: BTreeMap<String, u32>,
    pub sections: Vec<SectionView>,
}

#[derive(Clone, Debug)]
pub struct Portal {
    pub cfg: PortalConfig,
    realm: RealmKey,
    identity: IdentityMap,
    grid: GridCredentials,
    jobs: BTreeMap<JobId, JobRecord>,
    pilots: BTreeMap<PilotId, Pilot>,
    usage: BTreeMap<String, DecayedUsage>,
    ledger: Vec<AccountingRecord>,
    notifications: BTreeMap<String, Vec<JobSummary>>,
    spool: ArtifactStore,
    spool_index: BTreeMap<SectionId, ArtifactId>,
    collector: Collector,
    next_job: u64,
    next_pilot: u64,
    counters: PilotCounters,
    pub trace: Tracer,
}

fn transition(trace: &mut Tracer, s: &mut Section, ev: SectionEvent, now: SimTime) -> Result<SectionState, IllegalSectionTransition> {
    let from = s.state;
    let to = s.apply(ev)?;
    trace.emit(now, TraceEvent::Section { section: s.id, from, to });
    Ok(to)
}

fn pilot_transition(trace: &mut Tracer, p: &mut Pilot, ev: PilotEvent, now: SimTime) -> Result<PilotState, IllegalPilotTransition> {
    let from = p.state;
    let to = p.apply(ev)?;
    trace.emit(now, TraceEvent::Pilot { pilot: p.pilot_id, site: p.site_id.clone(), from: Some(from), to });
    Ok(to)
}

/// Give a claimed (or retiring) pilot its slot back.
fn release_claim(trace: &mut Tracer, pilots: &mut BTreeMap<PilotId, Pilot>, pid: PilotId, now: SimTime) {
    let Some(p) = pilots.get_mut(&pid) else { return };
    if matches!(p.state, PilotState::Claimed | PilotState::Retiring) {
        let _ = pilot_transition(trace, p, PilotEvent::ClaimReleased, now);
        p.last_claim_end = Some(now);
        if let Some(ad) = p.slot_ad.as_mut() {
            ad.advertised_at = now;
        }
    }
}

impl Portal {
    pub fn new(cfg: PortalConfig, realm: RealmKey, identity: IdentityMap, grid: GridCredentials) -> Self {
        Portal {
            cfg,
            realm,
            identity,
            grid,
            jobs: BTreeMap::new(),
            pilots: BTreeMap::new(),
            usage: BTreeMap::new(),
            ledger: Vec::new(),
            notifications: BTreeMap::new(),
            spool: ArtifactStore::new(),
            spool_index: BTreeMap::new(),
            collector: Collector::default(),
            next_job: 1,
            next_pilot: 1,
            counters: PilotCounters::default(),
            trace: Tracer::default(),
        }
    }

    fn half_life_ms(&self) -> u64 {
        self.cfg.usage_half_life_s.saturating_mul(1000)
    }

    fn authenticate(&self, token: &str, now: SimTime) -> Result<String, PortalError> {
        verify_encoded_token(token, now, &self.realm).map_err(PortalError::AuthFailed)
    }

    fn owned_job(&self, token: &str, job: JobId, now: SimTime) -> Result<(String, &JobRecord), PortalError> {
        let principal = self.authenticate(token, now)?;
        let rec = self.jobs.get(&job).ok_or(PortalError::UnknownJob(job))?;
        if rec.spec.user != principal {
            return Err(PortalError::NotOwner(principal, job));
        }
        Ok((principal, rec))
    }

    // ---- submission -------------------------------------------------------

    pub fn submit_job(&mut self, token: &str, spec: JobSpec, now: SimTime) -> Result<JobId, PortalError> {
        let result = self.admit(token, &spec, now);
        let (requirements, subject) = match result {
            Ok(v) => v,
            Err(e) => {
                self.trace.emit(now, TraceEvent::SubmitRejected { user: spec.user.clone(), reason: e.to_string() });
                return Err(e);
            }
        };
        let id = JobId(self.next_job);
        self.next_job += 1;
        let sections = split_job(id, &spec, now).map_err(PortalError::InvalidSpec)?;
        for s in &sections {
            self.collector.register(s.id);
        }
        self.trace.emit(now, TraceEvent::JobSubmitted { job: id, user: spec.user.clone(), n_sections: spec.n_sections });
        self.jobs.insert(id, JobRecord { id, spec, requirements, sections, subject, submit_time: now, summary_emitted: false });
        Ok(id)
    }

    fn admit(&self, token: &str, spec: &JobSpec, now: SimTime) -> Result<(Expr, String), PortalError> {
        let principal = self.authenticate(token, now)?;
        if spec.user != principal {
            return Err(PortalError::PrincipalMismatch { token: principal, spec: spec.user.clone() });
        }
        spec.validate().map_err(PortalError::InvalidSpec)?;
        let requirements = parse_requirements(&spec.requirements_expr).map_err(PortalError::RequirementsParse)?;
        let subject = self.identity.map_identity(&principal).map_err(PortalError::AuthFailed)?;
        Ok((requirements, subject.into()))
    }

    // ---- matchmaking ------------------------------------------------------

    /// Decayed usage of every user with a record, evaluated at `now`.
    pub fn usage_at(&self, now: SimTime) -> BTreeMap<String, f64> {
        let hl = self.half_life_ms();
        self.usage.iter().map(|(u, d)| (u.clone(), d.at(now, hl))).collect()
    }

    fn waiting_queue(&self) -> Vec<QueuedSection<'_>> {
        let mut q = Vec::new();
        for rec in self.jobs.values() {
            for s in rec.sections.iter().filter(|s| s.state == SectionState::Waiting) {
                q.push(QueuedSection { id: s.id, user: &rec.spec.user, submit_time: s.submit_time, requirements: &rec.requirements });
            }
        }
        q
    }

    /// Ads of ADVERTISING pilots.
    pub fn idle_ads(&self) -> Vec<SlotAd> {
        self.pilots
            .values()
            .filter(|p| p.state == PilotState::Advertising)
            .filter_map(|p| p.slot_ad.clone())
            .collect()
    }

    /// One negotiation cycle. Matched sections go MATCHED and their pilots
    /// CLAIMED.
    pub fn negotiate(&mut self, now: SimTime) -> MatchOutcome {
        let usage = self.usage_at(now);
        let ads = self.idle_ads();
        let outcome = match_sections(&self.waiting_queue(), &usage, &ads);
        for (sid, pid, err) in &outcome.errors {
            self.trace.emit(now, TraceEvent::MatchError { section: *sid, pilot: *pid, error: err.to_string() });
        }
        for &(sid, pid) in &outcome.pairs {
            let rec = self.jobs.get_mut(&sid.job).expect("queued sections exist");
            let pilot = self.pilots.get_mut(&pid).expect("ads belong to pilots");
            debug_assert_eq!(
                eval_requirements(&rec.requirements, &pilot.slot_ad.as_ref().expect("advertising").attributes),
                Ok(true)
            );
            let s = &mut rec.sections[sid.index as usize];
            transition(&mut self.trace, s, SectionEvent::SlotMatched, now).expect("waiting sections match");
            s.attempts += 1;
            s.placement = Some(Placement::Pilot(pid));
            s.site = Some(pilot.site_id.clone());
            pilot_transition(&mut self.trace, pilot, PilotEvent::Claimed, now).expect("advertising pilots claim");
            self.trace.emit(now, TraceEvent::Matched { section: sid, pilot: pid });
        }
        outcome
    }

    /// Waiting sections in fair-share service order with their requirements.
    pub fn waiting_in_service_order(&self, now: SimTime) -> Vec<(SectionId, Expr)> {
        let usage = self.usage_at(now);
        let q = self.waiting_queue();
        negotiator::service_order(&q, &usage).into_iter().map(|q| (q.id, q.requirements.clone())).collect()
    }

    /// Hand a waiting section to a BROKERED site. The user's delegated proxy
    /// must verify at dispatch time; the verified chain is returned.
    pub fn broker_dispatch(&mut self, sid: SectionId, site: &SiteId, now: SimTime) -> Result<Vec<ProxyLink>, PortalError> {
        let rec = self.jobs.get_mut(&sid.job).ok_or(PortalError::UnknownSection(sid))?;
        let chain = self.grid.user_proxy(&rec.subject, now).map_err(PortalError::AuthFailed)?;
        let s = rec.sections.get_mut(sid.index as usize).ok_or(PortalError::UnknownSection(sid))?;
        transition(&mut self.trace, s, SectionEvent::SlotMatched, now)?;
        s.attempts += 1;
        s.placement = Some(Placement::Site(site.clone()));
        s.site = Some(site.clone());
        self.trace.emit(now, TraceEvent::Brokered { section: sid, site: site.clone() });
        Ok(chain)
    }

    // ---- provisioning -----------------------------------------------------

    /// Renew site proxies, plan pilot requests and apply retirements.
    pub fn glidekeeper_tick(&mut self, sites: &[SiteConfig], now: SimTime) -> GlidekeeperPlan {
        let mut ok = alloc::collections::BTreeSet::new();
        for site in sites.iter().filter(|s| s.flavor == crate::fabric::Flavor::Direct) {
            match self.grid.site_proxy(&site.site_id, now) {
                Ok(SiteProxy::Renewed { not_after, .. }) => {
                    self.trace.emit(now, TraceEvent::ProxyRenewed { site: site.site_id.clone(), not_after });
                    ok.insert(site.site_id.clone());
                }
                Ok(SiteProxy::Current(_)) => {
                    ok.insert(site.site_id.clone());
                }
                Err(_) => self.trace.emit(now, TraceEvent::ProxyExpired { site: site.site_id.clone() }),
            }
        }
        let plan = {
            let waiting: Vec<&Expr> = self
                .jobs
                .values()
                .flat_map(|r| r.sections.iter().filter(|s| s.state == SectionState::Waiting).map(move |_| &r.requirements))
                .collect();
            glidekeeper::plan_tick(sites, &waiting, self.pilots.values(), now, &self.cfg.glidekeeper, |s| ok.contains(s))
        };
        for &(pid, reason) in &plan.retirements {
            self.retire_pilot(pid, reason, now);
        }
        plan
    }

    fn retire_pilot(&mut self, pid: PilotId, reason: RetireReason, now: SimTime) {
        let ev = match reason {
            RetireReason::IdleTimeout => PilotEvent::IdleTimeout,
            RetireReason::LifetimeExpired => PilotEvent::LifetimeExpired,
        };
        let Some(p) = self.pilots.get_mut(&pid) else { return };
        let was_claimed = p.state == PilotState::Claimed;
        if let Ok(PilotState::Retiring) = pilot_transition(&mut self.trace, p, ev, now) {
            if !was_claimed {
                let _ = pilot_transition(&mut self.trace, p, ev, now);
            }
        }
    }

    /// Create a REQUESTED pilot for `site`; returns it with the proxy chain
    /// to present to the site's gatekeeper.
    pub fn request_pilot(&mut self, site: &SiteId, now: SimTime) -> Result<(PilotId, Vec<ProxyLink>), PortalError> {
        let proxy = self.grid.site_proxy(site, now).map_err(PortalError::AuthFailed)?;
        let chain = proxy.chain().to_vec();
        let pid = PilotId(self.next_pilot);
        self.next_pilot += 1;
        let pilot = Pilot {
            pilot_id: pid,
            site_id: site.clone(),
            state: PilotState::Requested,
            slot_ad: None,
            submitted_time: now,
            boot_time: None,
            last_claim_end: None,
            proxy_subject: chain[0].subject.clone(),
        };
        self.trace.emit(now, TraceEvent::Pilot { pilot: pid, site: site.clone(), from: None, to: PilotState::Requested });
        self.pilots.insert(pid, pilot);
        self.counters.requested += 1;
        Ok((pid, chain))
    }

    pub fn pilot_event(&mut self, pid: PilotId, ev: PilotEvent, now: SimTime) -> Result<PilotState, PortalError> {
        let p = self.pilots.get_mut(&pid).ok_or(PortalError::UnknownPilot(pid))?;
        Ok(pilot_transition(&mut self.trace, p, ev, now)?)
    }

    /// The pilot's startd came up and advertises `attributes`.
    pub fn pilot_booted(&mut self, pid: PilotId, attributes: Attributes, now: SimTime) -> Result<(), PortalError> {
        let p = self.pilots.get_mut(&pid).ok_or(PortalError::UnknownPilot(pid))?;
        pilot_transition(&mut self.trace, p, PilotEvent::Booted, now)?;
        p.boot_time = Some(now);
        p.slot_ad = Some(SlotAd { pilot_id: pid, attributes, advertised_at: now });
        self.counters.booted += 1;
        Ok(())
    }

    /// A pilot vanished (preemption or worker crash). Any section it was
    /// serving is lost; the section is returned.
    pub fn pilot_lost(&mut self, pid: PilotId, now: SimTime) -> Result<Option<SectionId>, PortalError> {
        let p = self.pilots.get_mut(&pid).ok_or(PortalError::UnknownPilot(pid))?;
        pilot_transition(&mut self.trace, p, PilotEvent::Preempted, now)?;
        let victim = self.section_on_pilot(pid);
        if let Some(sid) = victim {
            self.lose_section(sid, now)?;
        }
        Ok(victim)
    }

    /// The section occupying a pilot's slot, from MATCHED to STAGING_OUT.
    pub fn section_on_pilot(&self, pid: PilotId) -> Option<SectionId> {
        self.jobs
            .values()
            .flat_map(|r| r.sections.iter())
            .find(|s| s.pilot() == Some(pid) && (s.state == SectionState::Matched || s.state.is_on_worker()))
            .map(|s| s.id)
    }

    // ---- section progress -------------------------------------------------

    /// Apply a progress event (`TransferStarted`, `StageInDone`,
    /// `ExecStarted`, `ExecExited`). Terminal events have dedicated entry
    /// points because they carry accounting.
    pub fn section_event(&mut self, sid: SectionId, ev: SectionEvent, now: SimTime) -> Result<SectionState, PortalError> {
        let rec = self.jobs.get_mut(&sid.job).ok_or(PortalError::UnknownSection(sid))?;
        let s = rec.sections.get_mut(sid.index as usize).ok_or(PortalError::UnknownSection(sid))?;
        let to = transition(&mut self.trace, s, ev, now)?;
        if to == SectionState::Running {
            s.start_time = Some(now);
        }
        Ok(to)
    }

    /// Infrastructure failure with the pilot surviving (stage-in failure,
    /// broker worker crash). The claim is released.
    pub fn section_failed_infra(&mut self, sid: SectionId, now: SimTime) -> Result<(), PortalError> {
        let pid = self.section(sid).ok_or(PortalError::UnknownSection(sid))?.pilot();
        self.lose_section(sid, now)?;
        if let Some(pid) = pid {
            release_claim(&mut self.trace, &mut self.pilots, pid, now);
        }
        Ok(())
    }

    /// PilotLost, then retry while attempts remain. A section with a kill
    /// pending is killed instead.
    fn lose_section(&mut self, sid: SectionId, now: SimTime) -> Result<(), PortalError> {
        let max_attempts = self.cfg.max_retries + 1;
        let rec = self.jobs.get_mut(&sid.job).ok_or(PortalError::UnknownSection(sid))?;
        let s = rec.sections.get_mut(sid.index as usize).ok_or(PortalError::UnknownSection(sid))?;
        if s.kill_requested_at.is_some() {
            transition(&mut self.trace, s, SectionEvent::KillRequested, now)?;
        } else {
            transition(&mut self.trace, s, SectionEvent::PilotLost, now)?;
            if s.attempts < max_attempts {
                transition(&mut self.trace, s, SectionEvent::RetryGranted, now)?;
                s.placement = None;
                s.start_time = None;
                s.cpu_seconds = 0.0;
                self.collector.mark_requeued(sid);
                self.trace.emit(now, TraceEvent::Retry { section: sid, attempt: s.attempts + 1 });
                return Ok(());
            }
        }
        s.cpu_seconds = 0.0;
        s.end_time = Some(now);
        self.collector.mark_terminal(sid);
        self.maybe_finish(sid.job, now);
        Ok(())
    }

    /// Store an output archive in the spool.
    pub fn spool_output(&mut self, bytes: Vec<u8>) -> ArtifactId {
        self.spool.put(bytes)
    }

    pub fn spooled(&self, id: &ArtifactId) -> Option<&[u8]> {
        self.spool.get(id)
    }

    /// The worker finished stage-out. Exit 0 completes the section; anything
    /// else fails it with no retry.
    pub fn record_section_result(&mut self, sid: SectionId, result: SectionResult, now: SimTime) -> Result<SectionState, PortalError> {
        let rec = self.jobs.get_mut(&sid.job).ok_or(PortalError::UnknownSection(sid))?;
        let s = rec.sections.get_mut(sid.index as usize).ok_or(PortalError::UnknownSection(sid))?;
        let to = transition(&mut self.trace, s, SectionEvent::StageOutDone(result.exit_code), now)?;
        s.exit_code = Some(result.exit_code);
        let pid = s.pilot();
        self.finish_section(sid, result.cpu_seconds, result.output, pid, now);
        Ok(to)
    }

    /// Shared bookkeeping for sections that ran: cpu, spool, ledger, usage,
    /// claim release and the job summary.
    fn finish_section(&mut self, sid: SectionId, cpu: f64, output: Option<ArtifactId>, pid: Option<PilotId>, now: SimTime) {
        let hl = self.half_life_ms();
        let rec = self.jobs.get_mut(&sid.job).expect("caller checked");
        let s = &mut rec.sections[sid.index as usize];
        s.cpu_seconds = cpu;
        s.end_time = Some(now);
        if s.start_time.is_none() {
            s.start_time = Some(now);
        }
        let site = s.site.clone().unwrap_or_else(|| SiteId::new(""));
        if let Some(id) = output {
            self.trace.emit(now, TraceEvent::OutputSpooled { section: sid, artifact: id.clone(), bytes: self.spool.get(&id).map_or(0, |b| b.len() as u64) });
            self.spool_index.insert(sid, id);
        }
        self.ledger.push(AccountingRecord { vo: rec.spec.vo.clone(), user: rec.spec.user.clone(), site_id: site, cpu_seconds: cpu, wall_end: now });
        self.usage.entry(rec.spec.user.clone()).or_default().add(cpu, now, hl);
        if let Some(pid) = pid {
            release_claim(&mut self.trace, &mut self.pilots, pid, now);
        }
        self.collector.mark_terminal(sid);
        self.maybe_finish(sid.job, now);
    }

    fn maybe_finish(&mut self, job: JobId, now: SimTime) {
        let rec = self.jobs.get_mut(&job).expect("known job");
        if rec.summary_emitted || !rec.is_finished() {
            return;
        }
        rec.summary_emitted = true;
        let summary = JobSummary {
            job_id: job,
            user: rec.spec.user.clone(),
            sections: rec
                .sections
                .iter()
                .map(|s| SectionOutcome {
                    index: s.id.index,
                    state: s.state,
                    exit_code: s.exit_code,
                    cpu_seconds: s.cpu_seconds,
                    start: s.start_time,
                    end: s.end_time,
                })
                .collect(),
            output_archive_ids: rec.sections.iter().filter_map(|s| self.spool_index.get(&s.id).cloned()).collect(),
            destination: rec.spec.output_destination.clone(),
            finished_at: now,
        };
        self.notifications.entry(rec.spec.user.clone()).or_default().push(summary);
        self.trace.emit(now, TraceEvent::JobFinished { job });
    }

    // ---- monitoring and kill ----------------------------------------------

    pub fn ingest_heartbeat(&mut self, hb: Heartbeat, now: SimTime) -> Result<HeartbeatAck, PortalError> {
        let section = hb.section;
        let before = self.collector.tail(section, 1, now)?.lines.last().map(|l| l.seq);
        let ack = self.collector.ingest_heartbeat(hb)?;
        if ack.accepted {
            let new_lines = self
                .collector
                .tail(section, crate::monitoring::LOG_RING_CAPACITY, now)?
                .lines
                .iter()
                .filter(|l| before.is_none_or(|b| l.seq > b))
                .count() as u32;
            self.trace.emit(now, TraceEvent::Heartbeat { section, new_lines });
        }
        Ok(ack)
    }

    pub fn tail(&self, sid: SectionId, n: usize, now: SimTime) -> Result<TailView, PortalError> {
        Ok(self.collector.tail(sid, n, now)?)
    }

    pub fn ls(&self, sid: SectionId) -> Result<Vec<FileInfo>, PortalError> {
        Ok(self.collector.ls(sid)?)
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn kill(&mut self, token: &str, job: JobId, selector: &KillSelector, now: SimTime) -> Result<KillAck, PortalError> {
        let (_, rec) = self.owned_job(token, job, now)?;
        let indices: Vec<u32> = match selector {
            KillSelector::All => (0..rec.spec.n_sections).collect(),
            KillSelector::Sections(v) => {
                if let Some(&bad) = v.iter().find(|&&i| i >= rec.spec.n_sections) {
                    return Err(PortalError::UnknownSection(SectionId::new(job, bad)));
                }
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        self.trace.emit(now, TraceEvent::KillRequested { job, sections: indices.clone() });
        let mut ack = KillAck { job: job.0, ..Default::default() };
        for i in indices {
            let sid = SectionId::new(job, i);
            let rec = self.jobs.get_mut(&job).expect("checked");
            let s = &mut rec.sections[i as usize];
            match s.state {
                SectionState::Waiting | SectionState::Matched => {
                    let pid = s.pilot();
                    transition(&mut self.trace, s, SectionEvent::KillRequested, now)?;
                    s.end_time = Some(now);
                    s.kill_requested_at = Some(now);
                    if let Some(pid) = pid {
                        release_claim(&mut self.trace, &mut self.pilots, pid, now);
                    }
                    self.collector.mark_terminal(sid);
                    ack.killed.push(i);
                }
                st if st.is_on_worker() => {
                    s.kill_requested_at.get_or_insert(now);
                    let delivery = self.collector.forward_kill(sid, now)?;
                    self.trace.emit(now, TraceEvent::KillForwarded { section: sid, delivery });
                    ack.forwarded.push(ForwardedKill { index: i, delivery });
                }
                _ => ack.already_terminal.push(i),
            }
        }
        self.maybe_finish(job, now);
        Ok(ack)
    }

    /// The worker stopped a section on request and shipped what it had.
    pub fn kill_acknowledged(&mut self, sid: SectionId, cpu_seconds: f64, output: Option<ArtifactId>, now: SimTime) -> Result<(), PortalError> {
        let rec = self.jobs.get_mut(&sid.job).ok_or(PortalError::UnknownSection(sid))?;
        let s = rec.sections.get_mut(sid.index as usize).ok_or(PortalError::UnknownSection(sid))?;
        if s.kill_requested_at.is_none() {
            return Err(PortalError::IllegalTransition(IllegalSectionTransition { state: s.state, event: SectionEvent::KillRequested }));
        }
        transition(&mut self.trace, s, SectionEvent::KillRequested, now)?;
        let pid = s.pilot();
        self.finish_section(sid, cpu_seconds, output, pid, now);
        Ok(())
    }

    /// Force-kill on-worker sections whose kill has gone unacknowledged for
    /// the deadline. Their cpu is taken from the latest heartbeat.
    pub fn enforce_kill_deadlines(&mut self, now: SimTime) -> Vec<SectionId> {
        let deadline = self.cfg.kill_deadline_s.saturating_mul(1000);
        let due: Vec<SectionId> = self
            .jobs
            .values()
            .flat_map(|r| r.sections.iter())
            .filter(|s| s.state.is_on_worker() && s.kill_requested_at.is_some_and(|t| now.millis_since(t) >= deadline))
            .map(|s| s.id)
            .collect();
        for &sid in &due {
            let cpu = self.collector.latest(sid).map_or(0.0, |hb| hb.cpu_seconds);
            self.trace.emit(now, TraceEvent::KillForced { section: sid });
            let rec = self.jobs.get_mut(&sid.job).expect("listed");
            let s = &mut rec.sections[sid.index as usize];
            transition(&mut self.trace, s, SectionEvent::KillRequested, now).expect("on-worker sections accept kill");
            let pid = s.pilot();
            self.finish_section(sid, cpu, None, pid, now);
        }
        due
    }

    /// Earliest pending kill deadline, if any.
    pub fn next_kill_deadline(&self) -> Option<SimTime> {
        let d = self.cfg.kill_deadline_s.saturating_mul(1000);
        self.jobs
            .values()
            .flat_map(|r| r.sections.iter())
            .filter(|s| s.state.is_on_worker())
            .filter_map(|s| s.kill_requested_at.map(|t| t.plus_millis(d)))
            .min()
    }

    // ---- output -----------------------------------------------------------

    /// Copy every spooled archive of a finished job to `destination`
    /// (default: the job's own). Re-delivery overwrites.
    pub fn deliver_output(
        &mut self,
        token: &str,
        job: JobId,
        destination: Option<&str>,
        sink: &mut dyn OutputSink,
        now: SimTime,
    ) -> Result<Receipt, PortalError> {
        let (_, rec) = self.owned_job(token, job, now)?;
        if !rec.is_finished() {
            return Err(PortalError::JobNotFinished(job));
        }
        let dest = destination.unwrap_or(&rec.spec.output_destination);
        sink.check(dest)?;
        let mut receipt = Receipt::default();
        for s in &rec.sections {
            let Some(id) = self.spool_index.get(&s.id) else { continue };
            let bytes = self.spool.get(id).expect("spool index points into spool");
            let name = format!("job{}.section{}.caf", job.0, s.id.index);
            sink.put(dest, &name, bytes)?;
            receipt.bytes += bytes.len() as u64;
            receipt.archive_count += 1;
            receipt.names.push(name);
        }
        Ok(receipt)
    }

    pub fn output_of(&self, sid: SectionId) -> Option<&ArtifactId> {
        self.spool_index.get(&sid)
    }

    // ---- reads ------------------------------------------------------------

    pub fn notifications(&self, token: &str, now: SimTime) -> Result<&[JobSummary], PortalError> {
        let principal = self.authenticate(token, now)?;
        Ok(self.notifications.get(&principal).map_or(&[], |v| v.as_slice()))
    }

    pub fn all_notifications(&self) -> &BTreeMap<String, Vec<JobSummary>> {
        &self.notifications
    }

    pub fn ledger(&self) -> &[AccountingRecord] {
        &self.ledger
    }

    pub fn accounting(&self, from: SimTime, to: SimTime) -> Vec<ReportRow> {
        accounting_report(&self.ledger, from, to)
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn section(&self, sid: SectionId) -> Option<&Section> {
        self.jobs.get(&sid.job)?.sections.get(sid.index as usize)
    }

    pub fn pilot(&self, pid: PilotId) -> Option<&Pilot> {
        self.pilots.get(&pid)
    }

    pub fn pilots(&self) -> impl Iterator<Item = &Pilot> {
        self.pilots.values()
    }

    pub fn pilot_counters(&self) -> PilotCounters {
        self.counters
    }

    pub fn grid(&self) -> &GridCredentials {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut GridCredentials {
        &mut self.grid
    }

    pub fn has_unfinished_jobs(&self) -> bool {
        self.jobs.values().any(|r| !r.is_finished())
    }

    pub fn job_view(&self, id: JobId, now: SimTime) -> Option<JobView> {
        let rec = self.jobs.get(&id)?;
        let mut states = BTreeMap::new();
        let sections = rec
            .sections
            .iter()
            .map(|s| {
                *states.entry(s.state.as_str().to_string()).or_insert(0) += 1;
                let live = !s.state.is_terminal();
                SectionView {
                    index: s.id.index,
                    state: s.state,
                    attempts: s.attempts,
                    site: s.site.clone(),
                    pilot: s.pilot(),
                    cpu_seconds: s.cpu_seconds,
                    start_time: s.start_time,
                    end_time: s.end_time,
                    exit_code: s.exit_code,
                    kill_pending: live && s.kill_requested_at.is_some(),
                    stale: s.state.is_on_worker() && self.collector.is_stale(s.id, now).unwrap_or(false),
                }
            })
            .collect();
        Some(JobView {
            job_id: id,
            user: rec.spec.user.clone(),
            vo: rec.spec.vo.clone(),
            n_sections: rec.spec.n_sections,
            submit_time: rec.submit_time,
            finished: rec.is_finished(),
            states,
            sections,
        })
    }

    /// Structural invariants; `Err` names the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut claims: BTreeMap<PilotId, u32> = BTreeMap::new();
        for rec in self.jobs.values() {
            if rec.sections.len() != rec.spec.n_sections as usize {
                return Err(format!("job {} has {} sections", rec.id, rec.sections.len()));
            }
            for s in &rec.sections {
                if s.attempts > self.cfg.max_retries + 1 {
                    return Err(format!("section {} made {} attempts", s.id, s.attempts));
                }
                if let (Some(a), Some(b)) = (s.start_time, s.end_time) {
                    if a > b {
                        return Err(format!("section {} ends before it starts", s.id));
                    }
                }
                if s.state == SectionState::Matched || s.state.is_on_worker() {
                    if let Some(pid) = s.pilot() {
                        *claims.entry(pid).or_default() += 1;
                    }
                }
            }
        }
        let mut claimed = 0;
        for p in self.pilots.values() {
            let n = claims.get(&p.pilot_id).copied().unwrap_or(0);
            if p.state == PilotState::Claimed {
                claimed += 1;
                if n != 1 {
                    return Err(format!("claimed pilot {} serves {} sections", p.pilot_id, n));
                }
            } else if n > 0 && p.state != PilotState::Retiring {
                return Err(format!("pilot {} in {} serves a section", p.pilot_id, p.state));
            }
            if p.slot_ad.is_some() != p.state.has_ad() {
                return Err(format!("pilot {} in {} has ad {}", p.pilot_id, p.state, p.slot_ad.is_some()));
            }
        }
        let c = self.counters;
        if !(claimed <= c.booted && c.booted <= c.requested) {
            return Err(format!("pilot counters claimed {claimed} booted {} requested {}", c.booted, c.requested));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
