//! Deterministic discrete-event simulation of a portal driving DIRECT and
//! BROKERED grid sites.
//!
//! Events are processed in `(time, seq)` order, where `seq` is a global
//! insertion counter. All randomness comes from per-site streams derived
//! from the scenario seed, so `(seed, scenario)` fixes the trace byte for
//! byte.
//!
//! Section life on a worker: transfer start, stage-in (overhead plus a
//! per-byte cost, through the site cache), execution, stage-out, result.
//! Heartbeats go out every 30 s from transfer start and carry kills back.

pub mod broker;
pub mod exec;
pub mod site;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{unpack, Entry};
use crate::artifact::{ArtifactId, ArtifactStore};
use crate::auth::{issue_token, CertificateAuthority, IdentityMap, RealmKey};
use crate::cache::{proxy_get, verify, ProxyError, Source};
use crate::manifest::Manifest;
use crate::model::{ExecBackend, JobId, JobSpec, PilotEvent, PilotId, PilotState, SectionEvent, SectionId, SectionState, Value};
use crate::monitoring::{FileInfo, Heartbeat, LogLine, HEARTBEAT_INTERVAL_MS, LOG_RING_CAPACITY};
use crate::portal::{GridCredentials, KillAck, KillSelector, Portal, PortalConfig, PortalError, SectionResult};
use crate::time::SimTime;
use crate::trace::{TraceEvent, TraceRecord};

pub use broker::{broker_assign, SiteSnapshot};
pub use exec::{ExecError, ExecOutcome, ExecRequest, LocalBackend, Software};
pub use site::{validate_sites, Flavor, GatekeeperOutcome, LatencyRange, Ready, SiteConfig, SiteConfigError, SiteError, SiteRuntime};

pub const CYCLE_MS: u64 = 10_000;
pub const BOOT_DELAY_MS: u64 = 5_000;
pub const TRANSFER_OVERHEAD_MS: u64 = 1_000;
/// Transfer rate for stage-in and stage-out: 1 MB/s.
pub const BYTES_PER_MS: u64 = 1_000;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Cycle,
    Submit(usize),
    Kill(usize),
    KillDeadline,
    PilotArrived(PilotId),
    PilotBooted(PilotId),
    Preempt(usize),
    BrokeredArrived(usize, SectionId, u32),
    StageInDone(SectionId, u32),
    ExecEnd(SectionId, u32),
    Crash(SectionId, u32),
    StageOutDone(SectionId, u32),
    Heartbeat(SectionId, u32),
}

/// One attempt of a section on a worker.
#[derive(Clone, Debug)]
struct Run {
    attempt: u32,
    site: usize,
    pilot: Option<PilotId>,
    stage_in: Result<u64, String>,
    software: Option<Vec<u8>>,
    exec_start: Option<SimTime>,
    exec_ms: u64,
    exit_code: i32,
    cpu_seconds: f64,
    log: Vec<String>,
    files: Vec<Entry>,
    log_base: u64,
    archive: Option<Vec<u8>>,
}

impl Run {
    fn emitted(&self, now: SimTime) -> usize {
        match self.exec_start {
            None => 0,
            Some(t) => exec::lines_emitted(self.log.len(), now.millis_since(t), self.exec_ms),
        }
    }

    fn progress(&self, now: SimTime) -> f64 {
        match self.exec_start {
            None => 0.0,
            Some(_) if self.exec_ms == 0 => 1.0,
            Some(t) => (now.millis_since(t).min(self.exec_ms)) as f64 / self.exec_ms as f64,
        }
    }

    fn cpu_at(&self, now: SimTime) -> f64 {
        self.cpu_seconds * self.progress(now)
    }

    /// Files as they stand at `now`; output grows linearly over execution.
    fn files_at(&self, now: SimTime) -> Vec<Entry> {
        let p = self.progress(now);
        self.files
            .iter()
            .map(|e| {
                let keep = if p >= 1.0 { e.data.len() } else { (e.data.len() as f64 * p) as usize };
                Entry::new(e.path.clone(), e.mode, e.data[..keep].to_vec())
            })
            .collect()
    }

    fn partial_archive(&self, now: SimTime) -> Vec<u8> {
        exec::pack_workdir(&self.log[..self.emitted(now)], &self.files_at(now))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioJob {
    /// Seconds.
    pub submit_at: u64,
    pub spec: JobSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioKill {
    /// Seconds.
    pub at: u64,
    pub job: u64,
    pub selector: KillSelector,
    /// Principal issuing the kill; defaults to the job's owner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    /// Seconds.
    pub t_end: u64,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub jobs: Vec<ScenarioJob>,
    #[serde(default)]
    pub kills: Vec<ScenarioKill>,
    /// Principal → grid subject; unmapped job users get a default subject.
    #[serde(default)]
    pub identity: BTreeMap<String, String>,
    #[serde(default)]
    pub portal: PortalConfig,
    /// Lifetime of the grid credentials issued at start; long enough to
    /// outlast the run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_credential_lifetime_s: Option<u64>,
    /// Artifacts preloaded into the origin store, given as UTF-8 text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Site(#[from] SiteConfigError),
    #[error("identity map: {0}")]
    Identity(crate::auth::AuthError),
    #[error("kill #{0} refers to unknown job owner")]
    KillOwner(usize),
}

fn derive_key(label: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// The realm key a scenario with `seed` runs under.
pub fn scenario_realm_key(seed: u64) -> RealmKey {
    RealmKey(derive_key("caf-realm\0", seed))
}

/// Default grid subject for a principal `name@REALM`.
pub fn default_subject(principal: &str) -> String {
    let name = principal.split('@').next().unwrap_or(principal);
    format!("/DC=org/DC=cdf/CN={name}")
}

pub struct World {
    portal: Portal,
    sites: Vec<SiteRuntime>,
    queue: BTreeMap<(SimTime, u64), Event>,
    seq: u64,
    clock: SimTime,
    cycle_armed: bool,
    runs: BTreeMap<SectionId, Run>,
    log_next: BTreeMap<SectionId, u64>,
    origin: ArtifactStore,
    realm: RealmKey,
    backend: Option<Box<dyn LocalBackend + Send>>,
    pending_jobs: Vec<ScenarioJob>,
    pending_kills: Vec<ScenarioKill>,
    submitted: Vec<Result<JobId, PortalError>>,
    kill_acks: Vec<Result<KillAck, PortalError>>,
}

impl core::fmt::Debug for World {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("World").field("clock", &self.clock).field("pending_events", &self.queue.len()).finish_non_exhaustive()
    }
}

impl World {
    pub fn new(portal: Portal, sites: Vec<SiteConfig>, seed: u64, realm: RealmKey) -> Result<Self, SiteConfigError> {
        validate_sites(&sites)?;
        let sites = sites.into_iter().enumerate().map(|(i, c)| SiteRuntime::new(c, seed, i as u64)).collect();
        Ok(World {
            portal,
            sites,
            queue: BTreeMap::new(),
            seq: 0,
            clock: SimTime::ZERO,
            cycle_armed: false,
            runs: BTreeMap::new(),
            log_next: BTreeMap::new(),
            origin: ArtifactStore::new(),
            realm,
            backend: None,
            pending_jobs: Vec::new(),
            pending_kills: Vec::new(),
            submitted: Vec::new(),
            kill_acks: Vec::new(),
        })
    }

    pub fn from_scenario(sc: &Scenario) -> Result<Self, ScenarioError> {
        let mut pairs = sc.identity.clone();
        for j in &sc.jobs {
            pairs.entry(j.spec.user.clone()).or_insert_with(|| default_subject(&j.spec.user));
        }
        let identity = IdentityMap::from_pairs(pairs).map_err(ScenarioError::Identity)?;
        let ca = CertificateAuthority::new("/DC=org/DC=cdf/CN=CAF Test CA", derive_key("caf-ca\0", sc.seed));
        let lifetime_s = sc.grid_credential_lifetime_s.unwrap_or(sc.t_end.saturating_add(86_400));
        let grid = GridCredentials::from_ca(&ca, &sc.portal.name, &identity, SimTime::from_secs(lifetime_s), sc.portal.site_proxy_ttl_s * 1000);
        let realm = scenario_realm_key(sc.seed);
        let portal = Portal::new(sc.portal.clone(), realm.clone(), identity, grid);
        let mut w = World::new(portal, sc.sites.clone(), sc.seed, realm)?;
        for a in &sc.artifacts {
            w.origin.put(a.as_bytes().to_vec());
        }
        for j in &sc.jobs {
            w.schedule_job(j.clone());
        }
        for k in &sc.kills {
            w.schedule_kill(k.clone());
        }
        Ok(w)
    }

    pub fn set_backend(&mut self, backend: Box<dyn LocalBackend + Send>) {
        self.backend = Some(backend);
    }

    pub fn portal(&self) -> &Portal {
        &self.portal
    }

    pub fn portal_mut(&mut self) -> &mut Portal {
        &mut self.portal
    }

    pub fn sites(&self) -> &[SiteRuntime] {
        &self.sites
    }

    pub fn site_configs(&self) -> Vec<SiteConfig> {
        self.sites.iter().map(|s| s.config.clone()).collect()
    }

    pub fn origin(&self) -> &ArtifactStore {
        &self.origin
    }

    pub fn origin_mut(&mut self) -> &mut ArtifactStore {
        &mut self.origin
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.portal.trace.records()
    }

    pub fn trace_json_lines(&self) -> String {
        crate::trace::to_json_lines(self.trace())
    }

    /// Outcomes of scenario submissions, in submission order.
    pub fn submissions(&self) -> &[Result<JobId, PortalError>] {
        &self.submitted
    }

    pub fn kill_acks(&self) -> &[Result<KillAck, PortalError>] {
        &self.kill_acks
    }

    pub fn issue_token(&self, principal: &str, ttl_ms: u64) -> Result<String, crate::auth::AuthError> {
        Ok(issue_token(principal, self.clock, ttl_ms, &self.realm)?.encode())
    }

    fn push(&mut self, at: SimTime, ev: Event) {
        let at = at.max(self.clock);
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn arm_cycle(&mut self) {
        if !self.cycle_armed {
            self.cycle_armed = true;
            self.push(self.clock, Event::Cycle);
        }
    }

    pub fn schedule_job(&mut self, job: ScenarioJob) {
        let at = SimTime::from_secs(job.submit_at);
        self.pending_jobs.push(job);
        self.push(at, Event::Submit(self.pending_jobs.len() - 1));
    }

    pub fn schedule_kill(&mut self, kill: ScenarioKill) {
        let at = SimTime::from_secs(kill.at);
        self.pending_kills.push(kill);
        self.push(at, Event::Kill(self.pending_kills.len() - 1));
    }

    // ---- live entry points (used by the HTTP portal) ----------------------

    pub fn submit(&mut self, token: &str, spec: JobSpec) -> Result<JobId, PortalError> {
        let r = self.portal.submit_job(token, spec, self.clock);
        if r.is_ok() {
            self.arm_cycle();
        }
        r
    }

    pub fn kill(&mut self, token: &str, job: JobId, selector: &KillSelector) -> Result<KillAck, PortalError> {
        let ack = self.portal.kill(token, job, selector, self.clock)?;
        if !ack.forwarded.is_empty() {
            let d = self.portal.cfg.kill_deadline_s * 1000;
            self.push(self.clock.plus_millis(d), Event::KillDeadline);
        }
        Ok(ack)
    }

    /// Process every event up to and including `t_end`; the clock ends at
    /// `t_end` (or stays put if it is already later).
    pub fn run_until(&mut self, t_end: SimTime) {
        while let Some(next) = self.queue.first_entry() {
            let (t, _) = *next.key();
            if t > t_end {
                break;
            }
            let ev = next.remove();
            debug_assert!(t >= self.clock);
            self.clock = t;
            self.handle(ev);
            for i in 0..self.sites.len() {
                self.dispatch(i);
            }
        }
        self.clock = self.clock.max(t_end);
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn handle(&mut self, ev: Event) {
        let now = self.clock;
        match ev {
            Event::Cycle => self.cycle(),
            Event::Submit(i) => {
                let spec = self.pending_jobs[i].spec.clone();
                let r = match self.issue_token(&spec.user, 7 * 86_400_000) {
                    Ok(token) => self.submit(&token, spec),
                    Err(e) => Err(PortalError::AuthFailed(e)),
                };
                self.submitted.push(r);
            }
            Event::Kill(i) => {
                let k = self.pending_kills[i].clone();
                let owner = k.user.clone().or_else(|| self.portal.job(JobId(k.job)).map(|r| r.spec.user.clone()));
                let r = match owner.map(|u| self.issue_token(&u, 86_400_000)) {
                    Some(Ok(token)) => self.kill(&token, JobId(k.job), &k.selector),
                    Some(Err(e)) => Err(PortalError::AuthFailed(e)),
                    None => Err(PortalError::UnknownJob(JobId(k.job))),
                };
                self.kill_acks.push(r);
            }
            Event::KillDeadline => {
                for sid in self.portal.enforce_kill_deadlines(now) {
                    self.end_run(sid);
                }
            }
            Event::PilotArrived(pid) => {
                if let Some(site) = self.site_of_pilot(pid) {
                    self.sites[site].ready.push_back(Ready::Pilot(pid));
                }
            }
            Event::PilotBooted(pid) => self.boot_pilot(pid),
            Event::Preempt(site) => {
                for pid in self.sites[site].preempt(now) {
                    let holds = self.portal.pilot(pid).is_some_and(|p| {
                        matches!(p.state, PilotState::Advertising | PilotState::Claimed | PilotState::Retiring)
                    });
                    if holds {
                        let site_id = self.sites[site].id().clone();
                        self.portal.trace.emit(now, TraceEvent::Preempted { pilot: pid, site: site_id });
                        if let Ok(Some(sid)) = self.portal.pilot_lost(pid, now) {
                            self.end_run(sid);
                        }
                    }
                }
            }
            Event::BrokeredArrived(site, sid, attempt) => {
                self.sites[site].ready.push_back(Ready::Section(sid, attempt));
            }
            Event::StageInDone(sid, a) => self.stage_in_done(sid, a),
            Event::ExecEnd(sid, a) => self.exec_end(sid, a),
            Event::Crash(sid, a) => self.crash(sid, a),
            Event::StageOutDone(sid, a) => self.stage_out_done(sid, a),
            Event::Heartbeat(sid, a) => self.heartbeat(sid, a),
        }
    }

    /// The run for `sid` if it is still attempt `a` and the section is in
    /// `state`; stale events fall through.
    fn live_run(&self, sid: SectionId, a: u32, state: SectionState) -> bool {
        self.runs.get(&sid).is_some_and(|r| r.attempt == a) && self.portal.section(sid).is_some_and(|s| s.state == state && s.attempts == a)
    }

    fn site_of_pilot(&self, pid: PilotId) -> Option<usize> {
        let p = self.portal.pilot(pid)?;
        self.sites.iter().position(|s| *s.id() == p.site_id)
    }

    fn busy_workers(&self, site: usize) -> u32 {
        let id = self.sites[site].id();
        let pilots = self.portal.pilots().filter(|p| p.site_id == *id && p.state.holds_worker()).count();
        let direct = self.runs.values().filter(|r| r.site == site && r.pilot.is_none()).count();
        (pilots + direct) as u32
    }

    pub fn free_workers(&self, site: usize) -> u32 {
        self.sites[site].config.n_workers.saturating_sub(self.busy_workers(site))
    }

    fn dispatch(&mut self, site: usize) {
        let now = self.clock;
        while self.free_workers(site) > 0 {
            let Some(item) = self.sites[site].ready.pop_front() else { break };
            match item {
                Ready::Pilot(pid) => {
                    if self.portal.pilot(pid).is_some_and(|p| p.state == PilotState::QueuedAtSite)
                        && self.portal.pilot_event(pid, PilotEvent::SiteAccepted, now).is_ok()
                    {
                        self.push(now.plus_millis(BOOT_DELAY_MS), Event::PilotBooted(pid));
                    }
                }
                Ready::Section(sid, a) => {
                    let s = &mut self.sites[site];
                    s.queued_sections = s.queued_sections.saturating_sub(1);
                    let ok = self.portal.section(sid).is_some_and(|s| s.state == SectionState::Matched && s.attempts == a);
                    if ok {
                        self.start_transfer(sid, site, None);
                    }
                }
            }
        }
    }

    fn boot_pilot(&mut self, pid: PilotId) {
        let now = self.clock;
        if !self.portal.pilot(pid).is_some_and(|p| p.state == PilotState::Booting) {
            return;
        }
        let Some(site) = self.site_of_pilot(pid) else { return };
        let mut ad = self.sites[site].config.attribute_template.clone();
        ad.insert("PilotId".into(), Value::Int(pid.0 as i64));
        if self.portal.pilot_booted(pid, ad, now).is_ok() {
            if let Some(at) = self.sites[site].arm_preemption(pid, now) {
                self.push(at, Event::Preempt(site));
            }
        }
    }

    fn cycle(&mut self) {
        let now = self.clock;
        for sid in self.portal.enforce_kill_deadlines(now) {
            self.end_run(sid);
        }
        let outcome = self.portal.negotiate(now);
        for (sid, pid) in outcome.pairs {
            if let Some(site) = self.site_of_pilot(pid) {
                self.start_transfer(sid, site, Some(pid));
            }
        }
        self.broker(now);
        let configs = self.site_configs();
        let plan = self.portal.glidekeeper_tick(&configs, now);
        for req in plan.requests {
            let Some(site) = self.sites.iter().position(|s| *s.id() == req.site_id) else { continue };
            self.portal.trace.emit(now, TraceEvent::PilotsRequested { site: req.site_id.clone(), count: req.count });
            for _ in 0..req.count {
                self.submit_pilot(site);
            }
        }
        let more = self.portal.has_unfinished_jobs()
            || self.portal.pilots().any(|p| p.state.is_live() || p.state == PilotState::Retiring)
            || !self.runs.is_empty();
        if more {
            self.push(now.plus_millis(CYCLE_MS), Event::Cycle);
        } else {
            self.cycle_armed = false;
        }
    }

    fn submit_pilot(&mut self, site: usize) {
        let now = self.clock;
        let site_id = self.sites[site].id().clone();
        let Ok((pid, chain)) = self.portal.request_pilot(&site_id, now) else { return };
        let anchors = self.portal.grid().anchors().clone();
        let outcome = match self.sites[site].gatekeeper_submit(&chain, now, &anchors) {
            Ok(o) => o,
            Err(e) => GatekeeperOutcome::Rejected(e.to_string()),
        };
        self.portal.trace.emit(now, TraceEvent::Gatekeeper { pilot: pid, site: site_id, outcome: outcome.label().into() });
        match outcome {
            GatekeeperOutcome::Queued { latency_ms } => {
                let _ = self.portal.pilot_event(pid, PilotEvent::SiteAccepted, now);
                self.push(now.plus_millis(latency_ms), Event::PilotArrived(pid));
            }
            GatekeeperOutcome::Dropped | GatekeeperOutcome::Rejected(_) => {
                let _ = self.portal.pilot_event(pid, PilotEvent::BootFailed, now);
            }
        }
    }

    /// Route waiting sections to BROKERED sites. A section goes to the
    /// broker when no DIRECT site could ever run it, or when an eligible
    /// brokered site has more free workers than sections already queued.
    fn broker(&mut self, now: SimTime) {
        if !self.sites.iter().any(|s| s.config.flavor == Flavor::Brokered) {
            return;
        }
        for (sid, req) in self.portal.waiting_in_service_order(now) {
            let ok = |s: &SiteRuntime| crate::matchlang::eval_requirements(&req, &s.config.attribute_template) == Ok(true);
            let eligible: Vec<usize> = (0..self.sites.len())
                .filter(|&i| self.sites[i].config.flavor == Flavor::Brokered && ok(&self.sites[i]))
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let direct_ok = self.sites.iter().any(|s| s.config.flavor == Flavor::Direct && ok(s));
            let free: Vec<u32> = eligible.iter().map(|&i| self.free_workers(i)).collect();
            let has_room = eligible.iter().zip(&free).any(|(&i, &f)| f > self.sites[i].queued_sections);
            if direct_ok && !has_room {
                continue;
            }
            let chosen = {
                let snaps: Vec<SiteSnapshot> = eligible
                    .iter()
                    .zip(&free)
                    .map(|(&i, &f)| SiteSnapshot {
                        site_id: self.sites[i].id(),
                        attributes: &self.sites[i].config.attribute_template,
                        queued: self.sites[i].queued_sections,
                        free_workers: f,
                    })
                    .collect();
                match broker_assign(&req, &snaps) {
                    Ok(id) => id.clone(),
                    Err(_) => continue,
                }
            };
            let site = self.sites.iter().position(|s| *s.id() == chosen).expect("chosen from sites");
            if self.portal.broker_dispatch(sid, &chosen, now).is_err() {
                continue;
            }
            let attempt = self.portal.section(sid).map_or(0, |s| s.attempts);
            self.sites[site].queued_sections += 1;
            let latency = self.sites[site].sample_latency_ms();
            self.push(now.plus_millis(latency), Event::BrokeredArrived(site, sid, attempt));
        }
    }

    fn fetch(&mut self, site: usize, id: &ArtifactId) -> Result<(Vec<u8>, Option<Source>), ProxyError> {
        let origin = &self.origin;
        let from_origin = |id: &ArtifactId| origin.get(id).map(<[u8]>::to_vec).ok_or_else(|| ProxyError::NotFound(id.clone()));
        match self.sites[site].cache.as_mut() {
            Some(cache) => proxy_get(cache, id, from_origin).map(|(b, s)| (b, Some(s))),
            None => {
                let bytes = from_origin(id)?;
                verify(id, &bytes)?;
                Ok((bytes, None))
            }
        }
    }

    fn start_transfer(&mut self, sid: SectionId, site: usize, pilot: Option<PilotId>) {
        let now = self.clock;
        if self.portal.section_event(sid, SectionEvent::TransferStarted, now).is_err() {
            return;
        }
        let spec = self.portal.job(sid.job).expect("section has job").spec.clone();
        let attempt = self.portal.section(sid).map_or(0, |s| s.attempts);
        let software_id = spec.user_tarball_id.clone().or_else(|| spec.input_manifest_id.clone());
        let (stage_in, software, source) = match software_id {
            None => (Ok(0), None, None),
            Some(id) => match self.fetch(site, &id) {
                Ok((bytes, source)) => (Ok(bytes.len() as u64), Some(bytes), source),
                Err(e) => (Err(e.to_string()), None, None),
            },
        };
        match &stage_in {
            Ok(bytes) => self.portal.trace.emit(now, TraceEvent::StageIn { section: sid, bytes: *bytes, source }),
            Err(e) => self.portal.trace.emit(now, TraceEvent::StageInFailed { section: sid, error: e.clone() }),
        }
        let bytes = *stage_in.as_ref().unwrap_or(&0);
        let log_base = self.log_next.get(&sid).copied().unwrap_or(0);
        self.runs.insert(
            sid,
            Run {
                attempt,
                site,
                pilot,
                stage_in,
                software,
                exec_start: None,
                exec_ms: 0,
                exit_code: 0,
                cpu_seconds: 0.0,
                log: Vec::new(),
                files: Vec::new(),
                log_base,
                archive: None,
            },
        );
        self.push(now.plus_millis(TRANSFER_OVERHEAD_MS + bytes / BYTES_PER_MS), Event::StageInDone(sid, attempt));
        self.push(now.plus_millis(HEARTBEAT_INTERVAL_MS), Event::Heartbeat(sid, attempt));
    }

    fn stage_in_done(&mut self, sid: SectionId, a: u32) {
        let now = self.clock;
        if !self.live_run(sid, a, SectionState::Transferring) {
            return;
        }
        if self.runs[&sid].stage_in.is_err() {
            let _ = self.portal.section_failed_infra(sid, now);
            self.end_run(sid);
            return;
        }
        if self.portal.section_event(sid, SectionEvent::StageInDone, now).is_err() {
            return;
        }
        let spec = self.portal.job(sid.job).expect("section has job").spec.clone();
        let mut run = self.runs.remove(&sid).expect("live");
        match spec.exec_backend {
            ExecBackend::Simulated => {
                let p = spec.profile();
                run.exec_ms = p.duration_s * 1000;
                run.exit_code = p.exit_code;
                run.cpu_seconds = p.duration_s as f64;
                run.log = exec::simulated_log(sid, a, &p);
                run.files = alloc::vec![Entry::new(exec::OUTPUT_FILE, 0o644, exec::synthetic_output(sid, p.output_bytes))];
            }
            ExecBackend::Local => {
                if let Err(msg) = self.run_local(sid, &spec, &mut run) {
                    self.runs.insert(sid, run);
                    self.portal.trace.emit(now, TraceEvent::StageInFailed { section: sid, error: msg });
                    let _ = self.portal.section_failed_infra(sid, now);
                    self.end_run(sid);
                    return;
                }
            }
        }
        run.exec_start = Some(now);
        let exec_ms = run.exec_ms;
        let site = run.site;
        self.runs.insert(sid, run);
        match self.sites[site].sample_crash(exec_ms) {
            Some(t) => self.push(now.plus_millis(t), Event::Crash(sid, a)),
            None => self.push(now.plus_millis(exec_ms), Event::ExecEnd(sid, a)),
        }
    }

    fn run_local(&mut self, sid: SectionId, spec: &JobSpec, run: &mut Run) -> Result<(), String> {
        let Some(backend) = self.backend.as_mut() else {
            run.exit_code = exec::NO_BACKEND_EXIT;
            run.log = alloc::vec!["no LOCAL execution backend configured".into()];
            return Ok(());
        };
        let site = run.site;
        let origin = &self.origin;
        let cache = self.sites[site].cache.as_mut();
        let mut fetch_fn = {
            let mut cache = cache;
            move |id: &ArtifactId| -> Result<Vec<u8>, ProxyError> {
                let from_origin = |id: &ArtifactId| origin.get(id).map(<[u8]>::to_vec).ok_or_else(|| ProxyError::NotFound(id.clone()));
                match cache.as_deref_mut() {
                    Some(c) => proxy_get(c, id, from_origin).map(|(b, _)| b),
                    None => {
                        let b = from_origin(id)?;
                        verify(id, &b)?;
                        Ok(b)
                    }
                }
            }
        };
        let software = match (&spec.user_tarball_id, &spec.input_manifest_id, &run.software) {
            (Some(_), _, Some(bytes)) => Software::Tarball(unpack(bytes).map_err(|e| e.to_string())?),
            (None, Some(_), Some(bytes)) => Software::Manifest {
                manifest: Manifest::from_json(bytes).map_err(|e| e.to_string())?,
                fetch: &mut fetch_fn,
            },
            _ => Software::None,
        };
        let req = ExecRequest { section: sid, command: &spec.command, software };
        match backend.execute(req) {
            Ok(out) => {
                run.exec_ms = out.wall_ms;
                run.exit_code = out.exit_code;
                run.cpu_seconds = out.cpu_seconds;
                run.log = out.log;
                run.files = out.files;
            }
            Err(ExecError::WallLimitExceeded { wall_ms, mut log, files }) => {
                log.push(format!("wall-clock limit exceeded after {wall_ms} ms"));
                run.exec_ms = wall_ms;
                run.exit_code = exec::WALL_LIMIT_EXIT;
                run.cpu_seconds = wall_ms as f64 / 1000.0;
                run.log = log;
                run.files = files;
            }
            Err(ExecError::Setup(msg)) => return Err(msg),
        }
        Ok(())
    }

    fn exec_end(&mut self, sid: SectionId, a: u32) {
        let now = self.clock;
        if !self.live_run(sid, a, SectionState::Running) {
            return;
        }
        let code = self.runs[&sid].exit_code;
        if self.portal.section_event(sid, SectionEvent::ExecExited(code), now).is_err() {
            return;
        }
        let run = self.runs.get_mut(&sid).expect("live");
        let archive = exec::pack_workdir(&run.log, &run.files);
        let ms = TRANSFER_OVERHEAD_MS + archive.len() as u64 / BYTES_PER_MS;
        run.archive = Some(archive);
        self.push(now.plus_millis(ms), Event::StageOutDone(sid, a));
    }

    fn stage_out_done(&mut self, sid: SectionId, a: u32) {
        let now = self.clock;
        if !self.live_run(sid, a, SectionState::StagingOut) {
            return;
        }
        let run = self.runs.get_mut(&sid).expect("live");
        let archive = run.archive.take().expect("packed at exec end");
        let (exit_code, cpu_seconds) = (run.exit_code, run.cpu_seconds);
        let id = self.portal.spool_output(archive);
        let _ = self.portal.record_section_result(sid, SectionResult { exit_code, cpu_seconds, output: Some(id) }, now);
        self.end_run(sid);
    }

    fn crash(&mut self, sid: SectionId, a: u32) {
        let now = self.clock;
        if !self.live_run(sid, a, SectionState::Running) {
            return;
        }
        let run = &self.runs[&sid];
        let site = run.site;
        let site_id = self.sites[site].id().clone();
        self.portal.trace.emit(now, TraceEvent::WorkerCrashed { section: sid, site: site_id });
        match run.pilot {
            Some(pid) => {
                self.sites[site].disarm(pid);
                let _ = self.portal.pilot_lost(pid, now);
            }
            None => {
                let _ = self.portal.section_failed_infra(sid, now);
            }
        }
        self.end_run(sid);
    }

    fn heartbeat(&mut self, sid: SectionId, a: u32) {
        let now = self.clock;
        let Some(state) = self.portal.section(sid).filter(|s| s.attempts == a && s.state.is_on_worker()).map(|s| s.state) else { return };
        let Some(run) = self.runs.get(&sid).filter(|r| r.attempt == a) else { return };
        let emitted = run.emitted(now);
        let from = emitted.saturating_sub(LOG_RING_CAPACITY);
        let log_tail = (from..emitted)
            .map(|i| LogLine { seq: run.log_base + i as u64, text: run.log[i].clone() })
            .collect();
        let log_bytes = exec::render_log(&run.log[..emitted]).len() as u64;
        let mut workdir_listing = alloc::vec![FileInfo { path: exec::SECTION_LOG.into(), size: log_bytes }];
        workdir_listing.extend(run.files_at(now).iter().map(|e| FileInfo { path: e.path.clone(), size: e.data.len() as u64 }));
        let host = match run.pilot {
            Some(p) => format!("pilot-{}", p.0),
            None => format!("{}-worker", self.sites[run.site].id()),
        };
        let hb = Heartbeat { section: sid, host, state, cpu_seconds: run.cpu_at(now), log_tail, workdir_listing, sent_at: now };
        let Ok(ack) = self.portal.ingest_heartbeat(hb, now) else { return };
        if ack.kill {
            let run = &self.runs[&sid];
            let archive = match &run.archive {
                Some(full) => full.clone(),
                None => run.partial_archive(now),
            };
            let cpu = run.cpu_at(now);
            let id = self.portal.spool_output(archive);
            if self.portal.kill_acknowledged(sid, cpu, Some(id), now).is_ok() {
                self.end_run(sid);
                return;
            }
        }
        self.push(now.plus_millis(HEARTBEAT_INTERVAL_MS), Event::Heartbeat(sid, a));
    }

    fn end_run(&mut self, sid: SectionId) {
        if let Some(run) = self.runs.remove(&sid) {
            let n = run.emitted(self.clock) as u64;
            self.log_next.insert(sid, run.log_base + n);
        }
    }

    /// Sections currently on workers, with their site index.
    pub fn running(&self) -> impl Iterator<Item = (SectionId, usize)> + '_ {
        self.runs.iter().map(|(s, r)| (*s, r.site))
    }
}

#[cfg(test)]
mod tests;
