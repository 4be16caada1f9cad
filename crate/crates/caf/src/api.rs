//! The portal's HTTP+JSON API over a simulated world.
//!
//! All mutations go through one lock around the world, which keeps the
//! portal a single serialized event processor; reads take the same lock
//! and so always see a state between two events.

use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use caf_core::cache::CacheCounters;
use caf_core::fabric::{Flavor, World};
use caf_core::model::{JobId, JobSpec, PilotId, PilotState, SectionId, SiteId};
use caf_core::monitoring::{Heartbeat, MonitorError};
use caf_core::portal::{KillSelector, OutputSink, PortalError};
use caf_core::SimTime;
use serde::{Deserialize, Serialize};

use crate::http::{HttpServer, Incoming, Reply};

pub const DEFAULT_TAIL_LINES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub spec: JobSpec,
    pub token: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: JobId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KillRequest {
    pub selector: KillSelector,
    pub token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliverRequest {
    /// The job's own destination when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<String>,
    pub token: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotRow {
    pub pilot_id: PilotId,
    pub site_id: SiteId,
    pub state: PilotState,
    pub submitted_time: SimTime,
    pub boot_time: Option<SimTime>,
    pub section: Option<SectionId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site_id: SiteId,
    pub flavor: Flavor,
    pub n_workers: u32,
    pub free_workers: u32,
    pub cache: Option<CacheCounters>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub portal: String,
    pub now: SimTime,
    pub sites: Vec<SiteRow>,
}

/// The world plus where delivered output goes.
pub struct PortalHost {
    pub world: World,
    pub sink: Box<dyn OutputSink + Send>,
}

#[derive(Clone)]
pub struct PortalService {
    host: Arc<Mutex<PortalHost>>,
}

/// How sim time moves while serving.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pace {
    /// Only explicit `advance_to` calls move the clock.
    Manual,
    /// Sim time runs this many times faster than wall time.
    Scaled(f64),
}

fn error_kind(e: &PortalError) -> (u16, &'static str) {
    match e {
        PortalError::AuthFailed(_) => (401, "AuthFailed"),
        PortalError::PrincipalMismatch { .. } => (403, "PrincipalMismatch"),
        PortalError::NotOwner(..) => (403, "NotOwner"),
        PortalError::InvalidSpec(_) => (400, "InvalidSpec"),
        PortalError::RequirementsParse(_) => (400, "RequirementsParse"),
        PortalError::UnknownJob(_) => (404, "UnknownJob"),
        PortalError::UnknownSection(_) | PortalError::Monitor(MonitorError::UnknownSection(_)) => (404, "UnknownSection"),
        PortalError::UnknownPilot(_) => (404, "UnknownPilot"),
        PortalError::Monitor(MonitorError::NoDataYet(_)) => (409, "NoDataYet"),
        PortalError::Monitor(MonitorError::OversizedTail) => (400, "OversizedTail"),
        PortalError::IllegalTransition(_) | PortalError::IllegalPilotTransition(_) => (409, "IllegalTransition"),
        PortalError::JobNotFinished(_) => (409, "JobNotFinished"),
        PortalError::DestinationUnreachable(_) => (502, "DestinationUnreachable"),
    }
}

pub fn portal_error(e: &PortalError) -> Reply {
    let (status, kind) = error_kind(e);
    Reply::error(status, kind, e)
}

fn body<T: for<'de> Deserialize<'de>>(rq: &Incoming) -> Result<T, Reply> {
    serde_json::from_slice(&rq.body).map_err(|e| Reply::error(400, "BadRequest", e))
}

fn query_u64(rq: &Incoming, key: &str) -> Result<Option<u64>, Reply> {
    rq.query
        .get(key)
        .map(|v| v.parse().map_err(|_| Reply::error(400, "BadRequest", format!("{key}={v:?} is not a number"))))
        .transpose()
}

fn reply<T: Serialize>(r: Result<T, PortalError>) -> Reply {
    match r {
        Ok(v) => Reply::json(200, &v),
        Err(e) => portal_error(&e),
    }
}

impl PortalService {
    pub fn new(world: World, sink: impl OutputSink + Send + 'static) -> Self {
        PortalService { host: Arc::new(Mutex::new(PortalHost { world, sink: Box::new(sink) })) }
    }

    pub fn lock(&self) -> MutexGuard<'_, PortalHost> {
        self.host.lock().expect("portal lock")
    }

    pub fn now(&self) -> SimTime {
        self.lock().world.now()
    }

    pub fn advance_to(&self, t: SimTime) {
        self.lock().world.run_until(t);
    }

    pub fn handle(&self, rq: &Incoming) -> Reply {
        self.route(rq).unwrap_or_else(|r| r)
    }

    fn route(&self, rq: &Incoming) -> Result<Reply, Reply> {
        let seg = rq.segments();
        let job_id = |s: &str| s.parse::<u64>().map(JobId).map_err(|_| Reply::error(400, "BadRequest", format!("bad job id {s:?}")));
        let section_id = |s: &str| s.parse::<SectionId>().map_err(|e| Reply::error(400, "BadRequest", e));
        Ok(match (rq.method.as_str(), seg.as_slice()) {
            ("POST", ["api", "v1", "jobs"]) => {
                let req: SubmitRequest = body(rq)?;
                reply(self.lock().world.submit(&req.token, req.spec).map(|job_id| SubmitResponse { job_id }))
            }
            ("GET", ["api", "v1", "jobs"]) => {
                let h = self.lock();
                let p = h.world.portal();
                let views: Vec<_> = p.jobs().filter_map(|j| p.job_view(j.id, h.world.now())).collect();
                Reply::json(200, &views)
            }
            ("GET", ["api", "v1", "jobs", id]) => {
                let id = job_id(id)?;
                let h = self.lock();
                reply(h.world.portal().job_view(id, h.world.now()).ok_or(PortalError::UnknownJob(id)))
            }
            ("POST", ["api", "v1", "jobs", id, "kill"]) => {
                let id = job_id(id)?;
                let req: KillRequest = body(rq)?;
                reply(self.lock().world.kill(&req.token, id, &req.selector))
            }
            ("POST", ["api", "v1", "jobs", id, "deliver"]) => {
                let id = job_id(id)?;
                let req: DeliverRequest = body(rq)?;
                let mut h = self.lock();
                let PortalHost { world, sink } = &mut *h;
                let now = world.now();
                reply(world.portal_mut().deliver_output(&req.token, id, req.destination.as_deref(), sink.as_mut(), now))
            }
            ("GET", ["api", "v1", "pilots"]) => {
                let h = self.lock();
                let p = h.world.portal();
                let rows: Vec<PilotRow> = p
                    .pilots()
                    .filter(|pl| rq.query.get("site").is_none_or(|s| pl.site_id.0 == *s))
                    .map(|pl| PilotRow {
                        pilot_id: pl.pilot_id,
                        site_id: pl.site_id.clone(),
                        state: pl.state,
                        submitted_time: pl.submitted_time,
                        boot_time: pl.boot_time,
                        section: p.section_on_pilot(pl.pilot_id),
                    })
                    .collect();
                Reply::json(200, &rows)
            }
            ("GET", ["api", "v1", "accounting"]) => {
                let from = query_u64(rq, "from")?.map_or(SimTime::ZERO, SimTime::from_secs);
                let h = self.lock();
                let to = query_u64(rq, "to")?.map_or(h.world.now(), SimTime::from_secs);
                Reply::json(200, &h.world.portal().accounting(from, to))
            }
            ("GET", ["api", "v1", "notifications"]) => {
                let token = rq.query.get("token").ok_or_else(|| Reply::error(400, "BadRequest", "token is required"))?;
                let h = self.lock();
                reply(h.world.portal().notifications(token, h.world.now()).map(<[_]>::to_vec))
            }
            ("GET", ["api", "v1", "sections", sid, "tail"]) => {
                let sid = section_id(sid)?;
                let n = query_u64(rq, "lines")?.map_or(DEFAULT_TAIL_LINES, |n| n as usize);
                let h = self.lock();
                reply(h.world.portal().tail(sid, n, h.world.now()))
            }
            ("GET", ["api", "v1", "sections", sid, "ls"]) => reply(self.lock().world.portal().ls(section_id(sid)?)),
            ("GET", ["api", "v1", "status"]) => Reply::json(200, &self.status()),
            ("POST", ["internal", "v1", "heartbeat"]) => {
                let hb: Heartbeat = body(rq)?;
                let mut h = self.lock();
                let now = h.world.now();
                reply(h.world.portal_mut().ingest_heartbeat(hb, now))
            }
            _ => Reply::not_found(),
        })
    }

    pub fn status(&self) -> StatusView {
        let h = self.lock();
        let sites = h
            .world
            .sites()
            .iter()
            .enumerate()
            .map(|(i, s)| SiteRow {
                site_id: s.config.site_id.clone(),
                flavor: s.config.flavor,
                n_workers: s.config.n_workers,
                free_workers: h.world.free_workers(i),
                cache: s.cache.as_ref().map(|c| c.counters()),
            })
            .collect();
        StatusView { portal: h.world.portal().cfg.name.clone(), now: h.world.now(), sites }
    }

    /// Serve on `addr`; with [`Pace::Scaled`] a ticker advances sim time.
    pub fn serve(&self, addr: &str, pace: Pace) -> io::Result<RunningPortal> {
        let svc = self.clone();
        let http = HttpServer::start(addr, 4, move |rq| svc.handle(rq))?;
        let stop = Arc::new(AtomicBool::new(false));
        let ticker = match pace {
            Pace::Manual => None,
            Pace::Scaled(speed) => {
                let (svc, stop) = (self.clone(), stop.clone());
                let origin = self.now();
                Some(std::thread::spawn(move || {
                    let t0 = Instant::now();
                    while !stop.load(Ordering::SeqCst) {
                        std::thread::sleep(Duration::from_millis(50));
                        let elapsed_ms = t0.elapsed().as_secs_f64() * 1000.0 * speed;
                        svc.advance_to(origin.plus_millis(elapsed_ms as u64));
                    }
                }))
            }
        };
        Ok(RunningPortal { http: Some(http), stop, ticker })
    }
}

pub struct RunningPortal {
    http: Option<HttpServer>,
    stop: Arc<AtomicBool>,
    ticker: Option<JoinHandle<()>>,
}

impl RunningPortal {
    pub fn url(&self) -> String {
        self.http.as_ref().expect("running").url()
    }

    /// Block until the server stops.
    pub fn join(mut self) {
        if let Some(h) = self.http.take() {
            h.join();
        }
    }
}

impl Drop for RunningPortal {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.ticker.take() {
            let _ = t.join();
        }
        self.http.take();
    }
}
