//! The portal-side collector for per-section monitor heartbeats.
//!
//! Each running section has a monitor co-process on its worker that sends a
//! heartbeat every [`HEARTBEAT_INTERVAL_MS`]. Commands travel back on the
//! heartbeat ack, so the portal never has to open a connection into a grid
//! site: a kill is queued here and picked up by the worker's next poll.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{SectionId, SectionState};
use crate::time::SimTime;

pub const HEARTBEAT_INTERVAL_MS: u64 = 30_000;
pub const STALENESS_INTERVALS: u64 = 3;
pub const LOG_RING_CAPACITY: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    /// Per-section counter, strictly increasing across attempts.
    pub seq: u64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileInfo {
    pub path: String,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub section: SectionId,
    /// Pilot id or broker worker name.
    pub host: String,
    pub state: SectionState,
    pub cpu_seconds: f64,
    /// At most [`LOG_RING_CAPACITY`] most recent lines, oldest first.
    pub log_tail: Vec<LogLine>,
    pub workdir_listing: Vec<FileInfo>,
    pub sent_at: SimTime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatAck {
    pub accepted: bool,
    /// The worker must stop the section and ship what it has.
    pub kill: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KillDelivery {
    Delivered,
    Undeliverable,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MonitorError {
    #[error("unknown section {0}")]
    UnknownSection(SectionId),
    #[error("no heartbeat received yet for section {0}")]
    NoDataYet(SectionId),
    #[error("heartbeat log tail exceeds {LOG_RING_CAPACITY} lines")]
    OversizedTail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailView {
    pub lines: Vec<LogLine>,
    pub stale: bool,
}

#[derive(Clone, Debug, Default)]
struct Record {
    latest: Option<Heartbeat>,
    ring: VecDeque<LogLine>,
    live: bool,
    kill_pending: bool,
}

#[derive(Clone, Debug)]
pub struct Collector {
    records: BTreeMap<SectionId, Record>,
    staleness_ms: u64,
}

impl Default for Collector {
    fn default() -> Self {
        Self::new(HEARTBEAT_INTERVAL_MS * STALENESS_INTERVALS)
    }
}

impl Collector {
    pub fn new(staleness_ms: u64) -> Self {
        Collector { records: BTreeMap::new(), staleness_ms }
    }

    pub fn staleness_ms(&self) -> u64 {
        self.staleness_ms
    }

    /// Make a section known; called by the portal at submission.
    pub fn register(&mut self, section: SectionId) {
        let r = self.records.entry(section).or_default();
        r.live = true;
    }

    /// Section reached a terminal state. Its record is retained for `tail`
    /// and `ls`, but it no longer accepts kills.
    pub fn mark_terminal(&mut self, section: SectionId) {
        if let Some(r) = self.records.get_mut(&section) {
            r.live = false;
            r.kill_pending = false;
        }
    }

    /// A retried section starts a fresh attempt; pending commands are void.
    pub fn mark_requeued(&mut self, section: SectionId) {
        if let Some(r) = self.records.get_mut(&section) {
            r.live = true;
            r.kill_pending = false;
        }
    }

    pub fn ingest_heartbeat(&mut self, hb: Heartbeat) -> Result<HeartbeatAck, MonitorError> {
        if hb.log_tail.len() > LOG_RING_CAPACITY {
            return Err(MonitorError::OversizedTail);
        }
        let r = self
            .records
            .get_mut(&hb.section)
            .ok_or(MonitorError::UnknownSection(hb.section))?;
        if r.latest.as_ref().is_some_and(|old| hb.sent_at <= old.sent_at) {
            return Ok(HeartbeatAck { accepted: false, kill: r.kill_pending });
        }
        let last_seq = r.ring.back().map(|l| l.seq);
        for line in &hb.log_tail {
            if last_seq.is_none_or(|s| line.seq > s) && r.ring.back().is_none_or(|b| line.seq > b.seq) {
                if r.ring.len() == LOG_RING_CAPACITY {
                    r.ring.pop_front();
                }
                r.ring.push_back(line.clone());
            }
        }
        r.latest = Some(hb);
        Ok(HeartbeatAck { accepted: true, kill: r.kill_pending && r.live })
    }

    fn record(&self, section: SectionId) -> Result<&Record, MonitorError> {
        self.records.get(&section).ok_or(MonitorError::UnknownSection(section))
    }

    pub fn is_stale(&self, section: SectionId, now: SimTime) -> Result<bool, MonitorError> {
        let r = self.record(section)?;
        Ok(match &r.latest {
            None => true,
            Some(hb) => now.millis_since(hb.sent_at) > self.staleness_ms,
        })
    }

    /// Last `min(n, buffered)` lines, oldest first.
    pub fn tail(&self, section: SectionId, n: usize, now: SimTime) -> Result<TailView, MonitorError> {
        let r = self.record(section)?;
        let skip = r.ring.len().saturating_sub(n);
        Ok(TailView {
            lines: r.ring.iter().skip(skip).cloned().collect(),
            stale: self.is_stale(section, now)? && r.live,
        })
    }

    /// Working-directory listing from the latest heartbeat, sorted by path.
    pub fn ls(&self, section: SectionId) -> Result<Vec<FileInfo>, MonitorError> {
        let r = self.record(section)?;
        let hb = r.latest.as_ref().ok_or(MonitorError::NoDataYet(section))?;
        let mut listing = hb.workdir_listing.clone();
        listing.sort();
        Ok(listing)
    }

    pub fn latest(&self, section: SectionId) -> Option<&Heartbeat> {
        self.records.get(&section).and_then(|r| r.latest.as_ref())
    }

    /// Queue a kill for the worker's next poll. Undeliverable when the worker
    /// has gone quiet; the portal then force-kills at its deadline.
    pub fn forward_kill(&mut self, section: SectionId, now: SimTime) -> Result<KillDelivery, MonitorError> {
        let stale = self.is_stale(section, now)?;
        let r = self.records.get_mut(&section).expect("checked above");
        if !r.live {
            return Err(MonitorError::UnknownSection(section));
        }
        r.kill_pending = true;
        Ok(if stale { KillDelivery::Undeliverable } else { KillDelivery::Delivered })
    }

    pub fn kill_pending(&self, section: SectionId) -> bool {
        self.records.get(&section).is_some_and(|r| r.kill_pending && r.live)
    }
}
