//! Simulated grid sites: configuration, the DIRECT gatekeeper and the
//! per-site random streams for drops, crashes and preemption.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::auth::{verify_proxy, ProxyLink, TrustAnchors};
use crate::cache::LruCache;
use crate::model::{Attributes, PilotId, SectionId, SiteId, Value, ValueKind};
use crate::rng::SimRng;
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flavor {
    /// Gatekeeper accepts pilots; sections run inside pilot slots.
    Direct,
    /// A workload broker routes whole sections onto workers; no pilots.
    Brokered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRange {
    pub min_s: u64,
    pub max_s: u64,
}

impl Default for LatencyRange {
    fn default() -> Self {
        LatencyRange { min_s: 10, max_s: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: SiteId,
    pub flavor: Flavor,
    pub n_workers: u32,
    pub attribute_template: Attributes,
    #[serde(default, rename = "queue_latency_dist")]
    pub queue_latency: LatencyRange,
    #[serde(default)]
    pub pilot_drop_prob: f64,
    #[serde(default)]
    pub worker_crash_prob: f64,
    #[serde(default)]
    pub preempt_rate_per_hour: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_url: Option<String>,
    /// Capacity of the site's caching proxy; no cache when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_capacity_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pilots: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SiteConfigError {
    #[error("site {0}: n_workers must be at least 1")]
    NoWorkers(SiteId),
    #[error("site {site}: {field} must be a probability in [0, 1]")]
    Probability { site: SiteId, field: &'static str },
    #[error("site {0}: preempt_rate_per_hour must be non-negative")]
    NegativeRate(SiteId),
    #[error("site {0}: queue latency min exceeds max")]
    LatencyOrder(SiteId),
    #[error("site {site}: attribute template lacks {attribute} ({kind})")]
    Template { site: SiteId, attribute: &'static str, kind: ValueKind },
    #[error("duplicate site id {0}")]
    Duplicate(SiteId),
}

impl SiteConfig {
    pub fn validate(&self) -> Result<(), SiteConfigError> {
        let site = || self.site_id.clone();
        if self.n_workers < 1 {
            return Err(SiteConfigError::NoWorkers(site()));
        }
        for (field, p) in [("pilot_drop_prob", self.pilot_drop_prob), ("worker_crash_prob", self.worker_crash_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SiteConfigError::Probability { site: site(), field });
            }
        }
        if self.preempt_rate_per_hour.is_nan() || self.preempt_rate_per_hour < 0.0 {
            return Err(SiteConfigError::NegativeRate(site()));
        }
        if self.queue_latency.min_s > self.queue_latency.max_s {
            return Err(SiteConfigError::LatencyOrder(site()));
        }
        for (attribute, kind) in [
            ("Site", ValueKind::Str),
            ("Memory", ValueKind::Int),
            ("Arch", ValueKind::Str),
            ("GridFlavor", ValueKind::Str),
        ] {
            if self.attribute_template.get(attribute).map(Value::kind) != Some(kind) {
                return Err(SiteConfigError::Template { site: site(), attribute, kind });
            }
        }
        Ok(())
    }
}

pub fn validate_sites(sites: &[SiteConfig]) -> Result<(), SiteConfigError> {
    let mut seen = alloc::collections::BTreeSet::new();
    for s in sites {
        s.validate()?;
        if !seen.insert(&s.site_id) {
            return Err(SiteConfigError::Duplicate(s.site_id.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GatekeeperOutcome {
    /// Accepted; the pilot reaches the site's batch queue after `latency_ms`.
    Queued { latency_ms: u64 },
    Dropped,
    Rejected(String),
}

impl GatekeeperOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            GatekeeperOutcome::Queued { .. } => "QUEUED",
            GatekeeperOutcome::Dropped => "DROPPED",
            GatekeeperOutcome::Rejected(_) => "REJECTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SiteError {
    #[error("site {0} does not accept pilots")]
    WrongFlavor(SiteId),
    #[error("no brokered site satisfies the requirements")]
    NoEligibleSite,
}

/// Something waiting at a site for a free worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ready {
    Pilot(PilotId),
    Section(SectionId, u32),
}

/// Random-stream offsets; stream `base + site index` belongs to one site.
pub const GATEKEEPER_STREAM: u64 = 100;
pub const PREEMPT_STREAM: u64 = 200;
pub const CRASH_STREAM: u64 = 300;

#[derive(Clone, Debug)]
pub struct SiteRuntime {
    pub config: SiteConfig,
    gatekeeper_rng: SimRng,
    preempt_rng: SimRng,
    crash_rng: SimRng,
    pub ready: VecDeque<Ready>,
    /// Brokered sections routed here and not yet started.
    pub queued_sections: u32,
    pub cache: Option<LruCache>,
    armed: BTreeMap<PilotId, SimTime>,
}

impl SiteRuntime {
    pub fn new(config: SiteConfig, seed: u64, index: u64) -> Self {
        let cache = config.cache_capacity_bytes.map(LruCache::new);
        SiteRuntime {
            config,
            gatekeeper_rng: SimRng::stream(seed, GATEKEEPER_STREAM + index),
            preempt_rng: SimRng::stream(seed, PREEMPT_STREAM + index),
            crash_rng: SimRng::stream(seed, CRASH_STREAM + index),
            ready: VecDeque::new(),
            queued_sections: 0,
            cache,
            armed: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &SiteId {
        &self.config.site_id
    }

    /// Accept or refuse a pilot. The proxy is checked first, so an invalid
    /// credential never consumes a drop draw.
    pub fn gatekeeper_submit(&mut self, chain: &[ProxyLink], now: SimTime, anchors: &TrustAnchors) -> Result<GatekeeperOutcome, SiteError> {
        if self.config.flavor != Flavor::Direct {
            return Err(SiteError::WrongFlavor(self.config.site_id.clone()));
        }
        if let Err(e) = verify_proxy(chain, now, anchors) {
            return Ok(GatekeeperOutcome::Rejected(e.to_string()));
        }
        if self.gatekeeper_rng.bernoulli(self.config.pilot_drop_prob) {
            return Ok(GatekeeperOutcome::Dropped);
        }
        Ok(GatekeeperOutcome::Queued { latency_ms: self.sample_latency_ms() })
    }

    pub fn sample_latency_ms(&mut self) -> u64 {
        let r = self.config.queue_latency;
        self.gatekeeper_rng.uniform_inclusive(r.min_s * 1000, r.max_s * 1000)
    }

    /// Draw a preemption time for a pilot that just started holding a
    /// worker. Returns `None` at rate zero.
    pub fn arm_preemption(&mut self, pilot: PilotId, now: SimTime) -> Option<SimTime> {
        let dt = self.preempt_rng.exponential_ms(self.config.preempt_rate_per_hour)?;
        let at = now.plus_millis(dt);
        self.armed.insert(pilot, at);
        Some(at)
    }

    pub fn disarm(&mut self, pilot: PilotId) {
        self.armed.remove(&pilot);
    }

    /// Pilots whose preemption time has come, in id order; they are disarmed.
    pub fn preempt(&mut self, now: SimTime) -> Vec<PilotId> {
        let due: Vec<PilotId> = self.armed.iter().filter(|(_, t)| **t <= now).map(|(p, _)| *p).collect();
        for p in &due {
            self.armed.remove(p);
        }
        due
    }

    /// Whether an execution of `duration_ms` crashes, and when.
    pub fn sample_crash(&mut self, duration_ms: u64) -> Option<u64> {
        if self.crash_rng.bernoulli(self.config.worker_crash_prob) {
            Some(self.crash_rng.uniform_inclusive(0, duration_ms))
        } else {
            None
        }
    }
}
