//! Pilot provisioning policy for DIRECT sites.
//!
//! Per site: `demand` is the number of waiting sections whose requirements
//! accept the site's attribute template; the target is
//! `min(max_pilots, ceil(demand * overcommit))`, and the tick requests
//! `min(max_submit_per_tick, target - live)` more pilots. Idle and
//! over-age pilots are retired.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fabric::{Flavor, SiteConfig};
use crate::matchlang::{eval_requirements, Expr};
use crate::model::{Pilot, PilotId, PilotState, SiteId};
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlidekeeperConfig {
    pub overcommit: f64,
    pub max_submit_per_tick: u32,
    pub pilot_idle_timeout_s: u64,
    pub pilot_max_lifetime_s: u64,
    /// Per-site cap; sites not listed fall back to their own `max_pilots`,
    /// then to their worker count.
    pub max_pilots: BTreeMap<SiteId, u32>,
}

impl Default for GlidekeeperConfig {
    fn default() -> Self {
        GlidekeeperConfig {
            overcommit: 1.0,
            max_submit_per_tick: 10,
            pilot_idle_timeout_s: 600,
            pilot_max_lifetime_s: 21_600,
            max_pilots: BTreeMap::new(),
        }
    }
}

impl GlidekeeperConfig {
    pub fn max_pilots_for(&self, site: &SiteConfig) -> u32 {
        self.max_pilots
            .get(&site.site_id)
            .copied()
            .or(site.max_pilots)
            .unwrap_or(site.n_workers)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotRequest {
    pub site_id: SiteId,
    pub count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RetireReason {
    IdleTimeout,
    LifetimeExpired,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlidekeeperPlan {
    pub requests: Vec<PilotRequest>,
    pub retirements: Vec<(PilotId, RetireReason)>,
    /// Sites skipped because the portal's delegated proxy failed to verify.
    pub proxy_expired: Vec<SiteId>,
}

/// `ceil(demand * overcommit)` without going through floats for the common
/// integral case.
fn scaled_demand(demand: u32, overcommit: f64) -> u64 {
    if overcommit == 1.0 {
        return demand as u64;
    }
    let v = libm::ceil(demand as f64 * overcommit);
    if v.is_nan() || v <= 0.0 {
        0
    } else {
        v as u64
    }
}

pub fn plan_tick<'a>(
    sites: &[SiteConfig],
    waiting: &[&Expr],
    pilots: impl IntoIterator<Item = &'a Pilot> + Clone,
    now: SimTime,
    cfg: &GlidekeeperConfig,
    proxy_ok: impl Fn(&SiteId) -> bool,
) -> GlidekeeperPlan {
    let mut plan = GlidekeeperPlan::default();
    for site in sites.iter().filter(|s| s.flavor == Flavor::Direct) {
        if !proxy_ok(&site.site_id) {
            plan.proxy_expired.push(site.site_id.clone());
            continue;
        }
        let demand = waiting
            .iter()
            .filter(|req| eval_requirements(req, &site.attribute_template) == Ok(true))
            .count() as u32;
        let target = scaled_demand(demand, cfg.overcommit).min(cfg.max_pilots_for(site) as u64);
        let live = pilots
            .clone()
            .into_iter()
            .filter(|p| p.site_id == site.site_id && p.state.is_live())
            .count() as u64;
        let want = target.saturating_sub(live).min(cfg.max_submit_per_tick as u64) as u32;
        if want > 0 {
            plan.requests.push(PilotRequest { site_id: site.site_id.clone(), count: want });
        }
    }

    let idle_ms = cfg.pilot_idle_timeout_s.saturating_mul(1000);
    let life_ms = cfg.pilot_max_lifetime_s.saturating_mul(1000);
    for p in pilots {
        if p.state.is_terminal() || p.state == PilotState::Retiring {
            continue;
        }
        if now.millis_since(p.submitted_time) > life_ms {
            plan.retirements.push((p.pilot_id, RetireReason::LifetimeExpired));
        } else if p.idle_since().is_some_and(|t| now.millis_since(t) > idle_ms) {
            plan.retirements.push((p.pilot_id, RetireReason::IdleTimeout));
        }
    }
    plan
}
