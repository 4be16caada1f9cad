//! Workload-broker site selection for BROKERED sites.

use alloc::vec::Vec;

use crate::fabric::site::SiteError;
use crate::matchlang::{eval_requirements, Expr};
use crate::model::{Attributes, SiteId};

#[derive(Clone, Debug, PartialEq)]
pub struct SiteSnapshot<'a> {
    pub site_id: &'a SiteId,
    pub attributes: &'a Attributes,
    pub queued: u32,
    pub free_workers: u32,
}

/// The eligible site minimizing `queued / (free + 1)`, ties by site id.
/// Ranks are compared by cross-multiplication so no division happens.
pub fn broker_assign<'a>(requirements: &Expr, sites: &[SiteSnapshot<'a>]) -> Result<&'a SiteId, SiteError> {
    let eligible: Vec<&SiteSnapshot<'a>> = sites
        .iter()
        .filter(|s| eval_requirements(requirements, s.attributes) == Ok(true))
        .collect();
    eligible
        .into_iter()
        .min_by(|a, b| {
            let lhs = a.queued as u64 * (b.free_workers as u64 + 1);
            let rhs = b.queued as u64 * (a.free_workers as u64 + 1);
            lhs.cmp(&rhs).then_with(|| a.site_id.cmp(b.site_id))
        })
        .map(|s| s.site_id)
        .ok_or(SiteError::NoEligibleSite)
}
