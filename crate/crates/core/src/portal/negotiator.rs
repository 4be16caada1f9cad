//! Greedy matchmaking in fair-share order.
//!
//! Users are served in ascending order of decayed usage (ties broken by
//! principal name); a user's sections go first-in first-out. Each section
//! takes the eligible idle ad with the lowest `(advertised_at, pilot_id)`,
//! and a taken ad is gone for the rest of the cycle.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::matchlang::{eval_requirements, EvalError, Expr};
use crate::model::{PilotId, SectionId, SlotAd};
use crate::time::SimTime;

#[derive(Clone, Debug)]
pub struct QueuedSection<'a> {
    pub id: SectionId,
    pub user: &'a str,
    pub submit_time: SimTime,
    pub requirements: &'a Expr,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchOutcome {
    pub pairs: Vec<(SectionId, PilotId)>,
    /// Requirement evaluation errors, one per (section, ad) pair tried.
    pub errors: Vec<(SectionId, PilotId, EvalError)>,
}

/// The order in which users are served.
pub fn user_order<'a>(users: impl IntoIterator<Item = &'a str>, usage: &BTreeMap<String, f64>) -> Vec<&'a str> {
    let mut v: Vec<&str> = users.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    let u = |name: &str| usage.get(name).copied().unwrap_or(0.0);
    v.sort_by(|a, b| u(a).total_cmp(&u(b)).then_with(|| a.cmp(b)));
    v
}

/// Global service order of waiting sections.
pub fn service_order<'q, 'a>(
    queue: &'q [QueuedSection<'a>],
    usage: &BTreeMap<String, f64>,
) -> Vec<&'q QueuedSection<'a>> {
    let users = user_order(queue.iter().map(|q| q.user), usage);
    let rank: BTreeMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let mut ordered: Vec<&QueuedSection> = queue.iter().collect();
    ordered.sort_by_key(|q| (rank[q.user], q.submit_time, q.id));
    ordered
}

pub fn match_sections(
    queue: &[QueuedSection<'_>],
    usage: &BTreeMap<String, f64>,
    ads: &[SlotAd],
) -> MatchOutcome {
    let mut ads: Vec<&SlotAd> = ads.iter().collect();
    ads.sort_by_key(|a| (a.advertised_at, a.pilot_id));
    let mut taken = alloc::vec![false; ads.len()];
    let mut out = MatchOutcome::default();
    for q in service_order(queue, usage) {
        for (i, ad) in ads.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match eval_requirements(q.requirements, &ad.attributes) {
                Ok(true) => {
                    taken[i] = true;
                    out.pairs.push((q.id, ad.pilot_id));
                    break;
                }
                Ok(false) => {}
                Err(e) => out.errors.push((q.id, ad.pilot_id, e)),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matchlang::parse_requirements;
    use crate::model::{Attributes, JobId, Value};
    use alloc::string::ToString;
    use alloc::vec;

    fn ad(pilot: u64, at: u64, mem: i64) -> SlotAd {
        let mut attributes = Attributes::new();
        attributes.insert("Memory".to_string(), Value::Int(mem));
        attributes.insert("Site".to_string(), Value::Str("S".into()));
        SlotAd { pilot_id: PilotId(pilot), attributes, advertised_at: SimTime(at) }
    }

    #[test]
    fn empty_ads_no_matches() {
        let req = parse_requirements("true").unwrap();
        let q: Vec<_> = (0..5)
            .map(|i| QueuedSection { id: SectionId::new(JobId(1), i), user: "a@X", submit_time: SimTime(0), requirements: &req })
            .collect();
        assert!(match_sections(&q, &BTreeMap::new(), &[]).pairs.is_empty());
    }

    #[test]
    fn low_usage_user_goes_first() {
        let req = parse_requirements("true").unwrap();
        let q = vec![
            QueuedSection { id: SectionId::new(JobId(1), 0), user: "A@X", submit_time: SimTime(0), requirements: &req },
            QueuedSection { id: SectionId::new(JobId(2), 0), user: "B@X", submit_time: SimTime(5), requirements: &req },
        ];
        let usage = BTreeMap::from([("A@X".to_string(), 100.0), ("B@X".to_string(), 0.0)]);
        let out = match_sections(&q, &usage, &[ad(1, 0, 4096)]);
        assert_eq!(out.pairs, vec![(SectionId::new(JobId(2), 0), PilotId(1))]);
    }

    #[test]
    fn oldest_ad_preferred_and_consumed() {
        let req = parse_requirements("Memory >= 2048").unwrap();
        let q: Vec<_> = (0..3)
            .map(|i| QueuedSection { id: SectionId::new(JobId(1), i), user: "a@X", submit_time: SimTime(0), requirements: &req })
            .collect();
        let ads = [ad(5, 10, 4096), ad(3, 10, 4096), ad(1, 20, 1024), ad(9, 5, 8192)];
        let out = match_sections(&q, &BTreeMap::new(), &ads);
        let pilots: Vec<_> = out.pairs.iter().map(|p| p.1 .0).collect();
        assert_eq!(pilots, [9, 3, 5]);
    }

    #[test]
    fn evaluation_errors_are_logged_not_fatal() {
        let req = parse_requirements("Disk > 5").unwrap();
        let q = [QueuedSection { id: SectionId::new(JobId(1), 0), user: "a@X", submit_time: SimTime(0), requirements: &req }];
        let out = match_sections(&q, &BTreeMap::new(), &[ad(1, 0, 1), ad(2, 0, 1)]);
        assert!(out.pairs.is_empty());
        assert_eq!(out.errors.len(), 2);
    }

    #[test]
    fn ties_in_usage_break_by_name() {
        let usage = BTreeMap::from([("b@X".to_string(), 5.0), ("a@X".to_string(), 5.0), ("c@X".to_string(), 1.0)]);
        assert_eq!(user_order(["a@X", "b@X", "c@X", "a@X"], &usage), vec!["c@X", "a@X", "b@X"]);
    }
}
