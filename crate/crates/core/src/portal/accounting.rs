//! Per-VO CPU share report.
//!
//! Shares are rounded to one decimal with the largest-remainder method, so
//! they always sum to exactly 100.0 (1000 tenths). Remainder ties go to the
//! lexicographically smaller VO.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::SiteId;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub vo: String,
    pub user: String,
    pub site_id: SiteId,
    pub cpu_seconds: f64,
    pub wall_end: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub vo: String,
    pub cpu_seconds: f64,
    pub share_percent: f64,
    /// The rounded share in tenths of a percent; rows sum to 1000.
    pub share_tenths: u32,
}

/// Largest-remainder apportionment of `seats` among `weights`. Returns one
/// count per weight, summing to `seats` unless every weight is zero.
pub fn largest_remainder(weights: &[f64], seats: u32) -> Vec<u32> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return alloc::vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w * seats as f64 / total).collect();
    let mut counts: Vec<u32> = quotas.iter().map(|q| libm::floor(*q) as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps index order (callers pass names sorted) on ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - libm::floor(quotas[a]);
        let rb = quotas[b] - libm::floor(quotas[b]);
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(seats.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Report over records with `from <= wall_end < to`.
pub fn accounting_report(ledger: &[AccountingRecord], from: SimTime, to: SimTime) -> Vec<ReportRow> {
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for r in ledger.iter().filter(|r| r.wall_end >= from && r.wall_end < to) {
        *totals.entry(r.vo.as_str()).or_default() += r.cpu_seconds;
    }
    vo_report(totals.into_iter().map(|(vo, cpu)| (String::from(vo), cpu)))
}

/// Report from per-VO totals directly.
pub fn vo_report(totals: impl IntoIterator<Item = (String, f64)>) -> Vec<ReportRow> {
    let mut merged: BTreeMap<String, f64> = BTreeMap::new();
    for (vo, cpu) in totals {
        *merged.entry(vo).or_default() += cpu;
    }
    let (names, weights): (Vec<String>, Vec<f64>) = merged.into_iter().unzip();
    let tenths = largest_remainder(&weights, 1000);
    let mut rows: Vec<ReportRow> = names
        .into_iter()
        .zip(weights)
        .zip(tenths)
        .map(|((vo, cpu_seconds), t)| ReportRow {
            vo,
            cpu_seconds,
            share_percent: t as f64 / 10.0,
            share_tenths: t,
        })
        .collect();
    rows.sort_by(|a, b| b.share_tenths.cmp(&a.share_tenths).then_with(|| a.vo.cmp(&b.vo)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn rec(vo: &str, cpu: f64, end: u64) -> AccountingRecord {
        AccountingRecord {
            vo: vo.to_string(),
            user: "u@X".into(),
            site_id: SiteId::new("S"),
            cpu_seconds: cpu,
            wall_end: SimTime::from_secs(end),
        }
    }

    #[test]
    fn empty_window_is_empty() {
        assert!(accounting_report(&[], SimTime::ZERO, SimTime::from_secs(10)).is_empty());
        let l = [rec("A", 5.0, 100)];
        assert!(accounting_report(&l, SimTime::ZERO, SimTime::from_secs(100)).is_empty());
    }

    #[test]
    fn single_vo_is_hundred() {
        let l = [rec("CDF", 5.0, 1), rec("CDF", 7.0, 2)];
        let r = accounting_report(&l, SimTime::ZERO, SimTime::from_secs(10));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].share_percent, 100.0);
        assert_eq!(r[0].cpu_seconds, 12.0);
    }

    #[test]
    fn three_way_tie() {
        let l = [rec("B", 1.0, 1), rec("A", 1.0, 1), rec("C", 1.0, 1)];
        let r = accounting_report(&l, SimTime::ZERO, SimTime::from_secs(10));
        let got: Vec<(&str, u32)> = r.iter().map(|x| (x.vo.as_str(), x.share_tenths)).collect();
        assert_eq!(got, [("A", 334), ("B", 333), ("C", 333)]);
    }

    #[test]
    fn thirty_six_twenty_seven_twenty_eighteen_normalizes_by_total() {
        // The four ratios add up to 101, so normalized shares cannot be the
        // raw ratios; this pins what the report actually yields.
        let l = [rec("CMS", 36.0, 1), rec("ATLAS", 27.0, 1), rec("D0", 20.0, 1), rec("CDF", 18.0, 1)];
        let r = accounting_report(&l, SimTime::ZERO, SimTime::from_secs(10));
        let got: Vec<u32> = r.iter().map(|x| x.share_tenths).collect();
        assert_eq!(got, [357, 267, 198, 178]);
        assert_eq!(got.iter().sum::<u32>(), 1000);
    }
}
