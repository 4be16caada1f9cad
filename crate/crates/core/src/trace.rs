//! Event trace records. One record per observable change, serialized as one
//! JSON object per line with a stable field order.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactId;
use crate::cache::Source;
use crate::model::{JobId, PilotId, PilotState, SectionId, SectionState, SiteId};
use crate::monitoring::KillDelivery;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    JobSubmitted {
        job: JobId,
        user: String,
        n_sections: u32,
    },
    SubmitRejected {
        user: String,
        reason: String,
    },
    Section {
        section: SectionId,
        from: SectionState,
        to: SectionState,
    },
    Pilot {
        pilot: PilotId,
        site: SiteId,
        from: Option<PilotState>,
        to: PilotState,
    },
    Matched {
        section: SectionId,
        pilot: PilotId,
    },
    MatchError {
        section: SectionId,
        pilot: PilotId,
        error: String,
    },
    Brokered {
        section: SectionId,
        site: SiteId,
    },
    PilotsRequested {
        site: SiteId,
        count: u32,
    },
    Gatekeeper {
        pilot: PilotId,
        site: SiteId,
        outcome: String,
    },
    ProxyExpired {
        site: SiteId,
    },
    ProxyRenewed {
        site: SiteId,
        not_after: SimTime,
    },
    StageIn {
        section: SectionId,
        bytes: u64,
        source: Option<Source>,
    },
    StageInFailed {
        section: SectionId,
        error: String,
    },
    Heartbeat {
        section: SectionId,
        new_lines: u32,
    },
    KillRequested {
        job: JobId,
        sections: Vec<u32>,
    },
    KillForwarded {
        section: SectionId,
        delivery: KillDelivery,
    },
    KillForced {
        section: SectionId,
    },
    Preempted {
        pilot: PilotId,
        site: SiteId,
    },
    WorkerCrashed {
        section: SectionId,
        site: SiteId,
    },
    OutputSpooled {
        section: SectionId,
        artifact: ArtifactId,
        bytes: u64,
    },
    Retry {
        section: SectionId,
        attempt: u32,
    },
    JobFinished {
        job: JobId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: SimTime,
    pub seq: u64,
    pub event: TraceEvent,
}

/// Append-only trace with a global sequence counter. Records are ordered by
/// emission, and `seq` is unique.
#[derive(Clone, Debug, Default)]
pub struct Tracer {
    records: Vec<TraceRecord>,
    next_seq: u64,
}

impl Tracer {
    pub fn emit(&mut self, t: SimTime, event: TraceEvent) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.records.push(TraceRecord { t, seq, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Render records as JSON lines.
pub fn to_json_lines(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}
