//! Scenario files and offline simulation runs.

use std::fs;
use std::io;
use std::path::Path;

use caf_core::fabric::{Scenario, ScenarioError, World};
use caf_core::portal::{JobView, PilotCounters, ReportRow};
use caf_core::SimTime;
use serde::{Deserialize, Serialize};

use crate::exec::LocalExecutor;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
}

pub fn load_scenario(path: &Path) -> Result<Scenario, LoadError> {
    let display = path.display().to_string();
    let text = fs::read(path).map_err(|source| LoadError::Read { path: display.clone(), source })?;
    serde_json::from_slice(&text).map_err(|source| LoadError::Parse { path: display, source })
}

/// What an offline run leaves behind besides the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub until: SimTime,
    pub jobs: Vec<JobView>,
    /// Rejected scenario submissions, rendered.
    pub rejected: Vec<String>,
    pub accounting: Vec<ReportRow>,
    pub pilots: PilotCounters,
    pub trace_records: usize,
}

/// A world ready to run, with LOCAL sections executed as subprocesses.
pub fn build_world(sc: &Scenario) -> Result<World, ScenarioError> {
    let mut w = World::from_scenario(sc)?;
    w.set_backend(Box::new(LocalExecutor::default()));
    Ok(w)
}

/// Run `sc` until `until` (default: its `t_end`) and summarize.
pub fn run_scenario(sc: &Scenario, until: Option<SimTime>) -> Result<(World, SimSummary), ScenarioError> {
    let mut w = build_world(sc)?;
    let until = until.unwrap_or(SimTime::from_secs(sc.t_end));
    w.run_until(until);
    let p = w.portal();
    let summary = SimSummary {
        seed: sc.seed,
        until,
        jobs: p.jobs().filter_map(|j| p.job_view(j.id, w.now())).collect(),
        rejected: w.submissions().iter().filter_map(|r| r.as_ref().err().map(ToString::to_string)).collect(),
        accounting: p.accounting(SimTime::ZERO, until),
        pilots: p.pilot_counters(),
        trace_records: w.trace().len(),
    };
    Ok((w, summary))
}

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn write_run(dir: &Path, world: &World, summary: &SimSummary) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRACE_FILE), world.trace_json_lines())?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(summary).map_err(io::Error::other)?)
}

pub fn read_summary(dir: &Path) -> Result<SimSummary, LoadError> {
    let path = dir.join(SUMMARY_FILE);
    let display = path.display().to_string();
    let text = fs::read(&path).map_err(|source| LoadError::Read { path: display.clone(), source })?;
    serde_json::from_slice(&text).map_err(|source| LoadError::Parse { path: display, source })
}
