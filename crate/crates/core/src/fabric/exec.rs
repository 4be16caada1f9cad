//! What happens on a worker once stage-in is done: the SIMULATED profile,
//! the hook for real LOCAL execution, and packing of the output archive.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::archive::{pack, Entry};
use crate::artifact::ArtifactId;
use crate::cache::ProxyError;
use crate::manifest::Manifest;
use crate::model::{SectionId, SimProfile};

pub const SECTION_LOG: &str = "section.log";
pub const OUTPUT_FILE: &str = "output.dat";
/// Exit code reported when a LOCAL section hits its wall-clock limit.
pub const WALL_LIMIT_EXIT: i32 = 124;
/// Exit code reported when a LOCAL section has no backend to run on.
pub const NO_BACKEND_EXIT: i32 = 127;

/// Software handed to a LOCAL execution.
pub enum Software<'a> {
    None,
    /// Unpacked user tarball.
    Tarball(Vec<Entry>),
    /// Namespace to mount; files are fetched on open through `fetch`.
    Manifest {
        manifest: Manifest,
        fetch: &'a mut dyn FnMut(&ArtifactId) -> Result<Vec<u8>, ProxyError>,
    },
}

pub struct ExecRequest<'a> {
    pub section: SectionId,
    pub command: &'a str,
    pub software: Software<'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecOutcome {
    pub exit_code: i32,
    pub cpu_seconds: f64,
    pub wall_ms: u64,
    /// Captured stdout and stderr, one entry per line.
    pub log: Vec<String>,
    /// Files left in the working directory, excluding the log.
    pub files: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("wall-clock limit exceeded after {wall_ms} ms")]
    WallLimitExceeded { wall_ms: u64, log: Vec<String>, files: Vec<Entry> },
    #[error("worker setup failed: {0}")]
    Setup(String),
}

/// Runs LOCAL sections for real. Implemented outside this crate.
pub trait LocalBackend {
    fn execute(&mut self, req: ExecRequest<'_>) -> Result<ExecOutcome, ExecError>;
}

/// Synthetic log of one SIMULATED attempt.
pub fn simulated_log(section: SectionId, attempt: u32, profile: &SimProfile) -> Vec<String> {
    (1..=profile.log_lines)
        .map(|k| format!("section {section} attempt {attempt}: step {k}/{}", profile.log_lines))
        .collect()
}

/// Lines written after `elapsed_ms` of a run lasting `duration_ms`,
/// spread evenly.
pub fn lines_emitted(total: usize, elapsed_ms: u64, duration_ms: u64) -> usize {
    if elapsed_ms >= duration_ms {
        return total;
    }
    (total as u128 * elapsed_ms as u128 / duration_ms as u128) as usize
}

/// Deterministic stand-in for a SIMULATED section's data output.
pub fn synthetic_output(section: SectionId, len: u64) -> Vec<u8> {
    let salt = (section.job.0 as u32).wrapping_mul(31).wrapping_add(section.index);
    (0..len).map(|i| ((i as u32).wrapping_add(salt) % 251) as u8).collect()
}

pub fn render_log(lines: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for l in lines {
        out.extend_from_slice(l.as_bytes());
        out.push(b'\n');
    }
    out
}

/// Pack a working directory: the log plus whatever other files exist.
pub fn pack_workdir(log: &[String], files: &[Entry]) -> Vec<u8> {
    let mut tree = Vec::with_capacity(files.len() + 1);
    tree.push(Entry::new(SECTION_LOG, 0o644, render_log(log)));
    tree.extend(files.iter().filter(|e| e.path != SECTION_LOG).cloned());
    pack(&tree).expect("workdir paths are valid and unique").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::unpack_map;
    use crate::model::JobId;

    #[test]
    fn profile_echo() {
        let sid = SectionId::new(JobId(1), 2);
        let p = SimProfile { duration_s: 60, log_lines: 10, output_bytes: 100, exit_code: 0 };
        let log = simulated_log(sid, 1, &p);
        assert_eq!(log.len(), 10);
        let bytes = pack_workdir(&log, &[Entry::new(OUTPUT_FILE, 0o644, synthetic_output(sid, 100))]);
        let m = unpack_map(&bytes).unwrap();
        assert_eq!(m[SECTION_LOG].data, render_log(&log));
        assert_eq!(m[OUTPUT_FILE].data.len(), 100);
    }

    #[test]
    fn even_spread() {
        assert_eq!(lines_emitted(10, 0, 60_000), 0);
        assert_eq!(lines_emitted(10, 30_000, 60_000), 5);
        assert_eq!(lines_emitted(10, 59_999, 60_000), 9);
        assert_eq!(lines_emitted(10, 60_000, 60_000), 10);
        assert_eq!(lines_emitted(10, 0, 0), 10);
    }
}
