//! LOCAL execution: each section runs as `sh -c <command>` in a fresh
//! sandbox directory holding the job's software.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use caf_core::archive::Entry;
use caf_core::fabric::exec::{ExecError, ExecOutcome, ExecRequest, LocalBackend, Software, SECTION_LOG};

use crate::namespace::set_mode;

#[derive(Clone, Debug)]
pub struct LocalExecutor {
    pub wall_limit: Duration,
}

impl Default for LocalExecutor {
    fn default() -> Self {
        LocalExecutor { wall_limit: Duration::from_secs(3600) }
    }
}

fn setup_err(e: impl ToString) -> ExecError {
    ExecError::Setup(e.to_string())
}

fn write_file(root: &Path, rel: &str, data: &[u8], mode: u32) -> io::Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, data)?;
    set_mode(&path, mode)
}

/// Stage the software; returns the staged relative paths.
fn stage(root: &Path, software: Software<'_>) -> Result<BTreeSet<String>, ExecError> {
    let mut staged = BTreeSet::new();
    match software {
        Software::None => {}
        Software::Tarball(entries) => {
            for e in entries {
                write_file(root, &e.path, &e.data, e.mode).map_err(setup_err)?;
                staged.insert(e.path);
            }
        }
        // Without syscall interposition the whole manifest is staged.
        Software::Manifest { manifest, fetch } => {
            for e in manifest.entries {
                let bytes = fetch(&e.artifact).map_err(setup_err)?;
                write_file(root, &e.path, &bytes, e.mode).map_err(setup_err)?;
                staged.insert(e.path);
            }
        }
    }
    Ok(staged)
}

/// Regular files under `root` minus the staged software and the log, in
/// path order.
fn collect(root: &Path, staged: &BTreeSet<String>) -> io::Result<Vec<Entry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, std::path::PathBuf)>) -> io::Result<()> {
        for ent in fs::read_dir(dir)? {
            let ent = ent?;
            let ty = ent.file_type()?;
            if ty.is_dir() {
                walk(root, &ent.path(), out)?;
            } else if ty.is_file() {
                let rel = ent.path().strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.push((rel, ent.path()));
            }
        }
        Ok(())
    }
    let mut found = Vec::new();
    walk(root, root, &mut found)?;
    found.sort();
    let mut files = Vec::new();
    for (rel, path) in found {
        if staged.contains(&rel) || rel == SECTION_LOG {
            continue;
        }
        files.push(Entry::new(rel, file_mode(&path)?, fs::read(&path)?));
    }
    Ok(files)
}

#[cfg(unix)]
fn file_mode(path: &Path) -> io::Result<u32> {
    use std::os::unix::fs::PermissionsExt;
    Ok(fs::metadata(path)?.permissions().mode() & 0o7777)
}

#[cfg(not(unix))]
fn file_mode(_: &Path) -> io::Result<u32> {
    Ok(0o644)
}

/// Kill the section's whole process group, grandchildren included.
#[cfg(unix)]
fn kill_group(child: &mut std::process::Child) {
    // SAFETY: plain syscall on a pid we spawned as a group leader.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_group(child: &mut std::process::Child) {
    let _ = child.kill();
}

impl LocalBackend for LocalExecutor {
    fn execute(&mut self, req: ExecRequest<'_>) -> Result<ExecOutcome, ExecError> {
        let sandbox = tempfile::Builder::new().prefix("caf-section-").tempdir().map_err(setup_err)?;
        let root = sandbox.path();
        let staged = stage(root, req.software)?;

        let start = Instant::now();
        let mut cmd = Command::new("sh");
        #[cfg(unix)]
        std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
        let mut child = cmd
            .arg("-c")
            .arg(format!("exec 2>&1\n{}", req.command))
            .current_dir(root)
            .env("CAF_SECTION", req.section.to_string())
            .env("CAF_JOB", req.section.job.0.to_string())
            .env("CAF_SECTION_INDEX", req.section.index.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(setup_err)?;
        let stdout = child.stdout.take().expect("piped");
        let lines = Arc::new(Mutex::new(Vec::new()));
        let reader = {
            let lines = lines.clone();
            std::thread::spawn(move || {
                for l in BufReader::new(stdout).lines().map_while(Result::ok) {
                    lines.lock().expect("log lock").push(l);
                }
            })
        };

        let (status, timed_out) = loop {
            if let Some(status) = child.try_wait().map_err(setup_err)? {
                break (Some(status), false);
            }
            if start.elapsed() >= self.wall_limit {
                kill_group(&mut child);
                let _ = child.wait();
                break (None, true);
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        // A backgrounded grandchild may still hold the pipe; keep what was
        // read by then.
        let deadline = Instant::now() + Duration::from_secs(2);
        while !reader.is_finished() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        let log = std::mem::take(&mut *lines.lock().expect("log lock"));
        let files = collect(root, &staged).map_err(setup_err)?;
        if timed_out {
            return Err(ExecError::WallLimitExceeded { wall_ms, log, files });
        }
        let exit_code = status.and_then(|s| s.code()).unwrap_or(-1);
        Ok(ExecOutcome { exit_code, cpu_seconds: wall_ms as f64 / 1000.0, wall_ms, log, files })
    }
}
