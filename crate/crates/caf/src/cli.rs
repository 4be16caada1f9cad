//! The `caf` command: user subcommands against a portal, offline scenario
//! runs, and the servers.
//!
//! Exit codes: 0 success, 1 user error, 2 portal or transport error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use caf_core::model::{JobId, JobSpec, SectionId};
use caf_core::monitoring::{FileInfo, TailView};
use caf_core::portal::{JobSummary, JobView, KillAck, KillSelector, Receipt, ReportRow};
use caf_core::SimTime;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::api::{DeliverRequest, KillRequest, PortalService, Pace, SubmitRequest, SubmitResponse};
use crate::client::{encode, Answer, ClientError, PortalClient};
use crate::http::{artifact_handler, HttpServer, HttpUpstream};
use crate::proxy::{CachingProxy, Origin};
use crate::scenario::{build_world, load_scenario, read_summary, run_scenario, write_run};
use crate::sink::DirSink;

pub const DEFAULT_PORTAL: &str = "http://127.0.0.1:8080";

#[derive(Parser, Debug)]
#[command(name = "caf", version, about = "Submit, monitor and kill portal jobs; run grid scenarios offline")]
struct Cli {
    /// Print the raw API body instead of a table.
    #[arg(long, global = true)]
    json: bool,
    /// Portal base URL; CAF_PORTAL takes precedence.
    #[arg(long, global = true)]
    portal: Option<String>,
    /// File holding the user token; CAF_TOKEN takes precedence.
    #[arg(long, global = true)]
    token_file: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Submit a job spec.
    Submit {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    /// Show a job and its section table.
    Status { job: u64 },
    /// Last lines of a section's log.
    Tail {
        job: u64,
        section: u32,
        #[arg(short = 'n', default_value_t = 20)]
        lines: usize,
    },
    /// Remote working directory of a section.
    Ls { job: u64, section: u32 },
    /// Kill a whole job or some of its sections.
    Kill {
        job: u64,
        #[arg(long, value_delimiter = ',')]
        sections: Option<Vec<u32>>,
    },
    /// Deliver a finished job's output archives.
    Fetch {
        job: u64,
        #[arg(long)]
        dest: Option<String>,
    },
    /// List completion notices for the token's user.
    Notifications,
    /// Offline scenario runs.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// Serve the portal API over a simulated world.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Sim seconds per wall second.
        #[arg(long, default_value_t = 60.0)]
        speed: f64,
        /// Write `<principal>.token` for every known user here.
        #[arg(long)]
        token_dir: Option<PathBuf>,
    },
    /// Serve every file of a directory as a content-addressed artifact.
    Origin {
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8081")]
        addr: String,
    },
    /// Run a caching proxy in front of an origin or another proxy.
    Proxy {
        #[arg(long)]
        upstream: String,
        #[arg(long, default_value_t = 1 << 30)]
        capacity: u64,
        #[arg(long, default_value = "127.0.0.1:8082")]
        addr: String,
    },
}

#[derive(Subcommand, Debug)]
enum SimCmd {
    /// Run a scenario to its end (or `--until`, in seconds).
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        until: Option<u64>,
        /// Where the trace and summary go.
        #[arg(long, default_value = "caf-sim")]
        out: PathBuf,
        /// Deliver finished jobs' output to their destinations.
        #[arg(long)]
        deliver: bool,
    },
    /// Accounting report of the last run in `--out`.
    Report {
        #[arg(long, default_value = "caf-sim")]
        out: PathBuf,
    },
}

/// Environment the CLI reads; kept explicit so tests need not touch the
/// process environment.
#[derive(Clone, Debug, Default)]
pub struct CliEnv {
    pub portal: Option<String>,
    pub token_path: Option<PathBuf>,
}

impl CliEnv {
    pub fn from_process() -> Self {
        CliEnv {
            portal: std::env::var("CAF_PORTAL").ok().filter(|s| !s.is_empty()),
            token_path: std::env::var_os("CAF_TOKEN").filter(|s| !s.is_empty()).map(PathBuf::from),
        }
    }
}

#[derive(Debug)]
enum Fail {
    User(String),
    Portal(String),
}

impl From<ClientError> for Fail {
    fn from(e: ClientError) -> Self {
        if e.is_user_error() {
            Fail::User(e.to_string())
        } else {
            Fail::Portal(e.to_string())
        }
    }
}

struct Ctx<'a> {
    json: bool,
    portal: Option<String>,
    token_path: Option<PathBuf>,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn client(&self) -> Result<PortalClient, Fail> {
        let url = self.portal.as_deref().unwrap_or(DEFAULT_PORTAL);
        let well_formed = ["http://", "https://"]
            .iter()
            .any(|p| url.strip_prefix(p).is_some_and(|rest| !rest.is_empty() && !rest.starts_with('/')));
        if !well_formed {
            return Err(Fail::User(format!("portal URL {url:?} is not an http(s) URL")));
        }
        Ok(PortalClient::new(url))
    }

    fn token(&self) -> Result<String, Fail> {
        let path = self.token_path.as_ref().ok_or_else(|| Fail::User("no token: set CAF_TOKEN or pass --token-file".into()))?;
        let text = fs::read_to_string(path).map_err(|e| Fail::User(format!("{}: {e}", path.display())))?;
        Ok(text.trim().to_string())
    }

    fn emit<T>(&mut self, answer: &Answer<T>, table: impl FnOnce(&T) -> String) -> Result<(), Fail> {
        let text = if self.json { answer.raw.clone() } else { table(&answer.value) };
        self.line(&text)
    }

    fn emit_value<T: Serialize>(&mut self, value: &T, table: impl FnOnce(&T) -> String) -> Result<(), Fail> {
        let text = if self.json { serde_json::to_string(value).expect("serializable") } else { table(value) };
        self.line(&text)
    }

    fn line(&mut self, text: &str) -> Result<(), Fail> {
        writeln!(self.out, "{}", text.trim_end_matches('\n')).map_err(|e| Fail::Portal(e.to_string()))
    }
}

/// Parse `argv` (program name first) and run it.
pub fn run_command<I, T>(argv: I, env: &CliEnv, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let mut ctx = Ctx {
        json: cli.json,
        portal: env.portal.clone().or(cli.portal),
        token_path: env.token_path.clone().or(cli.token_file),
        out,
    };
    match dispatch(cli.cmd, &mut ctx) {
        Ok(()) => 0,
        Err(Fail::User(m)) => {
            let _ = writeln!(err, "caf: {m}");
            1
        }
        Err(Fail::Portal(m)) => {
            let _ = writeln!(err, "caf: {m}");
            2
        }
    }
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, Fail> {
    let bytes = fs::read(path).map_err(|e| Fail::User(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Fail::User(format!("{}: {e}", path.display())))
}

fn dispatch(cmd: Cmd, ctx: &mut Ctx<'_>) -> Result<(), Fail> {
    match cmd {
        Cmd::Submit { file } => {
            let spec: JobSpec = read_json(&file)?;
            let token = ctx.token()?;
            let a: Answer<SubmitResponse> = ctx.client()?.post("/api/v1/jobs", &SubmitRequest { spec, token })?;
            ctx.emit(&a, |r| format!("submitted job {}", r.job_id))
        }
        Cmd::Status { job } => {
            let a: Answer<JobView> = ctx.client()?.get(&format!("/api/v1/jobs/{job}"))?;
            ctx.emit(&a, render_job)
        }
        Cmd::Tail { job, section, lines } => {
            let sid = SectionId::new(JobId(job), section);
            let a: Answer<TailView> = ctx.client()?.get(&format!("/api/v1/sections/{sid}/tail?lines={lines}"))?;
            ctx.emit(&a, |t| {
                let mut s: String = t.lines.iter().map(|l| format!("{}\n", l.text)).collect();
                if t.stale {
                    s.push_str("(no recent heartbeat)\n");
                }
                s
            })
        }
        Cmd::Ls { job, section } => {
            let sid = SectionId::new(JobId(job), section);
            let a: Answer<Vec<FileInfo>> = ctx.client()?.get(&format!("/api/v1/sections/{sid}/ls"))?;
            ctx.emit(&a, |files| files.iter().map(|f| format!("{:>10}  {}\n", f.size, f.path)).collect())
        }
        Cmd::Kill { job, sections } => {
            let selector = sections.map_or(KillSelector::All, KillSelector::Sections);
            let token = ctx.token()?;
            let a: Answer<KillAck> = ctx.client()?.post(&format!("/api/v1/jobs/{job}/kill"), &KillRequest { selector, token })?;
            ctx.emit(&a, render_kill)
        }
        Cmd::Fetch { job, dest } => {
            let token = ctx.token()?;
            let a: Answer<Receipt> =
                ctx.client()?.post(&format!("/api/v1/jobs/{job}/deliver"), &DeliverRequest { destination: dest, token })?;
            ctx.emit(&a, |r| format!("delivered {} archives, {} bytes", r.archive_count, r.bytes))
        }
        Cmd::Notifications => {
            let token = ctx.token()?;
            let a: Answer<Vec<JobSummary>> = ctx.client()?.get(&format!("/api/v1/notifications?token={}", encode(&token)))?;
            ctx.emit(&a, |ns| {
                ns.iter()
                    .map(|n| format!("job {} finished at {:.0}s, {} archives -> {}\n", n.job_id, n.finished_at.as_secs_f64(), n.output_archive_ids.len(), n.destination))
                    .collect()
            })
        }
        Cmd::Sim { cmd: SimCmd::Run { scenario, seed, until, out, deliver } } => {
            let mut sc = load_scenario(&scenario).map_err(|e| Fail::User(e.to_string()))?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let (mut world, summary) = run_scenario(&sc, until.map(SimTime::from_secs)).map_err(|e| Fail::User(e.to_string()))?;
            write_run(&out, &world, &summary).map_err(|e| Fail::User(format!("{}: {e}", out.display())))?;
            if deliver {
                for view in summary.jobs.iter().filter(|v| v.finished) {
                    let token = world.issue_token(&view.user, 60_000).map_err(|e| Fail::User(e.to_string()))?;
                    let now = world.now();
                    world
                        .portal_mut()
                        .deliver_output(&token, view.job_id, None, &mut DirSink, now)
                        .map_err(|e| if e.is_user_error() { Fail::User(e.to_string()) } else { Fail::Portal(e.to_string()) })?;
                }
            }
            ctx.emit_value(&summary, |s| {
                let mut text = format!("seed {}  until {:.0}s  trace records {}\n", s.seed, s.until.as_secs_f64(), s.trace_records);
                for v in &s.jobs {
                    text.push_str(&render_job(v));
                }
                for r in &s.rejected {
                    text.push_str(&format!("rejected: {r}\n"));
                }
                text
            })
        }
        Cmd::Sim { cmd: SimCmd::Report { out } } => {
            let summary = read_summary(&out).map_err(|e| Fail::User(e.to_string()))?;
            ctx.emit_value(&summary.accounting, |rows| render_report(rows))
        }
        Cmd::Serve { scenario, addr, speed, token_dir } => {
            let sc = load_scenario(&scenario).map_err(|e| Fail::User(e.to_string()))?;
            let world = build_world(&sc).map_err(|e| Fail::User(e.to_string()))?;
            if let Some(dir) = token_dir {
                fs::create_dir_all(&dir).map_err(|e| Fail::User(e.to_string()))?;
                let mut users: Vec<&String> = sc.identity.keys().chain(sc.jobs.iter().map(|j| &j.spec.user)).collect();
                users.sort();
                users.dedup();
                for u in users {
                    let token = world.issue_token(u, 30 * 86_400_000).map_err(|e| Fail::User(e.to_string()))?;
                    fs::write(dir.join(format!("{u}.token")), token).map_err(|e| Fail::User(e.to_string()))?;
                }
            }
            let running = PortalService::new(world, DirSink).serve(&addr, Pace::Scaled(speed)).map_err(|e| Fail::Portal(e.to_string()))?;
            ctx.line(&format!("portal listening on {}", running.url()))?;
            running.join();
            Ok(())
        }
        Cmd::Origin { dir, addr } => {
            let origin = Origin::new();
            let mut entries: Vec<_> = fs::read_dir(&dir).map_err(|e| Fail::User(format!("{}: {e}", dir.display())))?.flatten().collect();
            entries.sort_by_key(|e| e.path());
            for e in entries.into_iter().filter(|e| e.path().is_file()) {
                let bytes = fs::read(e.path()).map_err(|err| Fail::User(err.to_string()))?;
                let id = origin.put(bytes);
                ctx.line(&format!("{}  {}", id, e.file_name().to_string_lossy()))?;
            }
            let server = HttpServer::start(&addr, 4, artifact_handler(origin)).map_err(|e| Fail::Portal(e.to_string()))?;
            ctx.line(&format!("origin listening on {}", server.url()))?;
            server.join();
            Ok(())
        }
        Cmd::Proxy { upstream, capacity, addr } => {
            let proxy = CachingProxy::new(HttpUpstream::new(upstream), capacity);
            let server = HttpServer::start(&addr, 8, artifact_handler(proxy)).map_err(|e| Fail::Portal(e.to_string()))?;
            ctx.line(&format!("proxy listening on {}", server.url()))?;
            server.join();
            Ok(())
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".into(), ToString::to_string)
}

pub fn render_job(v: &JobView) -> String {
    let states: Vec<String> = v.states.iter().map(|(k, n)| format!("{k}={n}")).collect();
    let mut s = format!(
        "job {}  user {}  vo {}  sections {}  {}\n  {}\n",
        v.job_id,
        v.user,
        v.vo,
        v.n_sections,
        if v.finished { "finished" } else { "running" },
        states.join(" ")
    );
    s.push_str(&format!("  {:>7}  {:<12} {:>8}  {:<10} {:>8}  {:>4}\n", "SECTION", "STATE", "ATTEMPTS", "SITE", "CPU(s)", "EXIT"));
    for r in &v.sections {
        let mut state = r.state.to_string();
        if r.kill_pending {
            state.push('*');
        }
        s.push_str(&format!(
            "  {:>7}  {:<12} {:>8}  {:<10} {:>8.0}  {:>4}\n",
            r.index,
            state,
            r.attempts,
            opt(&r.site),
            r.cpu_seconds,
            opt(&r.exit_code)
        ));
    }
    s
}

fn render_kill(a: &KillAck) -> String {
    let list = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    let forwarded: Vec<u32> = a.forwarded.iter().map(|f| f.index).collect();
    format!(
        "job {}: killed [{}]  forwarded [{}]  already terminal [{}]",
        a.job,
        list(&a.killed),
        list(&forwarded),
        list(&a.already_terminal)
    )
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut s = format!("{:<12} {:>14} {:>7}\n", "VO", "CPU(s)", "SHARE");
    for r in rows {
        s.push_str(&format!("{:<12} {:>14.0} {:>6.1}%\n", r.vo, r.cpu_seconds, r.share_percent));
    }
    s
}
