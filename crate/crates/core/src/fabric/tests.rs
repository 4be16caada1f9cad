use super::*;
use crate::archive::unpack_map;
use crate::model::SimProfile;
use alloc::vec;

fn attrs(site: &str, flavor: Flavor) -> crate::model::Attributes {
    let mut a = crate::model::Attributes::new();
    a.insert("Site".into(), Value::Str(site.into()));
    a.insert("Memory".into(), Value::Int(4096));
    a.insert("Arch".into(), Value::Str("x86_64".into()));
    let f = if flavor == Flavor::Direct { "OSG" } else { "EGEE" };
    a.insert("GridFlavor".into(), Value::Str(f.into()));
    a
}

fn site(id: &str, flavor: Flavor, n: u32) -> SiteConfig {
    SiteConfig {
        site_id: crate::model::SiteId::new(id),
        flavor,
        n_workers: n,
        attribute_template: attrs(id, flavor),
        queue_latency: LatencyRange { min_s: 10, max_s: 60 },
        pilot_drop_prob: 0.0,
        worker_crash_prob: 0.0,
        preempt_rate_per_hour: 0.0,
        proxy_url: None,
        cache_capacity_bytes: None,
        max_pilots: None,
    }
}

fn job(n: u32, duration_s: u64) -> ScenarioJob {
    ScenarioJob {
        submit_at: 0,
        spec: JobSpec {
            user: "alice@CDF".into(),
            vo: "cdf".into(),
            n_sections: n,
            command: "analyze".into(),
            input_manifest_id: None,
            user_tarball_id: None,
            requirements_expr: "Memory >= 2048".into(),
            output_destination: "alice:/out".into(),
            exec_backend: ExecBackend::Simulated,
            sim_profile: Some(SimProfile { duration_s, log_lines: 20, output_bytes: 4096, exit_code: 0 }),
        },
    }
}

fn scenario(sites: Vec<SiteConfig>, jobs: Vec<ScenarioJob>) -> Scenario {
    Scenario {
        seed: 42,
        t_end: 7200,
        sites,
        jobs,
        kills: Vec::new(),
        identity: BTreeMap::new(),
        portal: PortalConfig::default(),
        grid_credential_lifetime_s: None,
        artifacts: Vec::new(),
    }
}

fn run(sc: &Scenario) -> World {
    let mut w = World::from_scenario(sc).unwrap();
    w.run_until(SimTime::from_secs(sc.t_end));
    w
}

fn states(w: &World, job: u64) -> Vec<SectionState> {
    w.portal().job(JobId(job)).unwrap().sections.iter().map(|s| s.state).collect()
}

#[test]
fn empty_world_just_advances_the_clock() {
    let mut w = World::from_scenario(&scenario(vec![], vec![])).unwrap();
    w.run_until(SimTime::from_secs(100));
    assert!(w.trace().is_empty());
    assert_eq!(w.now(), SimTime::from_secs(100));
}

#[test]
fn mixed_sites_complete_a_job_deterministically() {
    let sc = scenario(vec![site("DIRECT1", Flavor::Direct, 8), site("WMS1", Flavor::Brokered, 4)], vec![job(10, 300)]);
    let w = run(&sc);
    assert!(states(&w, 1).iter().all(|s| *s == SectionState::Completed));
    assert_eq!(w.portal().all_notifications()["alice@CDF"].len(), 1);
    for i in 0..10 {
        let id = w.portal().output_of(SectionId::new(JobId(1), i)).unwrap();
        let files = unpack_map(w.portal().spooled(id).unwrap()).unwrap();
        assert_eq!(files[exec::SECTION_LOG].data.iter().filter(|&&b| b == b'\n').count(), 20);
        assert_eq!(files[exec::OUTPUT_FILE].data.len(), 4096);
    }
    w.portal().check_invariants().unwrap();
    assert_eq!(w.trace_json_lines(), run(&sc).trace_json_lines());
}

#[test]
fn brokered_sections_run_without_pilots() {
    let w = run(&scenario(vec![site("WMS1", Flavor::Brokered, 2)], vec![job(5, 60)]));
    assert!(states(&w, 1).iter().all(|s| *s == SectionState::Completed));
    assert_eq!(w.portal().pilots().count(), 0);
    assert!(w.trace().iter().any(|r| matches!(r.event, TraceEvent::Brokered { .. })));
}

#[test]
fn capacity_is_never_exceeded() {
    let sc = scenario(vec![site("D", Flavor::Direct, 3), site("B", Flavor::Brokered, 2)], vec![job(12, 120)]);
    let mut w = World::from_scenario(&sc).unwrap();
    for t in (0..=sc.t_end).step_by(5) {
        w.run_until(SimTime::from_secs(t));
        for i in 0..w.sites().len() {
            assert!(w.busy_workers(i) <= w.sites()[i].config.n_workers, "site {i} at {t}s");
        }
        w.portal().check_invariants().unwrap();
    }
    assert!(states(&w, 1).iter().all(|s| *s == SectionState::Completed));
}

#[test]
fn crashing_workers_exhaust_retries() {
    let mut s = site("D", Flavor::Direct, 2);
    s.worker_crash_prob = 1.0;
    let w = run(&scenario(vec![s], vec![job(2, 60)]));
    for sid in [SectionId::new(JobId(1), 0), SectionId::new(JobId(1), 1)] {
        let sec = w.portal().section(sid).unwrap();
        assert_eq!(sec.state, SectionState::FailedInfra);
        assert_eq!(sec.attempts, 3);
    }
}

#[test]
fn dropped_pilots_never_boot() {
    let mut s = site("D", Flavor::Direct, 2);
    s.pilot_drop_prob = 1.0;
    let mut sc = scenario(vec![s], vec![job(1, 60)]);
    sc.t_end = 600;
    let w = run(&sc);
    assert!(w.portal().pilots().count() > 0);
    assert!(w.portal().pilots().all(|p| p.state == PilotState::Failed));
    assert_eq!(states(&w, 1), vec![SectionState::Waiting]);
}

#[test]
fn expired_grid_credential_stops_provisioning() {
    let mut sc = scenario(vec![site("D", Flavor::Direct, 2)], vec![job(1, 60)]);
    sc.grid_credential_lifetime_s = Some(0);
    sc.t_end = 60;
    let w = run(&sc);
    assert_eq!(w.portal().pilots().count(), 0);
    assert!(w.trace().iter().any(|r| matches!(r.event, TraceEvent::ProxyExpired { .. })));
}

#[test]
fn kill_of_running_section_ships_partial_log() {
    let mut sc = scenario(vec![site("D", Flavor::Direct, 1)], vec![job(1, 3600)]);
    sc.kills.push(ScenarioKill { at: 600, job: 1, selector: KillSelector::All, user: None });
    let w = run(&sc);
    let sid = SectionId::new(JobId(1), 0);
    let sec = w.portal().section(sid).unwrap();
    assert_eq!(sec.state, SectionState::Killed);
    assert!(sec.end_time.unwrap() <= SimTime::from_secs(720));
    let files = unpack_map(w.portal().spooled(w.portal().output_of(sid).unwrap()).unwrap()).unwrap();
    let lines = files[exec::SECTION_LOG].data.iter().filter(|&&b| b == b'\n').count();
    assert!(lines > 0 && lines < 20, "{lines} lines");
}

#[test]
fn kill_by_stranger_is_refused() {
    let mut sc = scenario(vec![site("D", Flavor::Direct, 1)], vec![job(1, 60)]);
    sc.identity.insert("bob@CDF".into(), "/DC=org/DC=cdf/CN=bob".into());
    sc.kills.push(ScenarioKill { at: 1, job: 1, selector: KillSelector::All, user: Some("bob@CDF".into()) });
    let w = run(&sc);
    assert!(matches!(w.kill_acks()[0], Err(PortalError::NotOwner(..))));
    assert_eq!(states(&w, 1), vec![SectionState::Completed]);
}

#[test]
fn scenario_json_round_trip() {
    let sc = scenario(vec![site("D", Flavor::Direct, 1)], vec![job(1, 60)]);
    let text = serde_json::to_string(&sc).unwrap();
    assert!(text.contains("\"queue_latency_dist\""));
    assert_eq!(serde_json::from_str::<Scenario>(&text).unwrap(), sc);
}
