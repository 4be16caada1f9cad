use super::*;
use alloc::vec;
use crate::auth::{issue_token, CertificateAuthority};
use crate::model::{ExecBackend, SimProfile, Value};

const ALICE: &str = "alice@CDF";
const BOB: &str = "bob@CDF";

fn key() -> RealmKey {
    RealmKey([7; 32])
}

fn portal() -> Portal {
    let id = IdentityMap::from_pairs([(ALICE, "/DC=org/DC=cdf/CN=alice"), (BOB, "/DC=org/DC=cdf/CN=bob")]).unwrap();
    let ca = CertificateAuthority::new("/CN=Test CA", [3; 32]);
    let grid = GridCredentials::from_ca(&ca, "test", &id, SimTime::from_secs(1_000_000), 43_200_000);
    Portal::new(PortalConfig::default(), key(), id, grid)
}

fn token(user: &str, at: SimTime) -> String {
    issue_token(user, at, 3_600_000, &key()).unwrap().encode()
}

fn spec(user: &str, n: u32, req: &str) -> JobSpec {
    JobSpec {
        user: user.into(),
        vo: "cdf".into(),
        n_sections: n,
        command: "run".into(),
        input_manifest_id: None,
        user_tarball_id: None,
        requirements_expr: req.into(),
        output_destination: format!("{user}:/out"),
        exec_backend: ExecBackend::Simulated,
        sim_profile: Some(SimProfile { duration_s: 60, log_lines: 5, output_bytes: 10, exit_code: 0 }),
    }
}

fn submit(p: &mut Portal, user: &str, n: u32, now: SimTime) -> JobId {
    p.submit_job(&token(user, now), spec(user, n, "Memory >= 2048"), now).unwrap()
}

/// A pilot at site S advertising Memory 4096.
fn advertising_pilot(p: &mut Portal, now: SimTime) -> PilotId {
    let (pid, _) = p.request_pilot(&SiteId::new("S"), now).unwrap();
    p.pilot_event(pid, PilotEvent::SiteAccepted, now).unwrap();
    p.pilot_event(pid, PilotEvent::SiteAccepted, now).unwrap();
    let mut ad = Attributes::new();
    ad.insert("Memory".into(), Value::Int(4096));
    p.pilot_booted(pid, ad, now).unwrap();
    pid
}

/// Drive a matched section to STAGING_OUT.
fn run_to_staging(p: &mut Portal, sid: SectionId, now: SimTime) {
    p.section_event(sid, SectionEvent::TransferStarted, now).unwrap();
    p.section_event(sid, SectionEvent::StageInDone, now).unwrap();
    p.section_event(sid, SectionEvent::ExecExited(0), now).unwrap();
}

fn ok(exit_code: i32) -> SectionResult {
    SectionResult { exit_code, cpu_seconds: 60.0, output: None }
}

#[test]
fn submit_creates_waiting_sections() {
    let mut p = portal();
    let id = submit(&mut p, ALICE, 10, SimTime::ZERO);
    assert_eq!(id, JobId(1));
    let rec = p.job(id).unwrap();
    assert_eq!(rec.sections.len(), 10);
    assert!(rec.sections.iter().all(|s| s.state == SectionState::Waiting));
    assert_eq!(submit(&mut p, ALICE, 1, SimTime::ZERO), JobId(2));
}

#[test]
fn submit_with_expired_token() {
    let mut p = portal();
    let t = token(ALICE, SimTime::ZERO);
    let err = p.submit_job(&t, spec(ALICE, 1, "true"), SimTime::from_secs(3600)).unwrap_err();
    assert_eq!(err, PortalError::AuthFailed(AuthError::TokenExpired));
    assert!(p.jobs().next().is_none());
}

#[test]
fn submit_with_truncated_requirements() {
    let mut p = portal();
    let err = p.submit_job(&token(ALICE, SimTime::ZERO), spec(ALICE, 1, "Memory >"), SimTime::ZERO).unwrap_err();
    let PortalError::RequirementsParse(e) = err else { panic!("{err:?}") };
    assert_eq!(e.column, 9);
}

#[test]
fn submit_for_someone_else() {
    let mut p = portal();
    let err = p.submit_job(&token(BOB, SimTime::ZERO), spec(ALICE, 1, "true"), SimTime::ZERO).unwrap_err();
    assert!(matches!(err, PortalError::PrincipalMismatch { .. }));
}

#[test]
fn negotiate_without_ads_is_empty() {
    let mut p = portal();
    submit(&mut p, ALICE, 5, SimTime::ZERO);
    assert!(p.negotiate(SimTime::ZERO).pairs.is_empty());
}

#[test]
fn low_usage_user_wins_the_slot() {
    let mut p = portal();
    let t0 = SimTime::ZERO;
    let hl = p.half_life_ms();
    p.usage.entry(ALICE.into()).or_default().add(100.0, t0, hl);
    let a = submit(&mut p, ALICE, 1, t0);
    let b = submit(&mut p, BOB, 1, t0);
    advertising_pilot(&mut p, t0);
    let out = p.negotiate(t0);
    assert_eq!(out.pairs.len(), 1);
    assert_eq!(out.pairs[0].0, SectionId::new(b, 0));
    assert_eq!(p.section(SectionId::new(a, 0)).unwrap().state, SectionState::Waiting);
    assert_eq!(p.section(SectionId::new(b, 0)).unwrap().attempts, 1);
}

#[test]
fn last_result_emits_one_summary() {
    let mut p = portal();
    let t0 = SimTime::ZERO;
    let job = submit(&mut p, ALICE, 10, t0);
    let pid = advertising_pilot(&mut p, t0);
    for i in 0..10 {
        let out = p.negotiate(t0);
        assert_eq!(out.pairs, vec![(SectionId::new(job, i), pid)]);
        let sid = SectionId::new(job, i);
        run_to_staging(&mut p, sid, t0);
        assert_eq!(p.record_section_result(sid, ok(0), SimTime::from_secs(60)).unwrap(), SectionState::Completed);
        assert_eq!(p.pilot(pid).unwrap().state, PilotState::Advertising);
    }
    assert_eq!(p.all_notifications()[ALICE].len(), 1);
    let s = &p.all_notifications()[ALICE][0];
    assert_eq!(s.sections.len(), 10);
    assert!(s.sections.iter().all(|o| o.state == SectionState::Completed));
    assert_eq!(p.ledger().len(), 10);
    p.check_invariants().unwrap();

    let dup = p.record_section_result(SectionId::new(job, 9), ok(0), SimTime::from_secs(61));
    assert!(matches!(dup, Err(PortalError::IllegalTransition(_))));
    assert_eq!(p.all_notifications()[ALICE].len(), 1);
}

#[test]
fn nonzero_exit_fails_without_retry() {
    let mut p = portal();
    let job = submit(&mut p, ALICE, 1, SimTime::ZERO);
    advertising_pilot(&mut p, SimTime::ZERO);
    p.negotiate(SimTime::ZERO);
    let sid = SectionId::new(job, 0);
    run_to_staging(&mut p, sid, SimTime::ZERO);
    assert_eq!(p.record_section_result(sid, ok(1), SimTime::ZERO).unwrap(), SectionState::FailedUser);
    assert_eq!(p.section(sid).unwrap().attempts, 1);
}

#[test]
fn lost_pilot_retries_until_exhausted() {
    let mut p = portal();
    let job = submit(&mut p, ALICE, 1, SimTime::ZERO);
    let sid = SectionId::new(job, 0);
    for attempt in 1..=3 {
        let pid = advertising_pilot(&mut p, SimTime::ZERO);
        p.negotiate(SimTime::ZERO);
        p.section_event(sid, SectionEvent::TransferStarted, SimTime::ZERO).unwrap();
        assert_eq!(p.pilot_lost(pid, SimTime::ZERO).unwrap(), Some(sid));
        let want = if attempt < 3 { SectionState::Waiting } else { SectionState::FailedInfra };
        assert_eq!(p.section(sid).unwrap().state, want);
    }
    assert_eq!(p.all_notifications()[ALICE].len(), 1);
    p.check_invariants().unwrap();
}

#[test]
fn kill_all_mixed_states() {
    let mut p = portal();
    let t0 = SimTime::ZERO;
    let job = submit(&mut p, ALICE, 3, t0);
    advertising_pilot(&mut p, t0);
    p.negotiate(t0);
    let running = SectionId::new(job, 0);
    p.section_event(running, SectionEvent::TransferStarted, t0).unwrap();
    p.section_event(running, SectionEvent::StageInDone, t0).unwrap();

    let ack = p.kill(&token(ALICE, t0), job, &KillSelector::All, t0).unwrap();
    assert_eq!(ack.killed, vec![1, 2]);
    assert_eq!(ack.forwarded.len(), 1);
    assert_eq!(ack.forwarded[0].index, 0);
    assert_eq!(p.section(running).unwrap().state, SectionState::Running);
    assert_eq!(p.next_kill_deadline(), Some(SimTime::from_secs(120)));

    assert!(p.enforce_kill_deadlines(SimTime::from_secs(119)).is_empty());
    assert_eq!(p.enforce_kill_deadlines(SimTime::from_secs(120)), vec![running]);
    assert_eq!(p.section(running).unwrap().state, SectionState::Killed);
    assert_eq!(p.all_notifications()[ALICE].len(), 1);
    p.check_invariants().unwrap();
}

#[test]
fn kill_acknowledged_before_deadline() {
    let mut p = portal();
    let t0 = SimTime::ZERO;
    let job = submit(&mut p, ALICE, 1, t0);
    let pid = advertising_pilot(&mut p, t0);
    p.negotiate(t0);
    let sid = SectionId::new(job, 0);
    p.section_event(sid, SectionEvent::TransferStarted, t0).unwrap();
    p.section_event(sid, SectionEvent::StageInDone, t0).unwrap();
    assert!(p.kill_acknowledged(sid, 1.0, None, t0).is_err());
    p.kill(&token(ALICE, t0), job, &KillSelector::All, t0).unwrap();
    let out = p.spool_output(b"partial".to_vec());
    p.kill_acknowledged(sid, 12.5, Some(out.clone()), SimTime::from_secs(30)).unwrap();
    assert_eq!(p.section(sid).unwrap().state, SectionState::Killed);
    assert_eq!(p.section(sid).unwrap().cpu_seconds, 12.5);
    assert_eq!(p.output_of(sid), Some(&out));
    assert_eq!(p.pilot(pid).unwrap().state, PilotState::Advertising);
}

#[test]
fn kill_one_section_only() {
    let mut p = portal();
    let job = submit(&mut p, ALICE, 10, SimTime::ZERO);
    let ack = p.kill(&token(ALICE, SimTime::ZERO), job, &KillSelector::Sections(vec![3]), SimTime::ZERO).unwrap();
    assert_eq!(ack.killed, vec![3]);
    for (i, s) in p.job(job).unwrap().sections.iter().enumerate() {
        let want = if i == 3 { SectionState::Killed } else { SectionState::Waiting };
        assert_eq!(s.state, want);
    }
}

#[test]
fn kill_by_other_user() {
    let mut p = portal();
    let job = submit(&mut p, ALICE, 1, SimTime::ZERO);
    let err = p.kill(&token(BOB, SimTime::ZERO), job, &KillSelector::All, SimTime::ZERO).unwrap_err();
    assert_eq!(err, PortalError::NotOwner(BOB.into(), job));
    let err = p.kill(&token(BOB, SimTime::ZERO), JobId(99), &KillSelector::All, SimTime::ZERO).unwrap_err();
    assert_eq!(err, PortalError::UnknownJob(JobId(99)));
}

#[test]
fn selector_json() {
    assert_eq!(serde_json::to_string(&KillSelector::All).unwrap(), "\"ALL\"");
    assert_eq!(serde_json::from_str::<KillSelector>("[3,1]").unwrap(), KillSelector::Sections(vec![3, 1]));
    assert!(serde_json::from_str::<KillSelector>("\"SOME\"").is_err());
}

fn finished_job(p: &mut Portal, n: u32) -> JobId {
    let t0 = SimTime::ZERO;
    let job = submit(p, ALICE, n, t0);
    advertising_pilot(p, t0);
    for i in 0..n {
        p.negotiate(t0);
        let sid = SectionId::new(job, i);
        run_to_staging(p, sid, t0);
        let out = p.spool_output(format!("archive {i}").into_bytes());
        p.record_section_result(sid, SectionResult { exit_code: 0, cpu_seconds: 1.0, output: Some(out) }, t0).unwrap();
    }
    job
}

#[test]
fn deliver_ten_archives() {
    let mut p = portal();
    let job = finished_job(&mut p, 10);
    let mut sink = MemorySink::default();
    let r = p.deliver_output(&token(ALICE, SimTime::ZERO), job, None, &mut sink, SimTime::ZERO).unwrap();
    assert_eq!(r.archive_count, 10);
    assert_eq!(sink.files.len(), 10);
    assert_eq!(r.bytes, sink.files.values().map(|v| v.len() as u64).sum::<u64>());
    // idempotent
    let again = p.deliver_output(&token(ALICE, SimTime::ZERO), job, None, &mut sink, SimTime::ZERO).unwrap();
    assert_eq!(again, r);
    assert_eq!(sink.files.len(), 10);
}

#[test]
fn deliver_before_finish() {
    let mut p = portal();
    let job = submit(&mut p, ALICE, 2, SimTime::ZERO);
    let mut sink = MemorySink::default();
    let err = p.deliver_output(&token(ALICE, SimTime::ZERO), job, None, &mut sink, SimTime::ZERO).unwrap_err();
    assert_eq!(err, PortalError::JobNotFinished(job));
}

#[test]
fn deliver_to_unreachable_destination() {
    let mut p = portal();
    let job = finished_job(&mut p, 2);
    let mut sink = MemorySink::default();
    sink.unreachable.insert("nowhere".into());
    let err = p.deliver_output(&token(ALICE, SimTime::ZERO), job, Some("nowhere"), &mut sink, SimTime::ZERO).unwrap_err();
    assert!(matches!(err, PortalError::DestinationUnreachable(_)));
    assert!(sink.files.is_empty());
    assert!(p.output_of(SectionId::new(job, 0)).is_some());
}

#[test]
fn usage_decays_by_half_life() {
    let mut u = DecayedUsage::default();
    u.add(100.0, SimTime::ZERO, 3_600_000);
    assert!((u.at(SimTime::from_secs(3600), 3_600_000) - 50.0).abs() < 1e-9);
    u.add(50.0, SimTime::from_secs(3600), 3_600_000);
    assert!((u.at(SimTime::from_secs(7200), 3_600_000) - 50.0).abs() < 1e-9);
}

#[test]
fn job_view_counts_states() {
    let mut p = portal();
    let job = submit(&mut p, ALICE, 4, SimTime::ZERO);
    p.kill(&token(ALICE, SimTime::ZERO), job, &KillSelector::Sections(vec![0]), SimTime::ZERO).unwrap();
    let v = p.job_view(job, SimTime::ZERO).unwrap();
    assert_eq!(v.states["WAITING"], 3);
    assert_eq!(v.states["KILLED"], 1);
    assert!(!v.finished);
}
