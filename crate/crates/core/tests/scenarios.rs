use std::sync::Arc;

use cowork_core::annotations::AnnotationPolicy;
use cowork_core::event::replay;
use cowork_core::{
    ConflictKind, Coordinator, CoordinatorConfig, Error, EventKind, EventLog, ManualClock, OpenSession, RefreshStatus,
    StaleEntry, TargetDiff, Workspace, WriteOutcome, WriteRequest,
};

struct Fixture {
    clock: Arc<ManualClock>,
    co: Coordinator,
}

fn fixture_with(files: &[(&str, &str)], config: CoordinatorConfig) -> Fixture {
    let clock = Arc::new(ManualClock::new(0));
    let ws = Workspace::init(
        files.iter().map(|(p, c)| (p.to_string(), c.as_bytes().to_vec())),
        EventLog::in_memory(),
        clock.clone(),
    )
    .unwrap();
    Fixture {
        clock,
        co: Coordinator::new(ws, config),
    }
}

fn fixture(files: &[(&str, &str)]) -> Fixture {
    fixture_with(
        files,
        CoordinatorConfig {
            reservation_ttl: 10,
            ..Default::default()
        },
    )
}

fn open(co: &Coordinator, author: &str) -> String {
    co.open_session(OpenSession {
        author: Some(author.into()),
        ..Default::default()
    })
    .unwrap()
}

fn write(co: &Coordinator, s: &str, path: &str, content: &str) -> WriteOutcome {
    let expected = co.snapshot(s).unwrap().get(path).unwrap_or_else(|| co.with_workspace(|w| w.version(path)));
    co.submit_write(WriteRequest {
        session_id: s.into(),
        path: path.into(),
        new_content: Arc::from(content.as_bytes()),
        expected_version: expected,
    })
    .unwrap()
}

fn accepted(o: &WriteOutcome) -> u64 {
    match o {
        WriteOutcome::Accepted { new_version } => *new_version,
        WriteOutcome::Rejected(r) => panic!("unexpected rejection: {:?}", r.kind),
    }
}

#[test]
fn sessions_start_empty_and_distinct() {
    let f = fixture(&[("a.py", "a\n")]);
    let s1 = open(&f.co, "e1");
    let s2 = open(&f.co, "e2");
    assert_ne!(s1, s2);
    assert!(f.co.snapshot(&s1).unwrap().is_empty());
    f.co.read(&s1, "a.py").unwrap();
    assert_eq!(f.co.snapshot(&s1).unwrap().get("a.py"), Some(1));
}

#[test]
fn reads_record_and_overwrite_observations() {
    let f = fixture(&[("a.py", "1"), ("b.py", "1"), ("c.py", "1")]);
    let a = open(&f.co, "e1");
    let b = open(&f.co, "e2");
    f.co.read(&b, "a.py").unwrap();
    accepted(&write(&f.co, &b, "a.py", "2"));
    let (_, v) = f.co.read(&a, "a.py").unwrap();
    assert_eq!(v, 2);
    assert_eq!(f.co.snapshot(&a).unwrap().get("a.py"), Some(2));

    accepted(&write(&f.co, &b, "a.py", "3"));
    f.co.read(&a, "a.py").unwrap();
    assert_eq!(f.co.snapshot(&a).unwrap().get("a.py"), Some(3));

    for p in ["a.py", "b.py", "c.py"] {
        f.co.read(&a, p).unwrap();
    }
    let snap = f.co.snapshot(&a).unwrap();
    assert_eq!(snap.len(), 3);
    for (p, v) in snap.iter() {
        assert_eq!(v, f.co.with_workspace(|w| w.version(p)));
    }
}

#[test]
fn read_of_missing_path_leaves_snapshot() {
    let f = fixture(&[]);
    let s = open(&f.co, "e1");
    assert!(matches!(f.co.read(&s, "nope.py"), Err(Error::NotFound(_))));
    assert!(f.co.snapshot(&s).unwrap().is_empty());
}

#[test]
fn read_is_idempotent_without_writes() {
    let f = fixture(&[("a.py", "x")]);
    let s = open(&f.co, "e1");
    assert_eq!(f.co.read(&s, "a.py").unwrap(), f.co.read(&s, "a.py").unwrap());
}

#[test]
fn direct_conflict_carries_diff_and_reservation() {
    let f = fixture(&[("f.py", "line1\nline2\n")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&b, "f.py").unwrap();
    assert_eq!(accepted(&write(&f.co, &a, "f.py", "line1\nchanged by A\n")), 2);

    let out = write(&f.co, &b, "f.py", "line1\nchanged by B\n");
    let r = out.conflict().expect("rejected");
    assert_eq!(r.kind, ConflictKind::Direct);
    assert_eq!(
        r.stale,
        [StaleEntry {
            path: "f.py".into(),
            observed_version: 1,
            current_version: 2
        }]
    );
    assert_eq!(&r.current_target_content[..], b"line1\nchanged by A\n");
    let Some(TargetDiff::Unified(d)) = &r.target_diff else {
        panic!("no diff")
    };
    assert!(d.contains("-line2\n") && d.contains("+changed by A\n"), "{d}");
    assert_eq!(r.reservation.as_ref().unwrap().holder, b);

    // B's rejection blocks A until B commits.
    let held = write(&f.co, &a, "f.py", "A again\n");
    let h = held.conflict().unwrap();
    assert_eq!(h.kind, ConflictKind::ReservationHeld);
    assert_eq!(h.blocking.as_ref().unwrap().holder, b);
    assert!(h.reservation.is_none());
    assert!(h.target_diff.is_none());

    f.co.refresh(&b, ["f.py"]).unwrap();
    assert_eq!(accepted(&write(&f.co, &b, "f.py", "merged\n")), 3);
    assert!(f.co.reservation_status("f.py").unwrap().is_none());
    let kinds: Vec<_> = f.co.events().iter().map(|e| e.kind).collect();
    assert!(kinds.contains(&EventKind::ReservationGranted));
    let released = f.co.events().into_iter().find(|e| e.kind == EventKind::ReservationReleased).unwrap();
    assert_eq!(released.detail.reason.as_deref(), Some("consumed"));
}

#[test]
fn stale_dependency_reserves_the_target() {
    let f = fixture(&[("f.py", "f"), ("g.py", "g")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&a, "g.py").unwrap();
    f.co.read(&b, "g.py").unwrap();
    accepted(&write(&f.co, &b, "g.py", "g2"));

    let out = write(&f.co, &a, "f.py", "f2");
    let r = out.conflict().unwrap();
    assert_eq!(r.kind, ConflictKind::StaleDependency);
    assert_eq!(
        r.stale,
        [StaleEntry {
            path: "g.py".into(),
            observed_version: 1,
            current_version: 2
        }]
    );
    assert!(r.target_diff.is_none());
    let res = r.reservation.as_ref().unwrap();
    assert_eq!((res.path.as_str(), res.holder.as_str()), ("f.py", a.as_str()));
    assert_eq!(f.co.reservation_status("f.py").unwrap().unwrap().0.holder, a);
    assert!(f.co.reservation_status("g.py").unwrap().is_none());
}

#[test]
fn refresh_then_retry_is_accepted() {
    let f = fixture(&[("f.py", "f"), ("g.py", "g")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&a, "g.py").unwrap();
    f.co.read(&b, "g.py").unwrap();
    for i in 0..4 {
        accepted(&write(&f.co, &b, "g.py", &format!("g{i}")));
    }
    let out = write(&f.co, &a, "f.py", "f2");
    let stale: Vec<String> = out.conflict().unwrap().stale.iter().map(|s| s.path.clone()).collect();

    let refreshed = f.co.refresh(&a, stale.iter().map(String::as_str)).unwrap();
    assert_eq!(refreshed, [("g.py".to_string(), RefreshStatus::Current(5))]);
    // Refreshing a current entry is a no-op that still succeeds.
    assert_eq!(f.co.refresh(&a, ["g.py"]).unwrap()[0].1, RefreshStatus::Current(5));
    assert_eq!(accepted(&write(&f.co, &a, "f.py", "f2")), 2);
}

#[test]
fn refresh_reports_missing_paths_individually() {
    let f = fixture(&[("f.py", "f")]);
    let a = open(&f.co, "A");
    let out = f.co.refresh(&a, ["f.py", "gone.py"]).unwrap();
    assert_eq!(out[0].1, RefreshStatus::Current(1));
    assert_eq!(out[1].1, RefreshStatus::NotFound);
}

#[test]
fn prune_drops_irrelevant_staleness() {
    let f = fixture(&[("f.py", "f"), ("g.py", "g")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&a, "g.py").unwrap();
    f.co.read(&b, "g.py").unwrap();
    accepted(&write(&f.co, &b, "g.py", "g2"));
    f.co.prune(&a, ["g.py", "unknown.py"]).unwrap();
    assert_eq!(accepted(&write(&f.co, &a, "f.py", "f2")), 2);

    let snap = f.co.prune(&a, ["f.py"]).unwrap();
    assert!(snap.is_empty());
}

#[test]
fn expected_version_mismatch_is_protocol_error() {
    let f = fixture(&[("f.py", "f")]);
    let a = open(&f.co, "A");
    f.co.read(&a, "f.py").unwrap();
    let err = f
        .co
        .submit_write(WriteRequest {
            session_id: a,
            path: "f.py".into(),
            new_content: Arc::from(&b"x"[..]),
            expected_version: 7,
        })
        .unwrap_err();
    assert_eq!(err.code(), "protocol_error");
}

#[test]
fn unread_target_validates_declared_version() {
    let f = fixture(&[("f.py", "f")]);
    let a = open(&f.co, "A");
    let ok = f
        .co
        .submit_write(WriteRequest {
            session_id: a.clone(),
            path: "f.py".into(),
            new_content: Arc::from(&b"x"[..]),
            expected_version: 1,
        })
        .unwrap();
    assert_eq!(accepted(&ok), 2);
    let b = open(&f.co, "B");
    let stale = f
        .co
        .submit_write(WriteRequest {
            session_id: b,
            path: "f.py".into(),
            new_content: Arc::from(&b"y"[..]),
            expected_version: 1,
        })
        .unwrap();
    assert_eq!(stale.conflict().unwrap().kind, ConflictKind::Direct);
}

#[test]
fn creation_and_duplicate_creation() {
    let f = fixture(&[("g.py", "g")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "g.py").unwrap();
    let create = |s: &str| {
        f.co.submit_write(WriteRequest {
            session_id: s.into(),
            path: "new/n.py".into(),
            new_content: Arc::from(&b"n"[..]),
            expected_version: 0,
        })
        .unwrap()
    };
    assert_eq!(accepted(&create(&a)), 1);
    let dup = create(&b);
    let r = dup.conflict().unwrap();
    assert_eq!(r.kind, ConflictKind::Direct);
    assert_eq!(r.stale[0].observed_version, 0);
    assert_eq!(r.stale[0].current_version, 1);
}

#[test]
fn creation_still_validates_other_reads() {
    let f = fixture(&[("g.py", "g")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "g.py").unwrap();
    f.co.read(&b, "g.py").unwrap();
    accepted(&write(&f.co, &b, "g.py", "g2"));
    let out = f
        .co
        .submit_write(WriteRequest {
            session_id: a,
            path: "n.py".into(),
            new_content: Arc::from(&b"n"[..]),
            expected_version: 0,
        })
        .unwrap();
    assert_eq!(out.conflict().unwrap().kind, ConflictKind::StaleDependency);
}

#[test]
fn reservation_expires_after_ttl() {
    let f = fixture(&[("f.py", "f")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    assert!(f.co.reservation_status("f.py").unwrap().is_none());
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&b, "f.py").unwrap();
    accepted(&write(&f.co, &a, "f.py", "a"));
    write(&f.co, &b, "f.py", "b");
    let (r, remaining) = f.co.reservation_status("f.py").unwrap().unwrap();
    assert_eq!(r.holder, b);
    assert_eq!(remaining, 10);

    f.clock.advance(9);
    assert_eq!(f.co.reservation_status("f.py").unwrap().unwrap().1, 1);
    f.clock.advance(1);
    assert!(f.co.reservation_status("f.py").unwrap().is_none());
    assert_eq!(f.co.events().last().unwrap().kind, EventKind::ReservationExpired);
    // A proceeds under normal validation once the claim lapses.
    assert_eq!(accepted(&write(&f.co, &a, "f.py", "a2")), 3);
}

#[test]
fn release_rules() {
    let f = fixture(&[("f.py", "f")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&b, "f.py").unwrap();
    accepted(&write(&f.co, &a, "f.py", "a"));
    write(&f.co, &b, "f.py", "b");

    assert!(matches!(f.co.release_reservation(&a, "f.py"), Err(Error::NotHolder { .. })));
    f.co.release_reservation(&b, "f.py").unwrap();
    assert!(f.co.reservation_status("f.py").unwrap().is_none());
    assert_eq!(accepted(&write(&f.co, &a, "f.py", "a2")), 3);
}

#[test]
fn closing_drops_reservations() {
    let f = fixture(&[("f.py", "f")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&b, "f.py").unwrap();
    accepted(&write(&f.co, &a, "f.py", "a"));
    write(&f.co, &b, "f.py", "b");
    f.co.close_session(&b).unwrap();
    assert!(f.co.reservation_status("f.py").unwrap().is_none());
    assert!(matches!(f.co.read(&b, "f.py"), Err(Error::UnknownSession(_))));
}

#[test]
fn reservations_can_be_disabled() {
    let f = fixture_with(
        &[("f.py", "f")],
        CoordinatorConfig {
            reservations: false,
            ..Default::default()
        },
    );
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    f.co.read(&a, "f.py").unwrap();
    f.co.read(&b, "f.py").unwrap();
    accepted(&write(&f.co, &a, "f.py", "a"));
    let out = write(&f.co, &b, "f.py", "b");
    assert!(out.conflict().unwrap().reservation.is_none());
    assert_eq!(accepted(&write(&f.co, &a, "f.py", "a2")), 3);
}

#[test]
fn external_change_invalidates_snapshots() {
    let f = fixture(&[("a.py", "orig\n")]);
    let s = open(&f.co, "A");
    f.co.read(&s, "a.py").unwrap();
    let view = [("a.py".to_string(), b"edited on disk\n".to_vec())].into();
    assert_eq!(f.co.sync_view(&view).unwrap(), ["a.py"]);
    let out = write(&f.co, &s, "a.py", "mine\n");
    let r = out.conflict().unwrap();
    assert_eq!(r.kind, ConflictKind::Direct);
    assert_eq!((r.stale[0].observed_version, r.stale[0].current_version), (1, 2));
}

#[test]
fn binary_target_gets_marker() {
    let clock = Arc::new(ManualClock::new(0));
    let ws = Workspace::init(vec![("img.bin", vec![0u8, 1])], EventLog::in_memory(), clock).unwrap();
    let co = Coordinator::new(ws, CoordinatorConfig::default());
    let a = open(&co, "A");
    let b = open(&co, "B");
    co.read(&a, "img.bin").unwrap();
    co.read(&b, "img.bin").unwrap();
    accepted(&write(&co, &a, "img.bin", "\0\u{2}"));
    let out = write(&co, &b, "img.bin", "\0\u{3}");
    assert_eq!(out.conflict().unwrap().target_diff, Some(TargetDiff::BinaryChanged));
}

const LISTING: &str = "# engineer_1: validate numeric inputs before summing\ndef add(a, b):\n    return a + b\n";

#[test]
fn strict_policy_rejects_foreign_annotation_removal() {
    let f = fixture_with(
        &[("m.py", LISTING)],
        CoordinatorConfig {
            annotation_policy: AnnotationPolicy::Strict,
            ..Default::default()
        },
    );
    let s = open(&f.co, "engineer_2");
    f.co.read(&s, "m.py").unwrap();
    let out = write(&f.co, &s, "m.py", "def add(a, b):\n    return a + b\n");
    let r = out.conflict().unwrap();
    assert_eq!(r.kind, ConflictKind::AnnotationPolicy);
    assert_eq!(r.removed_annotations.len(), 1);
    assert!(r.reservation.is_none());
    assert_eq!(f.co.with_workspace(|w| w.version("m.py")), 1);

    // The author may drop their own annotation.
    let own = open(&f.co, "engineer_1");
    f.co.read(&own, "m.py").unwrap();
    accepted(&write(&f.co, &own, "m.py", "def add(a, b):\n    return a + b\n"));
}

#[test]
fn warn_policy_logs_and_accepts() {
    let f = fixture(&[("m.py", LISTING)]);
    let s = open(&f.co, "engineer_2");
    f.co.read(&s, "m.py").unwrap();
    accepted(&write(&f.co, &s, "m.py", "def add(a, b):\n    return a + b\n"));
    let ev = f.co.events().into_iter().find(|e| e.kind == EventKind::AnnotationViolation).unwrap();
    assert_eq!(ev.detail.removed.len(), 1);
    assert_eq!(f.co.stats().annotation_violations, 1);
}

#[test]
fn digest_counts_authors() {
    let f = fixture(&[("m.py", "x = 1\n")]);
    assert!(f.co.annotation_digest()["m.py"].is_empty());
    let s = open(&f.co, "engineer_1");
    f.co.read(&s, "m.py").unwrap();
    accepted(&write(&f.co, &s, "m.py", "# engineer_1: set x\nx = 2\n"));
    assert_eq!(f.co.annotation_digest()["m.py"]["engineer_1"], 1);
    assert_eq!(f.co.annotations("m.py").unwrap()[0].text, "set x");
}

#[test]
fn event_log_replays_cleanly() {
    let f = fixture(&[("f.py", "f"), ("g.py", "g")]);
    let a = open(&f.co, "A");
    let b = open(&f.co, "B");
    for _ in 0..3 {
        f.co.read(&a, "f.py").unwrap();
        f.co.read(&b, "f.py").unwrap();
        accepted(&write(&f.co, &a, "f.py", "a"));
        write(&f.co, &b, "f.py", "b");
        f.co.refresh(&b, ["f.py"]).unwrap();
        accepted(&write(&f.co, &b, "f.py", "b"));
    }
    let events = f.co.events();
    let r = replay(&events);
    assert!(r.is_consistent(), "{:?}", r.issues);
    assert_eq!(r.files["f.py"].version, f.co.with_workspace(|w| w.version("f.py")));
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64 + 1);
    }
    let stats = f.co.stats();
    assert_eq!(stats.writes_accepted, 6);
    assert_eq!(stats.writes_rejected, 3);
}

#[test]
fn mediated_delete_is_validated_and_versioned() {
    let f = fixture(&[("a.py", "x\n"), ("b.py", "y\n")]);
    let (s1, s2) = (open(&f.co, "e1"), open(&f.co, "e2"));
    f.co.read(&s1, "a.py").unwrap();
    f.co.read(&s2, "a.py").unwrap();
    assert_eq!(accepted(&write(&f.co, &s2, "a.py", "x2\n")), 2);

    let out = f.co.submit_delete(&s1, "a.py", 1).unwrap();
    assert_eq!(out.conflict().unwrap().kind, ConflictKind::Direct);
    f.co.refresh(&s1, ["a.py"]).unwrap();
    f.co.release_reservation(&s1, "a.py").unwrap();
    assert_eq!(accepted(&f.co.submit_delete(&s1, "a.py", 2).unwrap()), 3);
    assert!(matches!(f.co.read(&s2, "a.py"), Err(Error::NotFound(_))));
    assert!(matches!(f.co.submit_delete(&s1, "gone.py", 0), Err(Error::NotFound(_))));

    // Recreating continues the counter.
    assert_eq!(accepted(&write(&f.co, &s1, "a.py", "back\n")), 4);
    let r = replay(&f.co.events());
    assert!(r.is_consistent(), "{:?}", r.issues);
    assert_eq!(r.versions()["a.py"], 4);
}

#[test]
fn session_ids_resume_after_recovery() {
    let f = fixture(&[]);
    f.co.resume_sessions_after(7);
    assert_eq!(open(&f.co, "e"), "s8");
    f.co.resume_sessions_after(2);
    assert_eq!(open(&f.co, "e"), "s9");
}
