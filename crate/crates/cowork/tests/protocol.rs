mod common;

use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use common::Client;
use cowork::server::{default_log_path, open_workspace_with_clock};
use cowork::{Server, ServiceConfig, Status};
use cowork_core::event::{parse_log, EventKind};
use cowork_core::ManualClock;
use serde_json::json;

struct Live {
    _dir: tempfile::TempDir,
    root: PathBuf,
    log: PathBuf,
    clock: Arc<ManualClock>,
    addr: SocketAddr,
}

fn start(files: &[(&str, &str)], config: ServiceConfig) -> Live {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    fs::create_dir(&root).unwrap();
    for (p, c) in files {
        let p = root.join(p);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, c).unwrap();
    }
    let log = default_log_path(&root);
    let clock = Arc::new(ManualClock::new(1_000));
    let service = open_workspace_with_clock(&root, &log, &config, clock.clone()).unwrap();
    let addr = Server::bind("127.0.0.1:0", service).unwrap().spawn().unwrap();
    Live {
        _dir: dir,
        root,
        log,
        clock,
        addr,
    }
}

fn kinds(log: &Path) -> Vec<(EventKind, Option<String>)> {
    parse_log(BufReader::new(fs::File::open(log).unwrap()))
        .unwrap()
        .into_iter()
        .map(|e| (e.kind, e.path))
        .collect()
}

#[test]
fn log_lives_beside_the_root() {
    let live = start(&[("a.py", "x\n")], ServiceConfig::default());
    assert_eq!(live.log.parent(), live.root.parent());
    assert!(fs::read_dir(&live.root).unwrap().all(|e| e.unwrap().file_name() == "a.py"));
}

#[test]
fn open_read_close_is_logged_in_order() {
    let live = start(&[("a.py", "x = 1\n")], ServiceConfig::default());
    let mut c = Client::open(live.addr, "engineer", "engineer_1");
    assert_eq!(c.read("a.py"), ("x = 1\n".to_string(), 1));
    c.ok("close_session", json!({}));
    let k = kinds(&live.log);
    assert_eq!(
        k,
        vec![
            (EventKind::Init, None),
            (EventKind::SessionOpened, None),
            (EventKind::Read, Some("a.py".into())),
            (EventKind::SessionClosed, None),
        ]
    );
}

#[test]
fn racing_writers_one_wins_one_gets_direct_conflict() {
    let live = start(&[("a.py", "x = 1\n")], ServiceConfig::default());
    let mut a = Client::open(live.addr, "engineer", "engineer_1");
    let mut b = Client::open(live.addr, "engineer", "engineer_2");
    a.read("a.py");
    b.read("a.py");
    assert_eq!(a.write("a.py", 1, "x = 2\n")["status"], "accepted");
    let rej = b.write("a.py", 1, "x = 3\n");
    assert_eq!(rej["status"], "rejected");
    let c = &rej["conflict"];
    assert_eq!(c["kind"], "direct");
    assert_eq!(c["current_content_text"], "x = 2\n");
    assert_eq!(c["stale"], json!([{"path": "a.py", "observed_version": 1, "current_version": 2}]));
    let diff = c["target_diff"].as_str().unwrap();
    assert!(diff.contains("-x = 1\n+x = 2\n"), "{diff}");
    assert_eq!(c["reservation"]["holder"], b.session.clone().unwrap());
    assert_eq!(c["reservation"]["ttl_ms"], 30_000);

    // The reservation blocks the winner until it lapses.
    a.read("a.py");
    let held = a.write("a.py", 2, "x = 4\n");
    assert_eq!(held["conflict"]["kind"], "reservation_held");
    assert_eq!(held["conflict"]["blocking"]["holder"], b.session.clone().unwrap());
    let st = a.ok("reserve_status", json!({"path": "a.py"}));
    assert_eq!(st["ttl_remaining_ms"], 30_000);
    live.clock.advance(30_000);
    assert_eq!(a.ok("reserve_status", json!({"path": "a.py"})), json!({}));
    assert_eq!(a.write("a.py", 2, "x = 4\n")["new_version"], 3);
    assert_eq!(fs::read_to_string(live.root.join("a.py")).unwrap(), "x = 4\n");
}

#[test]
fn errors_are_transport_level_only() {
    let live = start(&[("a.py", "x\n")], ServiceConfig::default());
    let mut c = Client::open(live.addr, "engineer", "e");
    let r = c.call("frobnicate", json!({}));
    assert_eq!((r.status, r.code()), (Status::Err, Some("unknown_op")));
    assert_eq!(c.call("read", json!({"path": "missing.py"})).code(), Some("not_found"));
    assert_eq!(c.call("read", json!({"path": "../etc/passwd"})).code(), Some("invalid_path"));
    assert_eq!(c.call("read", json!({"file": "a.py"})).code(), Some("bad_args"));
    c.read("a.py");
    let r = c.call("write", json!({"path": "a.py", "expected_version": 7, "content_text": "y\n"}));
    assert_eq!(r.code(), Some("protocol_error"));
    assert_eq!(r.body["detail"]["observed_version"], 1);
    let r = c.call("write", json!({"path": "a.py", "expected_version": 1}));
    assert_eq!(r.code(), Some("bad_args"));

    let r = c.send_raw("{not json");
    assert_eq!((r.request_id.as_deref(), r.code()), (None, Some("malformed")));
    let r = c.send_raw(r#"{"op": "stats", "request_id": "dup"}"#);
    assert!(r.is_ok());
    let r = c.send_raw(r#"{"op": "stats", "request_id": "dup"}"#);
    assert_eq!(r.code(), Some("duplicate_request_id"));

    let mut anon = Client::connect(live.addr);
    assert_eq!(anon.call("read", json!({"path": "a.py"})).code(), Some("missing_session"));
}

#[test]
fn responses_follow_request_order() {
    let live = start(&[("a.py", "x\n"), ("b.py", "y\n")], ServiceConfig::default());
    let mut c = Client::open(live.addr, "engineer", "e");
    for i in 0..50 {
        let path = if i % 2 == 0 { "a.py" } else { "b.py" };
        let r = c.call("read", json!({"path": path}));
        assert!(r.is_ok());
    }
}

#[test]
fn refresh_prune_and_stale_dependency() {
    let live = start(&[("f.py", "f\n"), ("g.py", "g\n")], ServiceConfig::default());
    let mut a = Client::open(live.addr, "engineer", "e1");
    let mut b = Client::open(live.addr, "engineer", "e2");
    a.read("f.py");
    a.read("g.py");
    b.read("g.py");
    b.write("g.py", 1, "g2\n");
    let rej = a.write("f.py", 1, "f2\n");
    assert_eq!(rej["conflict"]["kind"], "stale_dependency");
    assert!(rej["conflict"]["target_diff"].is_null());
    let r = a.ok("refresh", json!({"paths": ["g.py", "nope.py"]}));
    assert_eq!(r, json!({"entries": {"g.py": 2}, "missing": ["nope.py"]}));
    assert_eq!(a.write("f.py", 1, "f2\n")["status"], "accepted");

    b.write("g.py", 2, "g3\n");
    a.ok("prune", json!({"paths": ["g.py"]}));
    assert_eq!(a.write("f.py", 2, "f3\n")["new_version"], 3);
}

#[test]
fn binary_content_travels_as_base64() {
    let live = start(&[], ServiceConfig::default());
    let mut c = Client::open(live.addr, "engineer", "e");
    let bytes = [0u8, 159, 146, 150];
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    let r = c.ok("write", json!({"path": "img.bin", "expected_version": 0, "content_b64": b64}));
    assert_eq!(r["new_version"], 1);
    let r = c.ok("read", json!({"path": "img.bin"}));
    assert_eq!(r["content_b64"], b64);
    assert_eq!(fs::read(live.root.join("img.bin")).unwrap(), bytes);
}

#[test]
fn delete_through_the_protocol() {
    let live = start(&[("a.py", "x\n")], ServiceConfig::default());
    let mut c = Client::open(live.addr, "engineer", "e");
    c.read("a.py");
    let r = c.ok("write", json!({"path": "a.py", "expected_version": 1, "delete": true}));
    assert_eq!(r["new_version"], 2);
    assert!(!live.root.join("a.py").exists());
    assert_eq!(c.call("read", json!({"path": "a.py"})).code(), Some("not_found"));
}

#[test]
fn annotations_and_strict_policy() {
    let listing = "# engineer_1: validate numeric inputs before summing\ndef total(xs):\n    return sum(xs)\n";
    let config = ServiceConfig {
        annotation_policy: cowork_core::annotations::AnnotationPolicy::Strict,
        ..Default::default()
    };
    let live = start(&[("utils.py", listing)], config);
    let mut c = Client::open(live.addr, "engineer", "engineer_2");
    let anns = c.ok("annotations", json!({"path": "utils.py"}))["annotations"].clone();
    assert_eq!(anns.as_array().unwrap().len(), 1);
    assert_eq!(anns[0]["author"], "engineer_1");
    c.read("utils.py");
    let r = c.write("utils.py", 1, "def total(xs):\n    return sum(xs)\n");
    assert_eq!(r["conflict"]["kind"], "annotation_policy");
    assert_eq!(r["conflict"]["removed_annotations"].as_array().unwrap().len(), 1);
    assert_eq!(fs::read_to_string(live.root.join("utils.py")).unwrap(), listing);
}

#[test]
fn manager_only_ops_and_sync() {
    let live = start(&[("a.py", "x\n")], ServiceConfig::default());
    let mut eng = Client::open(live.addr, "engineer", "e");
    assert_eq!(eng.call("sync_fs", json!({})).code(), Some("forbidden"));
    assert_eq!(eng.call("stats", json!({})).code(), Some("forbidden"));
    eng.read("a.py");

    let mut mgr = Client::open(live.addr, "manager", "m");
    fs::write(live.root.join("a.py"), "edited by hand\n").unwrap();
    fs::write(live.root.join("new.py"), "n\n").unwrap();
    assert_eq!(mgr.ok("sync_fs", json!({})), json!({"changed": ["a.py", "new.py"]}));
    let counters = &mgr.ok("stats", json!({}))["counters"];
    assert_eq!(counters["external_changes"], 2);
    assert_eq!(counters["epoch"], 1);

    let rej = eng.write("a.py", 1, "y\n");
    assert_eq!(rej["conflict"]["kind"], "direct");
    assert_eq!(rej["conflict"]["current_content_text"], "edited by hand\n");
}

#[test]
fn dropped_connection_closes_its_sessions() {
    let live = start(&[("a.py", "x\n")], ServiceConfig::default());
    let mut a = Client::open(live.addr, "engineer", "e1");
    let mut b = Client::open(live.addr, "engineer", "e2");
    a.read("a.py");
    b.read("a.py");
    b.write("a.py", 1, "b\n");
    a.write("a.py", 1, "a\n");
    let holder = a.session.clone().unwrap();
    assert_eq!(b.ok("reserve_status", json!({"path": "a.py"}))["holder"], holder);
    drop(a);
    // The server notices the disconnect asynchronously.
    let mut freed = false;
    for _ in 0..200 {
        if b.ok("reserve_status", json!({"path": "a.py"})) == json!({}) {
            freed = true;
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    assert!(freed);
}

#[test]
fn restart_resumes_log_and_session_ids() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    fs::create_dir(&root).unwrap();
    fs::write(root.join("a.py"), "x\n").unwrap();
    let log = default_log_path(&root);
    let clock = Arc::new(ManualClock::new(0));
    {
        let service = open_workspace_with_clock(&root, &log, &ServiceConfig::default(), clock.clone()).unwrap();
        let addr = Server::bind("127.0.0.1:0", service).unwrap().spawn().unwrap();
        let mut c = Client::open(addr, "engineer", "e");
        c.read("a.py");
        c.write("a.py", 1, "y\n");
    }
    fs::write(root.join("a.py"), "changed while down\n").unwrap();
    let service = open_workspace_with_clock(&root, &log, &ServiceConfig::default(), clock).unwrap();
    let addr = Server::bind("127.0.0.1:0", service).unwrap().spawn().unwrap();
    let mut c = Client::open(addr, "engineer", "e");
    assert_eq!(c.session.as_deref(), Some("s2"));
    assert_eq!(c.read("a.py"), ("changed while down\n".to_string(), 3));
    let events = parse_log(BufReader::new(fs::File::open(&log).unwrap())).unwrap();
    let r = cowork_core::event::replay(&events);
    assert!(r.is_consistent(), "{:?}", r.issues);
    assert_eq!(r.versions()["a.py"], 3);
}
