use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use cowork_core::event::{parse_log, replay};
use cowork_core::store::{repair_dir, scan_dir, Backing, Change, DirBacking};
use cowork_core::{EventKind, EventLog, ManualClock, Workspace};

/// Stages like [`DirBacking`] but dies before publishing.
struct CrashBeforePublish(DirBacking);

impl Backing for CrashBeforePublish {
    fn stage(&mut self, path: &str, content: Option<&[u8]>) -> io::Result<()> {
        self.0.stage(path, content)
    }
    fn publish(&mut self, _: &str, _: Option<&[u8]>) -> io::Result<()> {
        Err(io::Error::other("killed"))
    }
}

fn setup(root: &Path, log: &Path) -> Workspace {
    fs::write(root.join("a.py"), "one\n").unwrap();
    fs::create_dir_all(root.join("pkg")).unwrap();
    fs::write(root.join("pkg/b.py"), "two\n").unwrap();
    let sink = fs::File::create(log).unwrap();
    let mut ws = Workspace::init_from_dir(root, EventLog::with_sink(Box::new(sink), true), Arc::new(ManualClock::new(0))).unwrap();
    ws.set_backing(Box::new(DirBacking::new(root)));
    ws
}

fn by(w: &str) -> Change<'_> {
    Change {
        writer: w,
        session: Some(w),
        ..Default::default()
    }
}

/// Recovers from the log and the directory; returns the new workspace and
/// how many drift events recovery had to log.
fn recover(root: &Path, log: &Path) -> (Workspace, usize, BTreeMap<String, u64>) {
    let events = parse_log(io::BufReader::new(fs::File::open(log).unwrap())).unwrap();
    let replayed = replay(&events);
    assert!(replayed.is_consistent(), "{:?}", replayed.issues);
    repair_dir(root, &replayed).unwrap();
    let ws = Workspace::recover(&events, &scan_dir(root).unwrap(), EventLog::in_memory(), Arc::new(ManualClock::new(0))).unwrap();
    let drift = ws.log().count(EventKind::ExternalChange) as usize;
    (ws, drift, replayed.versions())
}

fn sidecars(root: &Path) -> usize {
    fn walk(d: &Path) -> usize {
        fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                if e.file_type().unwrap().is_dir() {
                    walk(&e.path())
                } else {
                    usize::from(e.file_name().to_string_lossy().starts_with('.'))
                }
            })
            .sum()
    }
    walk(root)
}

#[test]
fn clean_writes_land_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    fs::create_dir(&root).unwrap();
    let log = dir.path().join("events.jsonl");
    let mut ws = setup(&root, &log);
    ws.apply_change("a.py", Arc::from(&b"uno\n"[..]), by("s1")).unwrap();
    ws.apply_change("pkg/new.py", Arc::from(&b"n\n"[..]), by("s1")).unwrap();
    ws.delete("pkg/b.py", by("s2")).unwrap();
    assert_eq!(fs::read_to_string(root.join("a.py")).unwrap(), "uno\n");
    assert!(!root.join("pkg/b.py").exists());
    assert_eq!(sidecars(&root), 0);
    let (ws2, drift, versions) = recover(&root, &log);
    assert_eq!(drift, 0);
    assert_eq!(versions["a.py"], 2);
    assert_eq!(ws2.version("pkg/b.py"), 2);
}

#[test]
fn staged_but_unlogged_write_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    fs::create_dir(&root).unwrap();
    let log = dir.path().join("events.jsonl");
    drop(setup(&root, &log));
    let mut b = DirBacking::new(&root);
    b.stage("a.py", Some(b"never logged\n")).unwrap();
    b.stage("pkg/b.py", None).unwrap();
    let (_, drift, versions) = recover(&root, &log);
    assert_eq!(drift, 0);
    assert_eq!(versions["a.py"], 1);
    assert_eq!(fs::read_to_string(root.join("a.py")).unwrap(), "one\n");
    assert_eq!(fs::read_to_string(root.join("pkg/b.py")).unwrap(), "two\n");
    assert_eq!(sidecars(&root), 0);
}

#[test]
fn logged_but_unpublished_changes_roll_forward() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    fs::create_dir(&root).unwrap();
    let log = dir.path().join("events.jsonl");
    let mut ws = setup(&root, &log);
    ws.set_backing(Box::new(CrashBeforePublish(DirBacking::new(&root))));
    assert!(ws.apply_change("a.py", Arc::from(&b"uno\n"[..]), by("s1")).is_err());
    assert!(ws.delete("pkg/b.py", by("s1")).is_err());
    drop(ws);
    let (ws2, drift, versions) = recover(&root, &log);
    assert_eq!(drift, 0);
    assert_eq!(versions["a.py"], 2);
    assert_eq!(ws2.get_file("a.py").unwrap(), (Arc::from(&b"uno\n"[..]), 2));
    assert!(!root.join("pkg/b.py").exists());
    assert_eq!(sidecars(&root), 0);
}
