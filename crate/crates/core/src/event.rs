//! Append-only workspace event log.
//!
//! Every observable step of the coordinator (reads, accepted and rejected
//! writes, reservation lifecycle, out-of-band changes) becomes one
//! [`WorkspaceEvent`]. Serialized, the log is one JSON object per line with
//! exactly the fields `seq, kind, session, path, detail, wall_ms`.
//!
//! The log is the single input for metrics and for crash recovery, so
//! [`replay`] re-derives per-path versions from it and reports any gap or
//! out-of-order version it finds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::conflict::{ConflictKind, StaleEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Init,
    Read,
    WriteAccepted,
    WriteRejected,
    ReservationGranted,
    ReservationReleased,
    ReservationExpired,
    AnnotationViolation,
    ExternalChange,
    SessionOpened,
    SessionClosed,
    MergeConflict,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Init => "init",
            EventKind::Read => "read",
            EventKind::WriteAccepted => "write_accepted",
            EventKind::WriteRejected => "write_rejected",
            EventKind::ReservationGranted => "reservation_granted",
            EventKind::ReservationReleased => "reservation_released",
            EventKind::ReservationExpired => "reservation_expired",
            EventKind::AnnotationViolation => "annotation_violation",
            EventKind::ExternalChange => "external_change",
            EventKind::SessionOpened => "session_opened",
            EventKind::SessionClosed => "session_closed",
            EventKind::MergeConflict => "merge_conflict",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Kind-specific payload. Only the fields relevant to an event are
/// serialized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventDetail {
    /// Version observed by a read.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_version: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_version: Option<u64>,
    /// The writer's observation of the target at commit time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_version: Option<u64>,
    #[serde(skip_serializing_if = "is_false")]
    pub created: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub deleted: bool,
    #[serde(skip_serializing_if = "is_false")]
    pub refresh: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub writer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lines_added: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lines_removed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conflict: Option<ConflictKind>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stale: Vec<StaleEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holder: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttl: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub modified: Vec<String>,
    /// Initial file hashes, carried by the init marker.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<String, String>,
    /// Private worktree the event happened in, if not the shared tree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hunks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub session: Option<String>,
    pub path: Option<String>,
    pub detail: EventDetail,
    pub wall_ms: u64,
}

impl WorkspaceEvent {
    pub fn to_json_line(&self) -> String {
        // Struct serialization cannot fail: all map keys are strings.
        serde_json::to_string(self).expect("event serializes")
    }
}

/// In-memory event log with an optional line-delimited sink.
///
/// Every append is written and flushed to the sink before it is recorded,
/// so a flushed log never runs ahead of or behind committed state by more
/// than the event in flight.
pub struct EventLog {
    next_seq: u64,
    retain: bool,
    events: Vec<WorkspaceEvent>,
    counts: BTreeMap<EventKind, u64>,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog")
            .field("next_seq", &self.next_seq)
            .field("retained", &self.events.len())
            .field("sink", &self.sink.is_some())
            .finish()
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            next_seq: 1,
            retain: true,
            events: Vec::new(),
            counts: BTreeMap::new(),
            sink: None,
        }
    }

    /// Log that streams to `sink`. With `retain = false` events are not kept
    /// in memory; only per-kind counters are.
    pub fn with_sink(sink: Box<dyn Write + Send>, retain: bool) -> Self {
        EventLog {
            sink: Some(sink),
            retain,
            ..Self::in_memory()
        }
    }

    /// Continue numbering after an existing log.
    pub fn resume_after(mut self, last_seq: u64) -> Self {
        self.next_seq = last_seq + 1;
        self
    }

    pub fn append(
        &mut self,
        kind: EventKind,
        session: Option<&str>,
        path: Option<&str>,
        detail: EventDetail,
        wall_ms: u64,
    ) -> Result<u64> {
        let event = WorkspaceEvent {
            seq: self.next_seq,
            kind,
            session: session.map(str::to_string),
            path: path.map(str::to_string),
            detail,
            wall_ms,
        };
        if let Some(sink) = self.sink.as_mut() {
            let mut line = event.to_json_line();
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        self.next_seq += 1;
        *self.counts.entry(kind).or_default() += 1;
        let seq = event.seq;
        if self.retain {
            self.events.push(event);
        }
        Ok(seq)
    }

    pub fn events(&self) -> &[WorkspaceEvent] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn count(&self, kind: EventKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.events)
    }
}

pub fn to_jsonl(events: &[WorkspaceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_json_line());
        out.push('\n');
    }
    out
}

/// Parses a line-delimited log. Blank lines are skipped; a torn final line
/// (no trailing newline and unparseable) is ignored as an interrupted write.
pub fn parse_log<R: BufRead>(reader: R) -> Result<Vec<WorkspaceEvent>> {
    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate().peekable();
    while let Some((idx, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<WorkspaceEvent>(&line) {
            Ok(e) => out.push(e),
            Err(_) if lines.peek().is_none() => break,
            Err(err) => {
                return Err(Error::EventLog(format!("line {}: {err}", idx + 1)));
            }
        }
    }
    Ok(out)
}

/// Per-path state reconstructed from a log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayedFile {
    pub version: u64,
    pub sha256: Option<String>,
    pub deleted: bool,
    pub last_writer: String,
}

#[derive(Debug, Clone, Default)]
pub struct Replay {
    /// Shared-tree files.
    pub files: BTreeMap<String, ReplayedFile>,
    /// Files in private worktrees, keyed by (branch, path).
    pub branches: BTreeMap<(String, String), ReplayedFile>,
    pub last_seq: u64,
    pub epoch: u64,
    pub issues: Vec<String>,
}

impl Replay {
    pub fn is_consistent(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn versions(&self) -> BTreeMap<String, u64> {
        self.files
            .iter()
            .map(|(p, f)| (p.clone(), f.version))
            .collect()
    }
}

/// Re-derives versions from a log, recording every sequence gap and every
/// version step that is not exactly +1.
pub fn replay(events: &[WorkspaceEvent]) -> Replay {
    let mut r = Replay::default();
    let mut expected_seq: Option<u64> = None;
    for e in events {
        if let Some(want) = expected_seq {
            if e.seq != want {
                r.issues.push(format!("seq gap: expected {want}, found {}", e.seq));
            }
        }
        expected_seq = Some(e.seq + 1);
        r.last_seq = e.seq;

        match e.kind {
            EventKind::Init => {
                for (path, sha) in &e.detail.files {
                    r.files.insert(
                        path.clone(),
                        ReplayedFile {
                            version: 1,
                            sha256: Some(sha.clone()),
                            deleted: false,
                            last_writer: "init".into(),
                        },
                    );
                }
            }
            EventKind::WriteAccepted | EventKind::ExternalChange => {
                let Some(path) = e.path.clone() else {
                    r.issues.push(format!("seq {}: {} without path", e.seq, e.kind));
                    continue;
                };
                if e.kind == EventKind::ExternalChange {
                    if let Some(epoch) = e.detail.epoch {
                        r.epoch = r.epoch.max(epoch);
                    }
                }
                match &e.detail.branch {
                    Some(b) => {
                        // A worktree forks at whatever version the shared
                        // tree had, so its first event sets the baseline.
                        let key = (b.clone(), path);
                        let cur = match r.branches.get(&key) {
                            Some(f) => f.version,
                            None => e.detail.prior_version.unwrap_or(0),
                        };
                        if let Some(f) = step(&mut r.issues, e, cur) {
                            r.branches.insert(key, f);
                        }
                    }
                    None => {
                        let cur = r.files.get(&path).map_or(0, |f| f.version);
                        if let Some(f) = step(&mut r.issues, e, cur) {
                            r.files.insert(path, f);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    r
}

fn step(issues: &mut Vec<String>, e: &WorkspaceEvent, current: u64) -> Option<ReplayedFile> {
    let d = &e.detail;
    let path = e.path.as_deref().unwrap_or("?");
    let Some(new) = d.new_version else {
        issues.push(format!("seq {}: {} on {path} lacks new_version", e.seq, e.kind));
        return None;
    };
    let prior = d.prior_version.unwrap_or(current);
    if prior != current {
        issues.push(format!(
            "seq {}: {path} prior_version {prior} but replayed version is {current}",
            e.seq
        ));
    }
    if new != current + 1 {
        issues.push(format!(
            "seq {}: version gap on {path}: {current} -> {new}",
            e.seq
        ));
    }
    let last_writer = if e.kind == EventKind::ExternalChange {
        "external".to_string()
    } else {
        d.writer
            .clone()
            .or_else(|| e.session.clone())
            .unwrap_or_default()
    };
    Some(ReplayedFile {
        version: new,
        sha256: d.sha256.clone(),
        deleted: d.deleted,
        last_writer,
    })
}
