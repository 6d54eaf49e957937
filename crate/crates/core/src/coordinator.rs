//! The mediator every client goes through.
//!
//! All state sits behind one lock, so validate-then-apply is a single
//! critical section: between a write's validation and its application no
//! other write can commit. A mediated read records its observation in the
//! session snapshot inside the same critical section that produced the
//! version, so a snapshot entry always names a version that really was
//! current at some instant.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;

use crate::annotations::{
    annotation_digest, check_preservation, parse_annotations, AnnotationPolicy, CommentPrefixes, IntentAnnotation,
};
use crate::conflict::{
    classify, validate, ConflictKind, ConflictReport, Reservation, ReservationTable, StaleEntry, TargetDiff, Validity,
};
use crate::diff;
use crate::error::{Error, Result};
use crate::event::{EventDetail, EventKind, WorkspaceEvent};
use crate::path::normalize;
use crate::session::{ReadSnapshot, Role, Session};
use crate::store::{scan_dir, Change, Content, Workspace};

/// Default reservation lifetime against a wall clock, in milliseconds.
pub const DEFAULT_TTL_MS: u64 = 30_000;

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    /// Reservation lifetime in clock units.
    pub reservation_ttl: u64,
    /// Grant reservations after rejections.
    pub reservations: bool,
    /// Validate read snapshots at write time. Off models a shared workspace
    /// with no enforcement.
    pub validation: bool,
    pub annotation_policy: AnnotationPolicy,
    pub comment_prefixes: CommentPrefixes,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            reservation_ttl: DEFAULT_TTL_MS,
            reservations: true,
            validation: true,
            annotation_policy: AnnotationPolicy::Warn,
            comment_prefixes: CommentPrefixes::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OpenSession {
    pub role: Role,
    pub author: Option<String>,
    pub task: Option<String>,
}

#[derive(Debug, Clone)]
pub struct WriteRequest {
    pub session_id: String,
    pub path: String,
    pub new_content: Content,
    /// The version the writer believes the target is at; 0 to create.
    pub expected_version: u64,
}

#[derive(Debug, Clone)]
pub enum WriteOutcome {
    Accepted { new_version: u64 },
    Rejected(Box<ConflictReport>),
}

impl WriteOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, WriteOutcome::Accepted { .. })
    }

    pub fn conflict(&self) -> Option<&ConflictReport> {
        match self {
            WriteOutcome::Rejected(r) => Some(r),
            WriteOutcome::Accepted { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshStatus {
    Current(u64),
    NotFound,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub files: u64,
    pub sessions_open: u64,
    pub reservations_active: u64,
    pub events: u64,
    pub reads: u64,
    pub writes_accepted: u64,
    pub writes_rejected: u64,
    pub external_changes: u64,
    pub annotation_violations: u64,
    pub epoch: u64,
}

struct State {
    ws: Workspace,
    sessions: BTreeMap<String, Session>,
    reservations: ReservationTable,
    next_session: u64,
}

impl State {
    fn session(&self, id: &str) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    fn session_mut(&mut self, id: &str) -> Result<&mut Session> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    fn reap(&mut self) -> Result<()> {
        let now = self.ws.now();
        for r in self.reservations.reap(now) {
            self.ws.emit(
                EventKind::ReservationExpired,
                Some(&r.holder),
                Some(&r.path),
                EventDetail {
                    holder: Some(r.holder.clone()),
                    ttl: Some(r.ttl),
                    ..Default::default()
                },
            )?;
        }
        Ok(())
    }

    fn release_event(&mut self, r: &Reservation, reason: &str) -> Result<()> {
        self.ws.emit(
            EventKind::ReservationReleased,
            Some(&r.holder),
            Some(&r.path),
            EventDetail {
                holder: Some(r.holder.clone()),
                reason: Some(reason.to_string()),
                ..Default::default()
            },
        )?;
        Ok(())
    }
}

pub struct Coordinator {
    state: Mutex<State>,
    config: CoordinatorConfig,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator").field("config", &self.config).finish()
    }
}

impl Coordinator {
    pub fn new(ws: Workspace, config: CoordinatorConfig) -> Self {
        Coordinator {
            state: Mutex::new(State {
                ws,
                sessions: BTreeMap::new(),
                reservations: ReservationTable::new(),
                next_session: 1,
            }),
            config,
        }
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("coordinator state poisoned")
    }

    /// Runs `f` with read access to the workspace.
    pub fn with_workspace<T>(&self, f: impl FnOnce(&Workspace) -> T) -> T {
        f(&self.lock().ws)
    }

    /// Runs `f` with write access to the workspace, bypassing validation.
    /// For setup and tooling; clients must go through [`Self::submit_write`].
    pub fn with_workspace_mut<T>(&self, f: impl FnOnce(&mut Workspace) -> T) -> T {
        f(&mut self.lock().ws)
    }

    pub fn events(&self) -> Vec<WorkspaceEvent> {
        self.lock().ws.log().events().to_vec()
    }

    /// Starts session numbering after `last`, so ids handed out after a
    /// recovery never repeat ones already in the log.
    pub fn resume_sessions_after(&self, last: u64) {
        let mut st = self.lock();
        st.next_session = st.next_session.max(last + 1);
    }

    pub fn open_session(&self, req: OpenSession) -> Result<String> {
        let mut st = self.lock();
        let id = format!("s{}", st.next_session);
        st.next_session += 1;
        let seq = st.ws.emit(
            EventKind::SessionOpened,
            Some(&id),
            None,
            EventDetail {
                role: Some(req.role.as_str().to_string()),
                author: req.author.clone(),
                task: req.task.clone(),
                ..Default::default()
            },
        )?;
        st.sessions
            .insert(id.clone(), Session::new(id.clone(), req.role, req.author, req.task, seq));
        Ok(id)
    }

    /// Closes a session and drops any reservation it still holds.
    pub fn close_session(&self, session_id: &str) -> Result<()> {
        let mut st = self.lock();
        st.session(session_id)?;
        for r in st.reservations.release_all(session_id) {
            st.release_event(&r, "session_closed")?;
        }
        st.ws.emit(EventKind::SessionClosed, Some(session_id), None, EventDetail::default())?;
        st.sessions.remove(session_id);
        Ok(())
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        self.lock().session(session_id).cloned()
    }

    pub fn snapshot(&self, session_id: &str) -> Result<ReadSnapshot> {
        Ok(self.lock().session(session_id)?.snapshot.clone())
    }

    /// Returns current content and version and records the observation.
    pub fn read(&self, session_id: &str, path: &str) -> Result<(Content, u64)> {
        let path = normalize(path)?;
        let mut st = self.lock();
        st.session(session_id)?;
        let (content, version) = st.ws.get_file(&path)?;
        st.ws.emit(
            EventKind::Read,
            Some(session_id),
            Some(&path),
            EventDetail {
                version: Some(version),
                ..Default::default()
            },
        )?;
        st.session_mut(session_id)?.snapshot.observe(&path, version);
        Ok((content, version))
    }

    /// Moves snapshot entries to current versions without returning
    /// content. Missing paths are reported per path and left untouched.
    pub fn refresh<'a>(
        &self,
        session_id: &str,
        paths: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<(String, RefreshStatus)>> {
        let mut st = self.lock();
        st.session(session_id)?;
        let mut out = Vec::new();
        for raw in paths {
            let path = normalize(raw)?;
            match st.ws.get_file(&path) {
                Ok((_, version)) => {
                    st.ws.emit(
                        EventKind::Read,
                        Some(session_id),
                        Some(&path),
                        EventDetail {
                            version: Some(version),
                            refresh: true,
                            ..Default::default()
                        },
                    )?;
                    st.session_mut(session_id)?.snapshot.observe(&path, version);
                    out.push((path, RefreshStatus::Current(version)));
                }
                Err(_) => out.push((path, RefreshStatus::NotFound)),
            }
        }
        Ok(out)
    }

    /// Forgets observations; later validations ignore the pruned paths.
    pub fn prune<'a>(&self, session_id: &str, paths: impl IntoIterator<Item = &'a str>) -> Result<ReadSnapshot> {
        let mut st = self.lock();
        let session = st.session_mut(session_id)?;
        for raw in paths {
            if let Ok(p) = normalize(raw) {
                session.snapshot.remove(&p);
            }
        }
        Ok(session.snapshot.clone())
    }

    pub fn submit_write(&self, req: WriteRequest) -> Result<WriteOutcome> {
        self.commit(req.session_id, &req.path, Some(req.new_content), req.expected_version)
    }

    /// Deletes `path`, validated exactly like a write. The path is left as
    /// a tombstone whose version keeps counting.
    pub fn submit_delete(&self, session_id: &str, path: &str, expected_version: u64) -> Result<WriteOutcome> {
        self.commit(session_id.to_string(), path, None, expected_version)
    }

    fn commit(
        &self,
        session_id: String,
        path: &str,
        new_content: Option<Content>,
        expected_version: u64,
    ) -> Result<WriteOutcome> {
        let req = WriteRequest {
            session_id,
            path: path.to_string(),
            new_content: new_content.clone().unwrap_or_else(|| Arc::from(&[][..])),
            expected_version,
        };
        let path = normalize(&req.path)?;
        let mut guard = self.lock();
        let st = &mut *guard;
        let session = st.session(&req.session_id)?;
        if new_content.is_none() && !st.ws.exists(&path) {
            return Err(Error::NotFound(path));
        }
        let tracked = session.snapshot.get(&path);
        if let Some(observed) = tracked {
            if observed != req.expected_version {
                return Err(Error::ExpectedVersionMismatch {
                    path,
                    expected: req.expected_version,
                    observed,
                });
            }
        }
        let author = session.author.clone();
        let observed = tracked.unwrap_or(req.expected_version);
        let current = st.ws.version(&path);

        st.reap()?;

        if self.config.reservations {
            if let Some(r) = st.reservations.active(&path) {
                if r.holder != req.session_id {
                    let blocking = r.clone();
                    return self.reject_held(st, &req.session_id, &path, observed, current, blocking);
                }
            }
        }

        if self.config.validation {
            // The declared expected version stands in for an unread target;
            // creating a brand-new path has nothing to observe.
            let creating = tracked.is_none() && req.expected_version == 0;
            let mut effective = st.session(&req.session_id)?.snapshot.clone();
            if tracked.is_none() && !creating {
                effective.observe(&path, req.expected_version);
            }
            let mut violations = match validate(&effective, &st.ws) {
                Validity::Valid => Vec::new(),
                Validity::Violations(v) => v,
            };
            if creating && st.ws.exists(&path) {
                // Tried to create a path that already exists.
                violations.push(StaleEntry {
                    path: path.clone(),
                    observed_version: 0,
                    current_version: current,
                });
                violations.sort_by(|a, b| a.path.cmp(&b.path));
            }
            if !violations.is_empty() {
                return self.reject_stale(st, &req.session_id, &path, observed, current, violations);
            }
        }

        let (old, _) = st.ws.get_file(&path).unwrap_or_else(|_| (Arc::from(&[][..]), 0));
        if let Some(prefix) = self.config.comment_prefixes.for_path(&path) {
            if let Ok(report) =
                check_preservation(&old, &req.new_content, prefix, &author, self.config.annotation_policy)
            {
                if report.rejects() {
                    let removed: Vec<String> = report.removed.iter().map(ToString::to_string).collect();
                    st.ws.emit(
                        EventKind::WriteRejected,
                        Some(&req.session_id),
                        Some(&path),
                        EventDetail {
                            conflict: Some(ConflictKind::AnnotationPolicy),
                            observed_version: Some(observed),
                            prior_version: Some(current),
                            removed: removed.clone(),
                            ..Default::default()
                        },
                    )?;
                    *st.session_mut(&req.session_id)?
                        .retry_counts
                        .entry(path.clone())
                        .or_default() += 1;
                    return Ok(WriteOutcome::Rejected(Box::new(ConflictReport {
                        kind: ConflictKind::AnnotationPolicy,
                        target: path,
                        current_target_content: old,
                        target_diff: None,
                        stale: Vec::new(),
                        reservation: None,
                        blocking: None,
                        removed_annotations: removed,
                    })));
                }
                if !report.is_clean() {
                    st.ws.emit(
                        EventKind::AnnotationViolation,
                        Some(&req.session_id),
                        Some(&path),
                        EventDetail {
                            author: Some(author.clone()),
                            removed: report.removed.iter().map(ToString::to_string).collect(),
                            modified: report.modified_blocks.iter().map(ToString::to_string).collect(),
                            ..Default::default()
                        },
                    )?;
                }
            }
        }

        let change = Change {
            writer: &req.session_id,
            session: Some(&req.session_id),
            observed_version: Some(observed),
            branch: None,
        };
        let new_version = match new_content {
            Some(content) => st.ws.apply_change(&path, content, change)?,
            None => st.ws.delete(&path, change)?,
        };
        if let Some(r) = st.reservations.consume(&path, &req.session_id) {
            st.release_event(&r, "consumed")?;
        }
        let session = st.session_mut(&req.session_id)?;
        session.snapshot.observe(&path, new_version);
        session.retry_counts.remove(&path);
        Ok(WriteOutcome::Accepted { new_version })
    }

    fn reject_held(
        &self,
        st: &mut State,
        session_id: &str,
        path: &str,
        observed: u64,
        current: u64,
        blocking: Reservation,
    ) -> Result<WriteOutcome> {
        st.ws.emit(
            EventKind::WriteRejected,
            Some(session_id),
            Some(path),
            EventDetail {
                conflict: Some(ConflictKind::ReservationHeld),
                observed_version: Some(observed),
                prior_version: Some(current),
                holder: Some(blocking.holder.clone()),
                ttl: Some(blocking.remaining(st.ws.now())),
                ..Default::default()
            },
        )?;
        *st.session_mut(session_id)?
            .retry_counts
            .entry(path.to_string())
            .or_default() += 1;
        let content = st.ws.get_file(path).map(|(c, _)| c).unwrap_or_else(|_| Arc::from(&[][..]));
        Ok(WriteOutcome::Rejected(Box::new(ConflictReport {
            kind: ConflictKind::ReservationHeld,
            target: path.to_string(),
            current_target_content: content,
            target_diff: None,
            stale: Vec::new(),
            reservation: None,
            blocking: Some(blocking),
            removed_annotations: Vec::new(),
        })))
    }

    fn reject_stale(
        &self,
        st: &mut State,
        session_id: &str,
        path: &str,
        observed: u64,
        current: u64,
        stale: Vec<StaleEntry>,
    ) -> Result<WriteOutcome> {
        let kind = classify(path, &stale);
        let content = st.ws.get_file(path).map(|(c, _)| c).unwrap_or_else(|_| Arc::from(&[][..]));
        let target_diff = (kind == ConflictKind::Direct).then(|| {
            let before = st.ws.content_at(path, observed).unwrap_or_else(|| Arc::from(&[][..]));
            let label_old = format!("a/{path}@v{observed}");
            let label_new = format!("b/{path}@v{current}");
            match diff::unified_diff_labeled(&before, &content, &label_old, &label_new) {
                Ok(d) => TargetDiff::Unified(d),
                Err(_) => TargetDiff::BinaryChanged,
            }
        });
        st.ws.emit(
            EventKind::WriteRejected,
            Some(session_id),
            Some(path),
            EventDetail {
                conflict: Some(kind),
                observed_version: Some(observed),
                prior_version: Some(current),
                stale: stale.clone(),
                ..Default::default()
            },
        )?;
        *st.session_mut(session_id)?
            .retry_counts
            .entry(path.to_string())
            .or_default() += 1;

        let reservation = if self.config.reservations {
            let now = st.ws.now();
            let seq = st.ws.log().last_seq() + 1;
            let (r, fresh) = st
                .reservations
                .grant(path, session_id, seq, now, self.config.reservation_ttl);
            if fresh {
                st.ws.emit(
                    EventKind::ReservationGranted,
                    Some(session_id),
                    Some(path),
                    EventDetail {
                        holder: Some(session_id.to_string()),
                        ttl: Some(r.ttl),
                        ..Default::default()
                    },
                )?;
            }
            // Another holder cannot exist here: held targets were rejected earlier.
            (r.holder == session_id).then_some(r)
        } else {
            None
        };
        Ok(WriteOutcome::Rejected(Box::new(ConflictReport {
            kind,
            target: path.to_string(),
            current_target_content: content,
            target_diff,
            stale,
            reservation,
            blocking: None,
            removed_annotations: Vec::new(),
        })))
    }

    /// The active reservation on `path`, if any, and its remaining ttl.
    /// Expired reservations are reaped here.
    pub fn reservation_status(&self, path: &str) -> Result<Option<(Reservation, u64)>> {
        let path = normalize(path)?;
        let mut st = self.lock();
        st.reap()?;
        let now = st.ws.now();
        Ok(st.reservations.active(&path).map(|r| (r.clone(), r.remaining(now))))
    }

    pub fn release_reservation(&self, session_id: &str, path: &str) -> Result<()> {
        let path = normalize(path)?;
        let mut st = self.lock();
        st.session(session_id)?;
        st.reap()?;
        let r = st.reservations.release(&path, session_id)?;
        st.release_event(&r, "released")
    }

    /// One out-of-band detection pass against an explicit view.
    pub fn sync_view(&self, view: &BTreeMap<String, Vec<u8>>) -> Result<Vec<String>> {
        self.lock().ws.detect_external_changes(view)
    }

    /// Scans `root` and syncs, holding the commit lock across both so no
    /// mediated write can land between scan and comparison.
    pub fn sync_dir(&self, root: &Path) -> Result<Vec<String>> {
        let mut st = self.lock();
        let view = scan_dir(root)?;
        st.ws.detect_external_changes(&view)
    }

    pub fn annotations(&self, path: &str) -> Result<Vec<IntentAnnotation>> {
        let path = normalize(path)?;
        let st = self.lock();
        let (content, _) = st.ws.get_file(&path)?;
        match self.config.comment_prefixes.for_path(&path) {
            Some(prefix) => parse_annotations(&content, prefix),
            None => Ok(Vec::new()),
        }
    }

    pub fn annotation_digest(&self) -> BTreeMap<String, BTreeMap<String, u64>> {
        annotation_digest(&self.lock().ws, &self.config.comment_prefixes)
    }

    pub fn stats(&self) -> Stats {
        let st = self.lock();
        let log = st.ws.log();
        Stats {
            files: st.ws.live_files().count() as u64,
            sessions_open: st.sessions.len() as u64,
            reservations_active: st.reservations.len() as u64,
            events: log.last_seq(),
            reads: log.count(EventKind::Read),
            writes_accepted: log.count(EventKind::WriteAccepted),
            writes_rejected: log.count(EventKind::WriteRejected),
            external_changes: log.count(EventKind::ExternalChange),
            annotation_violations: log.count(EventKind::AnnotationViolation),
            epoch: st.ws.epoch(),
        }
    }
}
