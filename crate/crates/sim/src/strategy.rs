//! Coordination strategies the simulator can run a workload under.
//!
//! Every strategy exposes the same file operations to the scripted agents
//! and records what happened in a workspace event log. Strategies are
//! registered by name and picked at runtime.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use cowork_core::conflict::ConflictKind;
use cowork_core::event::{EventDetail, EventKind, WorkspaceEvent};
use cowork_core::store::{content_hash, Change};
use cowork_core::{
    Clock, Coordinator, CoordinatorConfig, Error as CoreError, EventLog, ManualClock, OpenSession, RefreshStatus,
    Workspace, WriteOutcome, WriteRequest,
};

use crate::error::{Result, SimError};
use crate::merge::merge3;
use crate::workload::{TaskAssignment, Workload};

/// Writer recorded for integration commits made by the end-of-run merge.
pub const MERGE_WRITER: &str = "merge";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimWrite {
    Accepted { version: u64 },
    Rejected { kind: ConflictKind, stale_paths: Vec<String> },
}

/// What a strategy leaves behind.
#[derive(Debug, Clone)]
pub struct Finished {
    pub files: BTreeMap<String, String>,
    pub events: Vec<WorkspaceEvent>,
}

pub trait CoordinationStrategy {
    fn name(&self) -> &'static str;

    /// Starts an agent's session; returns its id.
    fn open(&mut self, task: &TaskAssignment) -> Result<String>;

    /// Content and version, or `None` if the path does not exist.
    fn read(&mut self, session: &str, path: &str) -> Result<Option<(String, u64)>>;

    fn write(&mut self, session: &str, path: &str, content: &str, expected: u64) -> Result<SimWrite>;

    /// Re-observes `paths`, returning fresh content per path.
    fn refresh(&mut self, session: &str, paths: &[String]) -> Result<Vec<(String, Option<(String, u64)>)>>;

    fn prune(&mut self, session: &str, path: &str) -> Result<()>;

    /// Whether another session holds a reservation on `path`.
    fn blocked(&mut self, session: &str, path: &str) -> Result<bool>;

    fn close(&mut self, session: &str) -> Result<()>;

    /// Current content of the shared tree, as an outside tool would see it.
    fn shared_content(&self, path: &str) -> Option<String>;

    /// A change made outside the mediator, followed by one detection pass.
    fn external_edit(&mut self, path: &str, content: &str) -> Result<()>;

    /// Ends the run: integrates private copies if there are any.
    fn finish(self: Box<Self>) -> Result<Finished>;
}

pub struct StrategyContext {
    pub clock: Arc<ManualClock>,
}

pub type StrategyFactory = fn(&StrategyContext, &Workload) -> Result<Box<dyn CoordinationStrategy>>;

#[derive(Clone)]
pub struct StrategyRegistry {
    by_name: BTreeMap<&'static str, StrategyFactory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry {
            by_name: BTreeMap::new(),
        };
        r.register("shared_occ", SharedStrategy::occ);
        r.register("worktree_merge", WorktreeStrategy::create);
        r.register("soft_isolation", SharedStrategy::soft);
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, name: &'static str, factory: StrategyFactory) {
        self.by_name.insert(name, factory);
    }

    pub fn create(&self, name: &str, ctx: &StrategyContext, workload: &Workload) -> Result<Box<dyn CoordinationStrategy>> {
        let factory = self
            .by_name
            .get(name)
            .ok_or_else(|| SimError::UnknownStrategy(name.to_string()))?;
        factory(ctx, workload)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.by_name.keys().copied()
    }
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn initial_workspace(ctx: &StrategyContext, w: &Workload) -> Result<Workspace> {
    let clock: Arc<dyn Clock> = ctx.clock.clone();
    Ok(Workspace::init(
        w.files.iter().map(|(p, c)| (p.as_str(), c.as_bytes().to_vec())),
        EventLog::in_memory(),
        clock,
    )?)
}

fn open_request(task: &TaskAssignment) -> OpenSession {
    OpenSession {
        role: Default::default(),
        author: Some(task.engineer_id.clone()),
        task: Some(task.task_id.clone()),
    }
}

/// One shared tree behind the mediator. With validation off this is the
/// instruction-only baseline: every write lands.
pub struct SharedStrategy {
    name: &'static str,
    co: Coordinator,
}

impl SharedStrategy {
    fn occ(ctx: &StrategyContext, w: &Workload) -> Result<Box<dyn CoordinationStrategy>> {
        let config = CoordinatorConfig {
            reservation_ttl: w.ttl_ticks,
            reservations: w.reservations,
            validation: true,
            annotation_policy: w.annotation_policy,
            ..Default::default()
        };
        Ok(Box::new(SharedStrategy {
            name: "shared_occ",
            co: Coordinator::new(initial_workspace(ctx, w)?, config),
        }))
    }

    fn soft(ctx: &StrategyContext, w: &Workload) -> Result<Box<dyn CoordinationStrategy>> {
        let config = CoordinatorConfig {
            reservation_ttl: w.ttl_ticks,
            reservations: false,
            validation: false,
            annotation_policy: w.annotation_policy,
            ..Default::default()
        };
        Ok(Box::new(SharedStrategy {
            name: "soft_isolation",
            co: Coordinator::new(initial_workspace(ctx, w)?, config),
        }))
    }
}

impl CoordinationStrategy for SharedStrategy {
    fn name(&self) -> &'static str {
        self.name
    }

    fn open(&mut self, task: &TaskAssignment) -> Result<String> {
        Ok(self.co.open_session(open_request(task))?)
    }

    fn read(&mut self, session: &str, path: &str) -> Result<Option<(String, u64)>> {
        match self.co.read(session, path) {
            Ok((c, v)) => Ok(Some((text(&c), v))),
            Err(CoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn write(&mut self, session: &str, path: &str, content: &str, expected: u64) -> Result<SimWrite> {
        let outcome = self.co.submit_write(WriteRequest {
            session_id: session.to_string(),
            path: path.to_string(),
            new_content: Arc::from(content.as_bytes()),
            expected_version: expected,
        })?;
        Ok(match outcome {
            WriteOutcome::Accepted { new_version } => SimWrite::Accepted { version: new_version },
            WriteOutcome::Rejected(r) => SimWrite::Rejected {
                kind: r.kind,
                stale_paths: r.stale.into_iter().map(|s| s.path).collect(),
            },
        })
    }

    fn refresh(&mut self, session: &str, paths: &[String]) -> Result<Vec<(String, Option<(String, u64)>)>> {
        let statuses = self.co.refresh(session, paths.iter().map(String::as_str))?;
        // Single-threaded: nothing can commit between refresh and this lookup.
        Ok(self.co.with_workspace(|ws| {
            statuses
                .into_iter()
                .map(|(p, st)| {
                    let fresh = match st {
                        RefreshStatus::Current(v) => ws.get_file(&p).ok().map(|(c, _)| (text(&c), v)),
                        RefreshStatus::NotFound => None,
                    };
                    (p, fresh)
                })
                .collect()
        }))
    }

    fn prune(&mut self, session: &str, path: &str) -> Result<()> {
        self.co.prune(session, [path])?;
        Ok(())
    }

    fn blocked(&mut self, session: &str, path: &str) -> Result<bool> {
        Ok(self
            .co
            .reservation_status(path)?
            .is_some_and(|(r, _)| r.holder != session))
    }

    fn close(&mut self, session: &str) -> Result<()> {
        Ok(self.co.close_session(session)?)
    }

    fn shared_content(&self, path: &str) -> Option<String> {
        self.co.with_workspace(|ws| ws.get_file(path).ok().map(|(c, _)| text(&c)))
    }

    fn external_edit(&mut self, path: &str, content: &str) -> Result<()> {
        let mut view: BTreeMap<String, Vec<u8>> = self
            .co
            .with_workspace(|ws| ws.contents().into_iter().map(|(p, c)| (p, c.to_vec())).collect());
        view.insert(path.to_string(), content.as_bytes().to_vec());
        self.co.sync_view(&view)?;
        Ok(())
    }

    fn finish(self: Box<Self>) -> Result<Finished> {
        let events = self.co.events();
        let files = self
            .co
            .with_workspace(|ws| ws.contents().into_iter().map(|(p, c)| (p, text(&c))).collect());
        Ok(Finished { files, events })
    }
}

struct Branch {
    session: String,
    name: String,
    engineer_id: String,
    task_id: String,
    fork: BTreeMap<String, (String, u64)>,
    files: BTreeMap<String, (String, u64)>,
    modified: BTreeSet<String>,
}

/// Each agent edits a private copy taken when its session opens. Nothing
/// is validated during the run; at the end the copies are folded into the
/// shared tree one by one with a three-way merge, in (engineer, task)
/// order. A conflicting hunk keeps the side already integrated.
pub struct WorktreeStrategy {
    ws: Workspace,
    branches: BTreeMap<String, Branch>,
    next_session: u64,
}

impl WorktreeStrategy {
    fn create(ctx: &StrategyContext, w: &Workload) -> Result<Box<dyn CoordinationStrategy>> {
        Ok(Box::new(WorktreeStrategy {
            ws: initial_workspace(ctx, w)?,
            branches: BTreeMap::new(),
            next_session: 1,
        }))
    }

    fn branch(&mut self, session: &str) -> Result<&mut Branch> {
        self.branches
            .get_mut(session)
            .ok_or_else(|| CoreError::UnknownSession(session.to_string()).into())
    }

    fn observe(&mut self, session: &str, path: &str, refresh: bool) -> Result<Option<(String, u64)>> {
        let b = self.branch(session)?;
        let found = b.files.get(path).cloned();
        let name = b.name.clone();
        if let Some((_, v)) = &found {
            let detail = EventDetail {
                version: Some(*v),
                refresh,
                branch: Some(name),
                ..Default::default()
            };
            self.ws.emit(EventKind::Read, Some(session), Some(path), detail)?;
        }
        Ok(found)
    }
}

impl CoordinationStrategy for WorktreeStrategy {
    fn name(&self) -> &'static str {
        "worktree_merge"
    }

    fn open(&mut self, task: &TaskAssignment) -> Result<String> {
        let session = format!("s{}", self.next_session);
        self.next_session += 1;
        let name = format!("wt/{}", task.task_id);
        let fork: BTreeMap<String, (String, u64)> = self
            .ws
            .live_files()
            .map(|r| (r.path.clone(), (text(&r.content), r.version)))
            .collect();
        let req = open_request(task);
        self.ws.emit(
            EventKind::SessionOpened,
            Some(&session),
            None,
            EventDetail {
                role: Some(req.role.as_str().to_string()),
                author: req.author,
                task: req.task,
                branch: Some(name.clone()),
                ..Default::default()
            },
        )?;
        self.branches.insert(
            session.clone(),
            Branch {
                session: session.clone(),
                name,
                engineer_id: task.engineer_id.clone(),
                task_id: task.task_id.clone(),
                files: fork.clone(),
                fork,
                modified: BTreeSet::new(),
            },
        );
        Ok(session)
    }

    fn read(&mut self, session: &str, path: &str) -> Result<Option<(String, u64)>> {
        self.observe(session, path, false)
    }

    fn write(&mut self, session: &str, path: &str, content: &str, expected: u64) -> Result<SimWrite> {
        let b = self.branch(session)?;
        let prior = b.files.get(path).map_or(0, |(_, v)| *v);
        let old = b.files.get(path).map(|(c, _)| c.clone()).unwrap_or_default();
        let new_version = prior + 1;
        let writer = b.engineer_id.clone();
        let name = b.name.clone();
        b.files.insert(path.to_string(), (content.to_string(), new_version));
        b.modified.insert(path.to_string());
        let (added, removed) = cowork_core::diff::line_stats(old.as_bytes(), content.as_bytes()).unzip();
        let detail = EventDetail {
            prior_version: Some(prior),
            new_version: Some(new_version),
            observed_version: Some(expected),
            created: prior == 0,
            writer: Some(writer),
            sha256: Some(content_hash(content.as_bytes())),
            lines_added: added,
            lines_removed: removed,
            branch: Some(name),
            ..Default::default()
        };
        self.ws.emit(EventKind::WriteAccepted, Some(session), Some(path), detail)?;
        Ok(SimWrite::Accepted { version: new_version })
    }

    fn refresh(&mut self, session: &str, paths: &[String]) -> Result<Vec<(String, Option<(String, u64)>)>> {
        paths
            .iter()
            .map(|p| Ok((p.clone(), self.observe(session, p, true)?)))
            .collect()
    }

    fn prune(&mut self, session: &str, _path: &str) -> Result<()> {
        self.branch(session).map(drop)
    }

    fn blocked(&mut self, _session: &str, _path: &str) -> Result<bool> {
        Ok(false)
    }

    fn close(&mut self, session: &str) -> Result<()> {
        let name = self.branch(session)?.name.clone();
        self.ws.emit(
            EventKind::SessionClosed,
            Some(session),
            None,
            EventDetail {
                branch: Some(name),
                ..Default::default()
            },
        )?;
        Ok(())
    }

    fn shared_content(&self, path: &str) -> Option<String> {
        self.ws.get_file(path).ok().map(|(c, _)| text(&c))
    }

    fn external_edit(&mut self, path: &str, content: &str) -> Result<()> {
        let mut view: BTreeMap<String, Vec<u8>> =
            self.ws.contents().into_iter().map(|(p, c)| (p, c.to_vec())).collect();
        view.insert(path.to_string(), content.as_bytes().to_vec());
        self.ws.detect_external_changes(&view)?;
        Ok(())
    }

    fn finish(mut self: Box<Self>) -> Result<Finished> {
        let mut order: Vec<&Branch> = self.branches.values().collect();
        order.sort_by(|a, b| (&a.engineer_id, &a.task_id).cmp(&(&b.engineer_id, &b.task_id)));
        for b in order {
            for path in &b.modified {
                let base = b.fork.get(path).map(|(c, _)| c.as_str()).unwrap_or("");
                let (ours, version) = match self.ws.get_file(path) {
                    Ok((c, v)) => (text(&c), v),
                    Err(_) => (String::new(), self.ws.version(path)),
                };
                let theirs = &b.files[path].0;
                let outcome = merge3(base, &ours, theirs);
                if outcome.conflicts > 0 {
                    let detail = EventDetail {
                        hunks: Some(outcome.conflicts as u64),
                        branch: Some(b.name.clone()),
                        writer: Some(MERGE_WRITER.to_string()),
                        ..Default::default()
                    };
                    self.ws.emit(EventKind::MergeConflict, Some(&b.session), Some(path), detail)?;
                }
                let unchanged = self.ws.exists(path) && outcome.merged == ours;
                if !unchanged {
                    let change = Change {
                        writer: MERGE_WRITER,
                        session: None,
                        observed_version: Some(version),
                        branch: None,
                    };
                    self.ws.apply_change(path, Arc::from(outcome.merged.as_bytes()), change)?;
                }
            }
        }
        let files = self.ws.contents().into_iter().map(|(p, c)| (p, text(&c))).collect();
        Ok(Finished {
            files,
            events: self.ws.log().events().to_vec(),
        })
    }
}
