//! Authoritative versioned file store.
//!
//! Each file carries a version counter starting at 1 that advances by
//! exactly one on every applied change, whether the change came through the
//! coordinator or was found on disk by [`Workspace::detect_external_changes`].
//! Deletions leave a tombstone so the counter survives delete-then-recreate.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::diff;
use crate::error::{Error, Result};
use crate::event::{replay, EventDetail, EventKind, EventLog, Replay, WorkspaceEvent};
use crate::path::normalize;

pub type Content = Arc<[u8]>;

pub const INIT_WRITER: &str = "init";
pub const EXTERNAL_WRITER: &str = "external";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Text,
    Binary,
}

impl TextKind {
    pub fn of(bytes: &[u8]) -> Self {
        if diff::is_text(bytes) {
            TextKind::Text
        } else {
            TextKind::Binary
        }
    }
}

#[derive(Debug, Clone)]
pub struct FileRecord {
    pub path: String,
    pub content: Content,
    pub version: u64,
    pub last_writer: String,
    pub text_kind: TextKind,
    /// Tombstone: the path was deleted at `version`.
    pub deleted: bool,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Where accepted content is materialized, in two phases around the
/// log append. `stage` runs before the event is logged and must leave the
/// visible tree untouched; `publish` runs after. The logged event is the
/// commit point: [`repair_dir`] rolls a staged change forward when its
/// event made it into the log and discards it otherwise.
pub trait Backing: Send {
    fn stage(&mut self, path: &str, content: Option<&[u8]>) -> io::Result<()>;
    fn publish(&mut self, path: &str, content: Option<&[u8]>) -> io::Result<()>;
}

const STAGED_SUFFIX: &str = ".cowork-tmp";
const DELETING_SUFFIX: &str = ".cowork-del";

fn sidecar(target: &Path, suffix: &str) -> PathBuf {
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    target.with_file_name(format!(".{name}{suffix}"))
}

fn is_sidecar(name: &str) -> bool {
    name.starts_with('.') && (name.ends_with(STAGED_SUFFIX) || name.ends_with(DELETING_SUFFIX))
}

/// Mirrors the store into a plain directory. New content is staged in a
/// hidden sibling and renamed into place; deletes first move the file
/// aside.
#[derive(Debug, Clone)]
pub struct DirBacking {
    root: PathBuf,
}

impl DirBacking {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirBacking { root: root.into() }
    }
}

impl Backing for DirBacking {
    fn stage(&mut self, path: &str, content: Option<&[u8]>) -> io::Result<()> {
        let target = self.root.join(path);
        match content {
            Some(bytes) => {
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(sidecar(&target, STAGED_SUFFIX), bytes)
            }
            None => match fs::rename(&target, sidecar(&target, DELETING_SUFFIX)) {
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
                other => other,
            },
        }
    }

    fn publish(&mut self, path: &str, content: Option<&[u8]>) -> io::Result<()> {
        let target = self.root.join(path);
        match content {
            Some(_) => fs::rename(sidecar(&target, STAGED_SUFFIX), &target),
            None => match fs::remove_file(sidecar(&target, DELETING_SUFFIX)) {
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
                other => other,
            },
        }
    }
}

/// Settles changes a crash left half-done under `root`, using the log as
/// the record of what committed. Returns the paths whose visible content
/// was changed by the repair.
pub fn repair_dir(root: &Path, replayed: &Replay) -> Result<Vec<String>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let ft = entry.file_type()?;
            if ft.is_dir() {
                walk(&entry.path(), out)?;
            } else if ft.is_file() && is_sidecar(&entry.file_name().to_string_lossy()) {
                out.push(entry.path());
            }
        }
        Ok(())
    }
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| Error::Io { path: p, source }
    };
    let mut found = Vec::new();
    walk(root, &mut found).map_err(io_err(root))?;
    found.sort();
    let mut touched = Vec::new();
    for side in found {
        let name = side.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let (suffix, staged) = if name.ends_with(STAGED_SUFFIX) {
            (STAGED_SUFFIX, true)
        } else {
            (DELETING_SUFFIX, false)
        };
        let target = side.with_file_name(&name[1..name.len() - suffix.len()]);
        let rel = target
            .strip_prefix(root)
            .expect("walk stays under root")
            .to_string_lossy()
            .replace('\\', "/");
        let logged = replayed.files.get(&rel);
        if staged {
            let bytes = fs::read(&side).map_err(io_err(&side))?;
            let committed = logged
                .is_some_and(|f| !f.deleted && f.sha256.as_deref() == Some(content_hash(&bytes).as_str()));
            let in_place = fs::read(&target).ok().is_some_and(|b| b == bytes);
            if committed && !in_place {
                fs::rename(&side, &target).map_err(io_err(&side))?;
                touched.push(rel);
            } else {
                fs::remove_file(&side).map_err(io_err(&side))?;
            }
        } else {
            let deleted = logged.is_none_or(|f| f.deleted);
            if !deleted && !target.exists() {
                fs::rename(&side, &target).map_err(io_err(&side))?;
                touched.push(rel);
            } else {
                fs::remove_file(&side).map_err(io_err(&side))?;
            }
        }
    }
    Ok(touched)
}

/// Reads every regular file below `root` as (relative path, bytes).
/// Staging files left by [`DirBacking`] are skipped.
pub fn scan_dir(root: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<()> {
        let io_err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| Error::Io { path: p, source }
        };
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<io::Result<_>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            let ft = entry.file_type().map_err(io_err(&path))?;
            if ft.is_dir() {
                walk(root, &path, out)?;
            } else if ft.is_file() {
                let name = entry.file_name();
                let name = name.to_string_lossy();
                if is_sidecar(&name) {
                    continue;
                }
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                out.insert(rel, bytes);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Who made a change, and what they had observed of the target.
#[derive(Debug, Clone, Default)]
pub struct Change<'a> {
    pub writer: &'a str,
    pub session: Option<&'a str>,
    pub observed_version: Option<u64>,
    pub branch: Option<&'a str>,
}

pub struct Workspace {
    files: BTreeMap<String, FileRecord>,
    history: HashMap<String, BTreeMap<u64, Content>>,
    log: EventLog,
    epoch: u64,
    clock: Arc<dyn Clock>,
    backing: Option<Box<dyn Backing>>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("files", &self.files.len())
            .field("epoch", &self.epoch)
            .field("log", &self.log)
            .finish()
    }
}

impl Workspace {
    /// Builds a workspace whose files all start at version 1, and logs the
    /// init marker. Paths are normalized; two raw paths that normalize to
    /// the same key are a collision.
    pub fn init<I, P>(source: I, log: EventLog, clock: Arc<dyn Clock>) -> Result<Self>
    where
        I: IntoIterator<Item = (P, Vec<u8>)>,
        P: AsRef<str>,
    {
        let mut ws = Workspace {
            files: BTreeMap::new(),
            history: HashMap::new(),
            log,
            epoch: 0,
            clock,
            backing: None,
        };
        let mut hashes = BTreeMap::new();
        for (raw, bytes) in source {
            let path = normalize(raw.as_ref())?;
            if ws.files.contains_key(&path) {
                return Err(Error::PathCollision(path));
            }
            hashes.insert(path.clone(), content_hash(&bytes));
            ws.insert_record(&path, bytes.into(), 1, INIT_WRITER, false);
        }
        let now = ws.clock.now();
        ws.log.append(
            EventKind::Init,
            None,
            None,
            EventDetail {
                files: hashes,
                ..Default::default()
            },
            now,
        )?;
        Ok(ws)
    }

    pub fn init_from_dir(root: &Path, log: EventLog, clock: Arc<dyn Clock>) -> Result<Self> {
        Self::init(scan_dir(root)?, log, clock)
    }

    /// Rebuilds a workspace from a previous log and the directory it
    /// mirrored. Paths whose on-disk bytes no longer match the logged hash
    /// are advanced as external changes, as are files the log never saw.
    pub fn recover(
        events: &[WorkspaceEvent],
        view: &BTreeMap<String, Vec<u8>>,
        log: EventLog,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let replayed = replay(events);
        if !replayed.is_consistent() {
            return Err(Error::EventLog(replayed.issues.join("; ")));
        }
        let mut ws = Workspace {
            files: BTreeMap::new(),
            history: HashMap::new(),
            log: log.resume_after(replayed.last_seq),
            epoch: replayed.epoch,
            clock,
            backing: None,
        };
        let mut drifted = Vec::new();
        for (path, f) in &replayed.files {
            let on_disk = view.get(path);
            let matches = match (on_disk, f.deleted) {
                (None, true) => true,
                (Some(bytes), false) => f.sha256.as_deref() == Some(content_hash(bytes).as_str()),
                _ => false,
            };
            let content: Content = on_disk.map(|b| b.as_slice().into()).unwrap_or_else(|| Arc::from(&[][..]));
            ws.insert_record(path, content, f.version, &f.last_writer, f.deleted);
            if !matches {
                drifted.push(path.clone());
            }
        }
        ws.epoch += 1;
        for path in drifted {
            ws.external_update(&path, view.get(&path).map(|b| b.as_slice()))?;
        }
        for (path, bytes) in view {
            if !ws.files.contains_key(path) {
                ws.external_update(path, Some(bytes))?;
            }
        }
        Ok(ws)
    }

    pub fn set_backing(&mut self, backing: Box<dyn Backing>) {
        self.backing = Some(backing);
    }

    fn insert_record(&mut self, path: &str, content: Content, version: u64, writer: &str, deleted: bool) {
        self.history
            .entry(path.to_string())
            .or_default()
            .insert(version, content.clone());
        self.files.insert(
            path.to_string(),
            FileRecord {
                path: path.to_string(),
                text_kind: TextKind::of(&content),
                content,
                version,
                last_writer: writer.to_string(),
                deleted,
            },
        );
    }

    /// Current content and version of a live file.
    pub fn get_file(&self, path: &str) -> Result<(Content, u64)> {
        match self.files.get(path) {
            Some(r) if !r.deleted => Ok((r.content.clone(), r.version)),
            _ => Err(Error::NotFound(path.to_string())),
        }
    }

    pub fn record(&self, path: &str) -> Option<&FileRecord> {
        self.files.get(path)
    }

    /// Current version counter, counting tombstones; 0 for never-seen paths.
    pub fn version(&self, path: &str) -> u64 {
        self.files.get(path).map_or(0, |r| r.version)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.files.get(path).is_some_and(|r| !r.deleted)
    }

    /// Content as of `version`, if retained. Version 0 is the empty file.
    pub fn content_at(&self, path: &str, version: u64) -> Option<Content> {
        if version == 0 {
            return Some(Arc::from(&[][..]));
        }
        self.history.get(path)?.get(&version).cloned()
    }

    pub fn files(&self) -> impl Iterator<Item = &FileRecord> {
        self.files.values()
    }

    pub fn live_files(&self) -> impl Iterator<Item = &FileRecord> {
        self.files.values().filter(|r| !r.deleted)
    }

    /// Live contents keyed by path.
    pub fn contents(&self) -> BTreeMap<String, Content> {
        self.live_files()
            .map(|r| (r.path.clone(), r.content.clone()))
            .collect()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Appends an event stamped with the workspace clock.
    pub fn emit(
        &mut self,
        kind: EventKind,
        session: Option<&str>,
        path: Option<&str>,
        detail: EventDetail,
    ) -> Result<u64> {
        let now = self.clock.now();
        self.log.append(kind, session, path, detail, now)
    }

    /// Commit half of validate-then-apply: replaces content, bumps the
    /// version by one and logs `write_accepted`. Creating a path (or
    /// reviving a tombstone) is flagged as `created`.
    pub fn apply_change(&mut self, path: &str, content: Content, change: Change<'_>) -> Result<u64> {
        let prior = self.files.get(path);
        let prior_version = prior.map_or(0, |r| r.version);
        let created = prior.is_none_or(|r| r.deleted);
        let old: Content = match prior {
            Some(r) if !r.deleted => r.content.clone(),
            _ => Arc::from(&[][..]),
        };
        if let Some(b) = self.backing.as_mut() {
            b.stage(path, Some(&content))?;
        }
        let new_version = prior_version + 1;
        let (added, removed) = diff::line_stats(&old, &content).unzip();
        let detail = EventDetail {
            prior_version: Some(prior_version),
            new_version: Some(new_version),
            observed_version: change.observed_version,
            created,
            writer: Some(change.writer.to_string()),
            sha256: Some(content_hash(&content)),
            lines_added: added,
            lines_removed: removed,
            branch: change.branch.map(str::to_string),
            ..Default::default()
        };
        self.emit(EventKind::WriteAccepted, change.session, Some(path), detail)?;
        self.insert_record(path, content.clone(), new_version, change.writer, false);
        if let Some(b) = self.backing.as_mut() {
            b.publish(path, Some(&content))?;
        }
        Ok(new_version)
    }

    /// Writes a tombstone. Deleting an absent path is not-found.
    pub fn delete(&mut self, path: &str, change: Change<'_>) -> Result<u64> {
        let (old, prior_version) = self.get_file(path)?;
        if let Some(b) = self.backing.as_mut() {
            b.stage(path, None)?;
        }
        let new_version = prior_version + 1;
        let removed = diff::line_stats(&old, b"").map(|(_, r)| r);
        let detail = EventDetail {
            prior_version: Some(prior_version),
            new_version: Some(new_version),
            observed_version: change.observed_version,
            deleted: true,
            writer: Some(change.writer.to_string()),
            lines_removed: removed,
            branch: change.branch.map(str::to_string),
            ..Default::default()
        };
        self.emit(EventKind::WriteAccepted, change.session, Some(path), detail)?;
        self.insert_record(path, Arc::from(&[][..]), new_version, change.writer, true);
        if let Some(b) = self.backing.as_mut() {
            b.publish(path, None)?;
        }
        Ok(new_version)
    }

    /// One out-of-band sync pass against a snapshot of the backing
    /// directory. Differing files are advanced with writer `external`,
    /// new files are ingested, vanished files are tombstoned.
    pub fn detect_external_changes(&mut self, view: &BTreeMap<String, Vec<u8>>) -> Result<Vec<String>> {
        self.epoch += 1;
        let mut changed = Vec::new();
        let mut vanished = Vec::new();
        for r in self.files.values() {
            if !r.deleted && !view.contains_key(&r.path) {
                vanished.push(r.path.clone());
            }
        }
        for (raw, bytes) in view {
            let path = normalize(raw)?;
            let differs = match self.files.get(&path) {
                Some(r) if !r.deleted => r.content[..] != bytes[..],
                _ => true,
            };
            if differs {
                self.external_update(&path, Some(bytes))?;
                changed.push(path);
            }
        }
        for path in vanished {
            self.external_update(&path, None)?;
            changed.push(path);
        }
        changed.sort();
        Ok(changed)
    }

    fn external_update(&mut self, path: &str, bytes: Option<&[u8]>) -> Result<u64> {
        let prior = self.files.get(path);
        let prior_version = prior.map_or(0, |r| r.version);
        let old: Content = match prior {
            Some(r) if !r.deleted => r.content.clone(),
            _ => Arc::from(&[][..]),
        };
        let created = prior.is_none_or(|r| r.deleted) && bytes.is_some();
        let new_version = prior_version + 1;
        let new: Content = bytes.map(Into::into).unwrap_or_else(|| Arc::from(&[][..]));
        let (added, removed) = diff::line_stats(&old, &new).unzip();
        let detail = EventDetail {
            prior_version: Some(prior_version),
            new_version: Some(new_version),
            created,
            deleted: bytes.is_none(),
            writer: Some(EXTERNAL_WRITER.into()),
            sha256: bytes.map(content_hash),
            lines_added: added,
            lines_removed: removed,
            epoch: Some(self.epoch),
            ..Default::default()
        };
        self.emit(EventKind::ExternalChange, None, Some(path), detail)?;
        self.insert_record(path, new, new_version, EXTERNAL_WRITER, bytes.is_none());
        Ok(new_version)
    }
}
