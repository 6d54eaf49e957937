//! Write-time validation of read snapshots, conflict classification and
//! post-rejection reservations.
//!
//! A write is valid when every file the writer has read is still at the
//! version it observed. When it is not, the rejection is classified as
//! *direct* if the write target itself moved, and as a *stale dependency*
//! if only other read files did. The rejected writer then gets a short
//! exclusive reservation on the target so that two writers cannot keep
//! invalidating each other.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::ReadSnapshot;
use crate::store::{Content, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    Direct,
    StaleDependency,
    ReservationHeld,
    AnnotationPolicy,
}

impl ConflictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConflictKind::Direct => "direct",
            ConflictKind::StaleDependency => "stale_dependency",
            ConflictKind::ReservationHeld => "reservation_held",
            ConflictKind::AnnotationPolicy => "annotation_policy",
        }
    }
}

impl fmt::Display for ConflictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaleEntry {
    pub path: String,
    pub observed_version: u64,
    pub current_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Violations(Vec<StaleEntry>),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

/// Anything that can answer "what version is this path at now".
/// Never-seen paths are version 0; tombstones keep their counter.
pub trait Versions {
    fn current_version(&self, path: &str) -> u64;
}

impl Versions for Workspace {
    fn current_version(&self, path: &str) -> u64 {
        self.version(path)
    }
}

impl Versions for BTreeMap<String, u64> {
    fn current_version(&self, path: &str) -> u64 {
        self.get(path).copied().unwrap_or(0)
    }
}

impl Versions for HashMap<String, u64> {
    fn current_version(&self, path: &str) -> u64 {
        self.get(path).copied().unwrap_or(0)
    }
}

/// Checks every snapshot entry against the store and returns all
/// violations in path order. Pure.
pub fn validate<V: Versions + ?Sized>(snapshot: &ReadSnapshot, store: &V) -> Validity {
    let stale: Vec<StaleEntry> = snapshot
        .iter()
        .filter_map(|(path, observed)| {
            let current = store.current_version(path);
            (observed != current).then(|| StaleEntry {
                path: path.to_string(),
                observed_version: observed,
                current_version: current,
            })
        })
        .collect();
    if stale.is_empty() {
        Validity::Valid
    } else {
        Validity::Violations(stale)
    }
}

/// Direct iff the target is among the violations.
pub fn classify(target: &str, violations: &[StaleEntry]) -> ConflictKind {
    if violations.iter().any(|s| s.path == target) {
        ConflictKind::Direct
    } else {
        ConflictKind::StaleDependency
    }
}

/// What changed in the target since the writer last saw it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetDiff {
    Unified(String),
    BinaryChanged,
}

impl TargetDiff {
    pub fn as_text(&self) -> &str {
        match self {
            TargetDiff::Unified(s) => s,
            TargetDiff::BinaryChanged => crate::diff::BINARY_CHANGED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reservation {
    pub path: String,
    pub holder: String,
    /// Event sequence number of the grant.
    pub granted_at: u64,
    /// Clock reading at grant time.
    pub granted_time: u64,
    pub ttl: u64,
    pub consumed: bool,
}

impl Reservation {
    pub fn expires_at(&self) -> u64 {
        self.granted_time.saturating_add(self.ttl)
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expires_at()
    }

    pub fn remaining(&self, now: u64) -> u64 {
        self.expires_at().saturating_sub(now)
    }
}

#[derive(Debug, Clone)]
pub struct ConflictReport {
    pub kind: ConflictKind,
    pub target: String,
    pub current_target_content: Content,
    /// Present for direct conflicts only.
    pub target_diff: Option<TargetDiff>,
    pub stale: Vec<StaleEntry>,
    /// Reservation granted to (or already held by) the rejected session.
    pub reservation: Option<Reservation>,
    /// For `reservation_held`: the reservation blocking this write.
    pub blocking: Option<Reservation>,
    /// For `annotation_policy`: descriptions of removed foreign annotations.
    pub removed_annotations: Vec<String>,
}

/// Active reservations, at most one per path.
#[derive(Debug, Default, Clone)]
pub struct ReservationTable {
    active: BTreeMap<String, Reservation>,
}

impl ReservationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Removes and returns every reservation expired at `now`.
    pub fn reap(&mut self, now: u64) -> Vec<Reservation> {
        let expired: Vec<String> = self
            .active
            .values()
            .filter(|r| r.is_expired(now))
            .map(|r| r.path.clone())
            .collect();
        expired
            .into_iter()
            .filter_map(|p| self.active.remove(&p))
            .collect()
    }

    pub fn active(&self, path: &str) -> Option<&Reservation> {
        self.active.get(path)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Reservation> {
        self.active.values()
    }

    /// Grants `path` to `holder` if nobody holds it. Returns the active
    /// reservation for `path` after the call and whether it is new.
    pub fn grant(&mut self, path: &str, holder: &str, seq: u64, now: u64, ttl: u64) -> (Reservation, bool) {
        if let Some(r) = self.active.get(path) {
            return (r.clone(), false);
        }
        let r = Reservation {
            path: path.to_string(),
            holder: holder.to_string(),
            granted_at: seq,
            granted_time: now,
            ttl,
            consumed: false,
        };
        self.active.insert(path.to_string(), r.clone());
        (r, true)
    }

    pub fn release(&mut self, path: &str, session: &str) -> Result<Reservation> {
        match self.active.get(path) {
            Some(r) if r.holder == session => Ok(self.active.remove(path).expect("present")),
            _ => Err(Error::NotHolder {
                path: path.to_string(),
                session: session.to_string(),
            }),
        }
    }

    /// Marks the holder's reservation consumed by an accepted write.
    pub fn consume(&mut self, path: &str, session: &str) -> Option<Reservation> {
        match self.active.get(path) {
            Some(r) if r.holder == session => {
                let mut r = self.active.remove(path).expect("present");
                r.consumed = true;
                Some(r)
            }
            _ => None,
        }
    }

    pub fn release_all(&mut self, session: &str) -> Vec<Reservation> {
        let held: Vec<String> = self
            .active
            .values()
            .filter(|r| r.holder == session)
            .map(|r| r.path.clone())
            .collect();
        held.into_iter()
            .filter_map(|p| self.active.remove(&p))
            .collect()
    }
}
