//! Per-client read snapshots.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Informational label; the manager role may additionally sync and read
/// stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Manager,
    #[default]
    Engineer,
    ExternalTool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Manager => "manager",
            Role::Engineer => "engineer",
            Role::ExternalTool => "external_tool",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "manager" => Ok(Role::Manager),
            "engineer" => Ok(Role::Engineer),
            "external_tool" => Ok(Role::ExternalTool),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Observed version per path. Every entry is at least 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadSnapshot {
    entries: BTreeMap<String, u64>,
}

impl ReadSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an observation, overwriting any earlier one for `path`.
    pub fn observe(&mut self, path: &str, version: u64) {
        debug_assert!(version >= 1);
        self.entries.insert(path.to_string(), version);
    }

    pub fn get(&self, path: &str) -> Option<u64> {
        self.entries.get(path).copied()
    }

    pub fn remove(&mut self, path: &str) -> Option<u64> {
        self.entries.remove(path)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(p, v)| (p.as_str(), *v))
    }
}

impl FromIterator<(String, u64)> for ReadSnapshot {
    fn from_iter<T: IntoIterator<Item = (String, u64)>>(iter: T) -> Self {
        ReadSnapshot {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub role: Role,
    /// Identity used for intent annotations; defaults to the session id.
    pub author: String,
    pub task: Option<String>,
    pub snapshot: ReadSnapshot,
    pub opened_at: u64,
    /// Consecutive rejections per target path, reset on acceptance.
    pub retry_counts: BTreeMap<String, u32>,
}

impl Session {
    pub fn new(session_id: String, role: Role, author: Option<String>, task: Option<String>, opened_at: u64) -> Self {
        Session {
            author: author.unwrap_or_else(|| session_id.clone()),
            session_id,
            role,
            task,
            snapshot: ReadSnapshot::new(),
            opened_at,
            retry_counts: BTreeMap::new(),
        }
    }

    pub fn prune<'a>(&mut self, paths: impl IntoIterator<Item = &'a str>) {
        for p in paths {
            self.snapshot.remove(p);
        }
    }
}
