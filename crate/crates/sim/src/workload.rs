//! Workload documents.
//!
//! A workload is a JSON document describing the initial files, the tasks a
//! manager handed out (each with a disjoint primary file set) and the
//! scripted steps each engineer performs. See the README for the schema.

use std::collections::BTreeMap;

use cowork_core::annotations::AnnotationPolicy;
use cowork_core::path::normalize;
use serde::{Deserialize, Serialize};

use crate::content::{GeneratorRegistry, Params};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnReject {
    #[default]
    RefreshAndRetry,
    GiveUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub on_reject: OnReject,
    /// Ticks spent rebuilding the edit between a refresh and the retry.
    #[serde(default)]
    pub rebuild_ticks: u64,
}

fn default_max_retries() -> u32 {
    3
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: default_max_retries(),
            on_reject: OnReject::RefreshAndRetry,
            rebuild_ticks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimStep {
    Read {
        path: String,
    },
    Write {
        path: String,
        rule: String,
        #[serde(default)]
        params: Params,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retry: Option<RetryPolicy>,
    },
    Think {
        duration_ticks: u64,
    },
    Refresh {
        path: String,
    },
    Prune {
        path: String,
    },
}

impl SimStep {
    pub fn path(&self) -> Option<&str> {
        match self {
            SimStep::Read { path }
            | SimStep::Write { path, .. }
            | SimStep::Refresh { path }
            | SimStep::Prune { path } => Some(path),
            SimStep::Think { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub task_id: String,
    pub engineer_id: String,
    pub primary_files: Vec<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub steps: Vec<SimStep>,
}

/// A change made behind the coordinator's back at a tick boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEdit {
    pub at_tick: u64,
    pub path: String,
    pub rule: String,
    #[serde(default)]
    pub params: Params,
}

fn default_ttl_ticks() -> u64 {
    10
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default = "default_ttl_ticks")]
    pub ttl_ticks: u64,
    #[serde(default = "yes")]
    pub reservations: bool,
    #[serde(default)]
    pub annotation_policy: AnnotationPolicy,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    pub tasks: Vec<TaskAssignment>,
    #[serde(default)]
    pub external_edits: Vec<ExternalEdit>,
}

impl Workload {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut w: Workload = serde_json::from_str(text)?;
        w.normalize_paths()?;
        w.check(&GeneratorRegistry::default())?;
        Ok(w)
    }

    fn normalize_paths(&mut self) -> Result<()> {
        let mut files = BTreeMap::new();
        for (p, c) in std::mem::take(&mut self.files) {
            let p = normalize(&p)?;
            if files.insert(p.clone(), c).is_some() {
                return Err(SimError::Invalid(format!("duplicate initial file {p}")));
            }
        }
        self.files = files;
        for t in &mut self.tasks {
            for p in &mut t.primary_files {
                *p = normalize(p)?;
            }
            for s in &mut t.steps {
                match s {
                    SimStep::Read { path }
                    | SimStep::Write { path, .. }
                    | SimStep::Refresh { path }
                    | SimStep::Prune { path } => *path = normalize(path)?,
                    SimStep::Think { .. } => {}
                }
            }
        }
        for e in &mut self.external_edits {
            e.path = normalize(&e.path)?;
        }
        Ok(())
    }

    /// Structural checks: disjoint primary file sets, unique task ids,
    /// positive think durations, known content rules.
    pub fn check(&self, generators: &GeneratorRegistry) -> Result<()> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.task_id.as_str()) {
                return Err(SimError::Invalid(format!("duplicate task id {}", t.task_id)));
            }
            if t.engineer_id.is_empty() || t.engineer_id.contains(char::is_whitespace) {
                return Err(SimError::Invalid(format!("bad engineer id {:?}", t.engineer_id)));
            }
            for p in &t.primary_files {
                if let Some(first) = owner.insert(p, &t.task_id) {
                    if first != t.task_id {
                        return Err(SimError::OverlappingPrimaryFiles {
                            first: first.to_string(),
                            second: t.task_id.clone(),
                            path: p.clone(),
                        });
                    }
                }
            }
            for s in &t.steps {
                match s {
                    SimStep::Think { duration_ticks: 0 } => {
                        return Err(SimError::Invalid(format!("{}: think needs duration_ticks >= 1", t.task_id)));
                    }
                    SimStep::Write { rule, params, .. } => generators.get(rule)?.check(params)?,
                    _ => {}
                }
            }
        }
        for e in &self.external_edits {
            generators.get(&e.rule)?.check(&e.params)?;
        }
        Ok(())
    }
}
