//! Run metrics derived from an event log, the coupling score, and CSV
//! reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use cowork_core::event::{EventKind, WorkspaceEvent};
use serde::Serialize;

use crate::error::Result;
use crate::workload::{TaskAssignment, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Low,
    Medium,
    High,
}

impl Stratum {
    pub fn of(score: f64) -> Self {
        if score < 0.25 {
            Stratum::Low
        } else if score < 0.5 {
            Stratum::Medium
        } else {
            Stratum::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Low => "low",
            Stratum::Medium => "medium",
            Stratum::High => "high",
        }
    }
}

/// The four signals behind the coupling score, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CouplingSignals {
    pub overlap: f64,
    pub dependency: f64,
    pub multi_file: f64,
    pub rejection: f64,
}

impl CouplingSignals {
    /// Equal-weight mean.
    pub fn score(&self) -> f64 {
        (self.overlap + self.dependency + self.multi_file + self.rejection) / 4.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub workload: String,
    pub mode: String,
    pub seed: u64,
    pub write_attempts: u64,
    pub accepted: u64,
    pub acceptance_rate: f64,
    pub pre_commit_conflicts: u64,
    pub post_commit_conflicts: u64,
    /// Accepted shared-tree writes whose writer had observed an older
    /// version than the one they replaced.
    pub lost_updates: u64,
    pub lost_update_paths: BTreeSet<String>,
    /// Paths written by more than one session.
    pub contested_paths: BTreeSet<String>,
    pub access_sets: BTreeMap<String, BTreeSet<String>>,
    pub first_round_overlap: f64,
    pub signals: CouplingSignals,
    pub coupling_score: f64,
    pub stratum: Stratum,
    /// Longest run of rejections on a path by one session before it got
    /// a write through (or gave up).
    pub retries_to_converge: BTreeMap<String, u64>,
    pub max_alternating_rejections: u64,
    pub tasks_completed: usize,
    pub tasks_total: usize,
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fraction of unordered pairs whose sets intersect; 0 when there are no
/// pairs.
pub fn pairwise_overlap(sets: &[&BTreeSet<String>]) -> f64 {
    let mut pairs = 0;
    let mut hits = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            pairs += 1;
            if !sets[i].is_disjoint(sets[j]) {
                hits += 1;
            }
        }
    }
    fraction(hits, pairs)
}

/// Coupling signals from per-task access sets, per-task reads, declared
/// primary files and the write counts.
pub fn coupling_signals(
    workload: &Workload,
    access_sets: &BTreeMap<String, BTreeSet<String>>,
    reads: &BTreeMap<String, BTreeSet<String>>,
    rejected: u64,
    attempts: u64,
) -> CouplingSignals {
    let tasks = &workload.tasks;
    let sets: Vec<&BTreeSet<String>> = tasks
        .iter()
        .map(|t| access_sets.get(&t.task_id).unwrap_or(&EMPTY))
        .collect();
    let foreign_readers = tasks
        .iter()
        .filter(|t| {
            reads
                .get(&t.task_id)
                .is_some_and(|r| r.iter().any(|p| !t.primary_files.contains(p)))
        })
        .count();
    let multi = tasks.iter().filter(|t| t.primary_files.len() > 1).count();
    CouplingSignals {
        overlap: pairwise_overlap(&sets),
        dependency: fraction(foreign_readers, tasks.len()),
        multi_file: fraction(multi, tasks.len()),
        rejection: rejected as f64 / attempts.max(1) as f64,
    }
}

static EMPTY: BTreeSet<String> = BTreeSet::new();

pub fn compute_metrics(
    workload: &Workload,
    mode: &str,
    seed: u64,
    events: &[WorkspaceEvent],
    tasks_completed: usize,
) -> RunMetrics {
    let mut task_of: BTreeMap<&str, &str> = BTreeMap::new();
    let mut access: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut reads: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut writers: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let (mut attempts, mut accepted, mut rejected, mut post) = (0u64, 0u64, 0u64, 0u64);
    let mut lost = 0u64;
    let mut lost_paths = BTreeSet::new();
    let mut streaks: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    let mut retries: BTreeMap<String, u64> = BTreeMap::new();
    let mut alternating = 0u64;
    let mut run = 0u64;
    let mut last_rejected: Option<&str> = None;

    for e in events {
        let session = e.session.as_deref();
        let path = e.path.as_deref();
        if e.kind == EventKind::SessionOpened {
            if let (Some(s), Some(t)) = (session, e.detail.task.as_deref()) {
                task_of.insert(s, t);
            }
            continue;
        }
        let (Some(s), Some(p)) = (session, path) else {
            continue;
        };
        let task = task_of.get(s).copied().unwrap_or(s).to_string();
        match e.kind {
            EventKind::Read => {
                access.entry(task.clone()).or_default().insert(p.to_string());
                reads.entry(task).or_default().insert(p.to_string());
            }
            EventKind::WriteAccepted => {
                attempts += 1;
                accepted += 1;
                access.entry(task).or_default().insert(p.to_string());
                writers.entry(p).or_default().insert(s);
                let d = &e.detail;
                if d.branch.is_none() {
                    if let (Some(obs), Some(prior)) = (d.observed_version, d.prior_version) {
                        if obs < prior {
                            lost += 1;
                            lost_paths.insert(p.to_string());
                        }
                    }
                }
                streaks.remove(&(s, p));
            }
            EventKind::WriteRejected => {
                attempts += 1;
                rejected += 1;
                access.entry(task).or_default().insert(p.to_string());
                writers.entry(p).or_default().insert(s);
                let n = streaks.entry((s, p)).or_default();
                *n += 1;
                let best = retries.entry(p.to_string()).or_default();
                *best = (*best).max(*n);
                run = match last_rejected {
                    Some(prev) if prev != s => run + 1,
                    _ => 1,
                };
                alternating = alternating.max(run);
                last_rejected = Some(s);
            }
            EventKind::MergeConflict => {
                post += e.detail.hunks.unwrap_or(1);
            }
            _ => {}
        }
    }

    let contested: BTreeSet<String> = writers
        .iter()
        .filter(|(_, w)| w.len() > 1)
        .map(|(p, _)| p.to_string())
        .collect();
    let signals = coupling_signals(workload, &access, &reads, rejected, attempts);
    let score = signals.score();
    RunMetrics {
        workload: workload.name.clone(),
        mode: mode.to_string(),
        seed,
        write_attempts: attempts,
        accepted,
        acceptance_rate: if attempts == 0 { 1.0 } else { accepted as f64 / attempts as f64 },
        pre_commit_conflicts: rejected,
        post_commit_conflicts: post,
        lost_updates: lost,
        lost_update_paths: lost_paths,
        contested_paths: contested,
        first_round_overlap: signals.overlap,
        access_sets: access,
        signals,
        coupling_score: score,
        stratum: Stratum::of(score),
        retries_to_converge: retries,
        max_alternating_rejections: alternating,
        tasks_completed,
        tasks_total: workload.tasks.len(),
    }
}

/// A stand-in workload for a log recorded without one: one task per
/// session, named after its task label when it has one, with the files it
/// wrote as its primary files.
pub fn infer_workload(name: &str, events: &[WorkspaceEvent]) -> Workload {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut task_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut written: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for e in events {
        let Some(s) = e.session.as_deref() else { continue };
        if e.kind == EventKind::SessionOpened {
            let task = e.detail.task.clone().unwrap_or_else(|| s.to_string());
            let engineer = e.detail.author.clone().unwrap_or_else(|| s.to_string());
            let i = match order.iter().position(|(t, _)| *t == task) {
                Some(i) => i,
                None => {
                    order.push((task, engineer));
                    order.len() - 1
                }
            };
            task_of.insert(s, i);
        } else if matches!(e.kind, EventKind::WriteAccepted | EventKind::WriteRejected) {
            if let (Some(&i), Some(p)) = (task_of.get(s), e.path.as_ref()) {
                written.entry(i).or_default().insert(p.clone());
            }
        }
    }
    let tasks = order
        .into_iter()
        .enumerate()
        .map(|(i, (task_id, engineer_id))| TaskAssignment {
            task_id,
            engineer_id,
            primary_files: written.remove(&i).unwrap_or_default().into_iter().collect(),
            retry: Default::default(),
            steps: Vec::new(),
        })
        .collect();
    Workload {
        name: name.to_string(),
        description: String::new(),
        seed: 0,
        mode: None,
        ttl_ticks: 0,
        reservations: true,
        annotation_policy: Default::default(),
        files: BTreeMap::new(),
        tasks,
        external_edits: Vec::new(),
    }
}

/// Metrics for a bare event log. A task counts as completed unless its
/// last attempt on some path was a rejection.
pub fn log_metrics(name: &str, mode: &str, seed: u64, events: &[WorkspaceEvent]) -> RunMetrics {
    let workload = infer_workload(name, events);
    let mut task_of: BTreeMap<&str, &str> = BTreeMap::new();
    let mut last: BTreeMap<(&str, &str), bool> = BTreeMap::new();
    for e in events {
        let (Some(s), p) = (e.session.as_deref(), e.path.as_deref()) else { continue };
        match (e.kind, p) {
            (EventKind::SessionOpened, _) => {
                task_of.insert(s, e.detail.task.as_deref().unwrap_or(s));
            }
            (EventKind::WriteAccepted, Some(p)) => {
                last.insert((task_of.get(s).copied().unwrap_or(s), p), true);
            }
            (EventKind::WriteRejected, Some(p)) => {
                last.insert((task_of.get(s).copied().unwrap_or(s), p), false);
            }
            _ => {}
        }
    }
    let failed: BTreeSet<&str> = last.iter().filter(|(_, ok)| !**ok).map(|((t, _), _)| *t).collect();
    let completed = workload.tasks.len() - failed.len();
    compute_metrics(&workload, mode, seed, events, completed)
}

pub const CSV_HEADER: [&str; 17] = [
    "workload",
    "mode",
    "seed",
    "write_attempts",
    "accepted",
    "acceptance_rate",
    "pre_commit_conflicts",
    "post_commit_conflicts",
    "lost_updates",
    "first_round_overlap",
    "coupling_score",
    "stratum",
    "max_alternating_rejections",
    "tasks_completed",
    "tasks_total",
    "access_sets",
    "retries_to_converge",
];

pub const SUMMARY_HEADER: [&str; 10] = [
    "mode",
    "stratum",
    "runs",
    "write_attempts",
    "accepted",
    "acceptance_rate",
    "pre_commit_conflicts",
    "post_commit_conflicts",
    "lost_updates",
    "mean_coupling_score",
];

fn ratio(x: f64) -> String {
    format!("{x:.4}")
}

/// `t1=a.py|b.py;t2=c.py`
fn format_access(sets: &BTreeMap<String, BTreeSet<String>>) -> String {
    sets.iter()
        .map(|(t, paths)| format!("{t}={}", paths.iter().cloned().collect::<Vec<_>>().join("|")))
        .collect::<Vec<_>>()
        .join(";")
}

fn format_retries(r: &BTreeMap<String, u64>) -> String {
    r.iter().map(|(p, n)| format!("{p}:{n}")).collect::<Vec<_>>().join(";")
}

impl RunMetrics {
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.workload.clone(),
            self.mode.clone(),
            self.seed.to_string(),
            self.write_attempts.to_string(),
            self.accepted.to_string(),
            ratio(self.acceptance_rate),
            self.pre_commit_conflicts.to_string(),
            self.post_commit_conflicts.to_string(),
            self.lost_updates.to_string(),
            ratio(self.first_round_overlap),
            ratio(self.coupling_score),
            self.stratum.as_str().to_string(),
            self.max_alternating_rejections.to_string(),
            self.tasks_completed.to_string(),
            self.tasks_total.to_string(),
            format_access(&self.access_sets),
            format_retries(&self.retries_to_converge),
        ]
    }
}

/// One row per run, header first. An empty list gives just the header.
pub fn write_report<W: Write>(out: W, runs: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for m in runs {
        w.write_record(m.csv_record())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn report_string(runs: &[RunMetrics]) -> Result<String> {
    let mut buf = Vec::new();
    write_report(&mut buf, runs)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Totals per (mode, stratum).
pub fn write_summary<W: Write>(out: W, runs: &[RunMetrics]) -> Result<()> {
    #[derive(Default)]
    struct Acc {
        runs: u64,
        attempts: u64,
        accepted: u64,
        pre: u64,
        post: u64,
        lost: u64,
        coupling: f64,
    }
    let mut groups: BTreeMap<(&str, Stratum), Acc> = BTreeMap::new();
    for m in runs {
        let a = groups.entry((m.mode.as_str(), m.stratum)).or_default();
        a.runs += 1;
        a.attempts += m.write_attempts;
        a.accepted += m.accepted;
        a.pre += m.pre_commit_conflicts;
        a.post += m.post_commit_conflicts;
        a.lost += m.lost_updates;
        a.coupling += m.coupling_score;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for ((mode, stratum), a) in groups {
        let rate = if a.attempts == 0 { 1.0 } else { a.accepted as f64 / a.attempts as f64 };
        w.write_record([
            mode.to_string(),
            stratum.as_str().to_string(),
            a.runs.to_string(),
            a.attempts.to_string(),
            a.accepted.to_string(),
            ratio(rate),
            a.pre.to_string(),
            a.post.to_string(),
            a.lost.to_string(),
            ratio(a.coupling / a.runs as f64),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strata_cut_points() {
        assert_eq!(Stratum::of(0.0), Stratum::Low);
        assert_eq!(Stratum::of(0.2499), Stratum::Low);
        assert_eq!(Stratum::of(0.25), Stratum::Medium);
        assert_eq!(Stratum::of(0.5), Stratum::High);
    }

    #[test]
    fn overlap_over_zero_pairs_is_zero() {
        let a: BTreeSet<String> = ["x".to_string()].into();
        assert_eq!(pairwise_overlap(&[&a]), 0.0);
        assert_eq!(pairwise_overlap(&[]), 0.0);
    }

    #[test]
    fn empty_report_is_header_only() {
        let s = report_string(&[]).unwrap();
        assert_eq!(s.lines().count(), 1);
        assert!(s.starts_with("workload,mode,seed,"));
    }
}
