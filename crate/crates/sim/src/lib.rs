//! Deterministic simulator for multi-agent workspace coordination.
//!
//! Scripted agents run a workload under one of several coordination
//! strategies on a seeded tick scheduler. The event log each run produces
//! is the input to the metrics and CSV reports.

pub mod bundled;
pub mod content;
pub mod error;
pub mod merge;
pub mod metrics;
pub mod runner;
pub mod strategy;
pub mod workload;

pub use error::{Result, SimError};
pub use merge::{merge3, MergeOutcome};
pub use metrics::{compute_metrics, report_string, write_report, write_summary, RunMetrics, Stratum};
pub use runner::{run_workload, RunResult, Simulator};
pub use strategy::{CoordinationStrategy, StrategyRegistry};
pub use workload::{SimStep, TaskAssignment, Workload};

/// Strategy names in report order.
pub const MODES: [&str; 3] = ["shared_occ", "worktree_merge", "soft_isolation"];
