//! Command-line entry points.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use cowork_core::event::{parse_log, replay, EventKind, WorkspaceEvent};
use cowork_sim::metrics::log_metrics;
use cowork_sim::{write_report, write_summary, RunMetrics, Simulator, Workload, MODES};

use crate::config::ServiceConfig;
use crate::server::{default_log_path, open_workspace, Server, BIND_ENV, DEFAULT_BIND};

#[derive(Debug, Parser)]
#[command(name = "cowork", version, about = "Shared-workspace coordination service and simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve a workspace directory over line-delimited JSON on TCP.
    Serve {
        root: PathBuf,
        /// Overrides $COWORK_BIND (default 127.0.0.1:7878).
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Event log location; defaults to `<root>.events.jsonl` beside the root.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run workloads under one or all strategies and print a CSV report.
    Simulate {
        #[arg(required = true)]
        workloads: Vec<PathBuf>,
        /// A strategy name, or `all`. Defaults to the workload's own mode, else all.
        #[arg(long)]
        mode: Option<String>,
        /// First seed; defaults to the workload's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Write each run's event log here as `<workload>.<mode>.<seed>.jsonl`.
        #[arg(long)]
        events_dir: Option<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per (mode, stratum) totals as CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        no_reservations: bool,
    },
    /// Rebuild per-path versions from an event log and check it for gaps.
    Replay { log: PathBuf },
    /// Metrics row for an event log.
    Metrics {
        log: PathBuf,
        /// Mode label for the row.
        #[arg(long, default_value = "unknown")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-path change totals from an event log.
    Diffstat { log: PathBuf },
}

fn read_log(path: &Path) -> anyhow::Result<Vec<WorkspaceEvent>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(parse_log(BufReader::new(f))?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs a parsed command; returns the process exit code.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<i32> {
    match cli.command {
        Command::Serve { root, bind, config, log } => {
            let config = match config {
                Some(p) => ServiceConfig::load(&p)?,
                None => ServiceConfig::default(),
            };
            let root = root
                .canonicalize()
                .with_context(|| format!("workspace root {}", root.display()))?;
            let log = log.unwrap_or_else(|| default_log_path(&root));
            let service = open_workspace(&root, &log, &config)?;
            let bind = bind
                .or_else(|| std::env::var(BIND_ENV).ok())
                .unwrap_or_else(|| DEFAULT_BIND.to_string());
            let server = Server::bind(&bind, service)?;
            writeln!(out, "listening on {}", server.local_addr()?)?;
            out.flush()?;
            if let Some(every) = config.sync_every() {
                server.start_sync(every);
            }
            server.run()?;
            Ok(0)
        }
        Command::Simulate {
            workloads,
            mode,
            seed,
            seeds,
            events_dir,
            out: out_path,
            summary,
            no_reservations,
        } => {
            let sim = Simulator::default();
            let mut rows: Vec<RunMetrics> = Vec::new();
            if let Some(d) = &events_dir {
                fs::create_dir_all(d)?;
            }
            for path in &workloads {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut w = Workload::from_json(&text).with_context(|| format!("loading {}", path.display()))?;
                if no_reservations {
                    w.reservations = false;
                }
                let modes: Vec<String> = match mode.as_deref().or(w.mode.as_deref()) {
                    None | Some("all") => MODES.iter().map(|m| m.to_string()).collect(),
                    Some(m) => vec![m.to_string()],
                };
                let first = seed.unwrap_or(w.seed);
                for m in &modes {
                    for s in first..first + seeds {
                        let r = sim.run(&w, m, s).with_context(|| format!("{} {m} seed {s}", w.name))?;
                        if let Some(d) = &events_dir {
                            fs::write(d.join(format!("{}.{m}.{s}.jsonl", w.name)), r.event_log())?;
                        }
                        rows.push(r.metrics);
                    }
                }
            }
            match out_path {
                Some(p) => write_report(fs::File::create(&p)?, &rows)?,
                None => write_report(&mut *out, &rows)?,
            }
            if let Some(p) = summary {
                write_summary(fs::File::create(&p)?, &rows)?;
            }
            Ok(0)
        }
        Command::Replay { log } => {
            let events = read_log(&log)?;
            let r = replay(&events);
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["path", "version", "deleted", "last_writer", "sha256"])?;
            for (path, f) in &r.files {
                w.write_record([
                    path.as_str(),
                    &f.version.to_string(),
                    if f.deleted { "true" } else { "false" },
                    &f.last_writer,
                    f.sha256.as_deref().unwrap_or(""),
                ])?;
            }
            w.flush()?;
            drop(w);
            if r.is_consistent() {
                Ok(0)
            } else {
                for issue in &r.issues {
                    writeln!(err, "{issue}")?;
                }
                writeln!(err, "{} issue(s) in {}", r.issues.len(), log.display())?;
                Ok(1)
            }
        }
        Command::Metrics { log, mode, seed } => {
            let events = read_log(&log)?;
            let rows = if events.is_empty() {
                Vec::new()
            } else {
                vec![log_metrics(&stem(&log), &mode, seed, &events)]
            };
            write_report(&mut *out, &rows)?;
            Ok(0)
        }
        Command::Diffstat { log } => {
            let events = read_log(&log)?;
            diffstat(&events, out)?;
            Ok(0)
        }
    }
}

#[derive(Default)]
struct PathStat {
    writes: u64,
    external: u64,
    added: u64,
    removed: u64,
    writers: BTreeSet<String>,
    version: u64,
}

/// Shared-tree changes per path. Private worktree edits are left out;
/// their merged result shows up as the merge writer's change.
pub fn diffstat(events: &[WorkspaceEvent], out: &mut dyn Write) -> anyhow::Result<()> {
    let mut stats: BTreeMap<&str, PathStat> = BTreeMap::new();
    for e in events {
        let Some(path) = e.path.as_deref() else { continue };
        let d = &e.detail;
        if d.branch.is_some() {
            continue;
        }
        let s = match e.kind {
            EventKind::WriteAccepted => {
                let s = stats.entry(path).or_default();
                s.writes += 1;
                s
            }
            EventKind::ExternalChange => {
                let s = stats.entry(path).or_default();
                s.external += 1;
                s
            }
            _ => continue,
        };
        s.added += d.lines_added.unwrap_or(0);
        s.removed += d.lines_removed.unwrap_or(0);
        if let Some(w) = &d.writer {
            s.writers.insert(w.clone());
        }
        s.version = d.new_version.unwrap_or(s.version);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "writes", "external_changes", "lines_added", "lines_removed", "writers", "version"])?;
    for (path, s) in stats {
        w.write_record([
            path.to_string(),
            s.writes.to_string(),
            s.external.to_string(),
            s.added.to_string(),
            s.removed.to_string(),
            s.writers.into_iter().collect::<Vec<_>>().join("|"),
            s.version.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `args` and runs; usage errors exit 2, failures 1.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
