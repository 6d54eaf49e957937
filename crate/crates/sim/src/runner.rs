//! The tick-driven scheduler and the scripted agents it drives.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use cowork_core::conflict::ConflictKind;
use cowork_core::event::{to_jsonl, WorkspaceEvent};
use cowork_core::ManualClock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::content::{GenContext, GeneratorRegistry};
use crate::error::{Result, SimError};
use crate::metrics::{compute_metrics, RunMetrics};
use crate::strategy::{CoordinationStrategy, SimWrite, StrategyContext, StrategyRegistry};
use crate::workload::{OnReject, SimStep, TaskAssignment, Workload};

/// Upper bound on ticks before a run is declared stuck.
pub const DEFAULT_TICK_LIMIT: u64 = 100_000;

/// Engineer id used for content generated by external edits.
pub const EXTERNAL_AUTHOR: &str = "external";

#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: String,
    pub seed: u64,
    pub files: BTreeMap<String, String>,
    pub events: Vec<WorkspaceEvent>,
    pub metrics: RunMetrics,
    pub ticks: u64,
    pub retries: BTreeMap<String, AgentRetries>,
}

impl RunResult {
    pub fn event_log(&self) -> String {
        to_jsonl(&self.events)
    }
}

/// Rejections one agent saw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentRetries {
    pub total: u32,
    /// Most rejections any single write step took before it landed or
    /// was abandoned.
    pub worst_write: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pending {
    /// Waited for (or was rejected by) a foreign reservation on the
    /// target; the holder has likely committed since.
    Held,
    Refresh(Vec<String>),
    Retry,
}

struct Agent<'w> {
    task: &'w TaskAssignment,
    session: String,
    pc: usize,
    busy_until: u64,
    done: bool,
    versions: BTreeMap<String, u64>,
    view: BTreeMap<String, String>,
    pending: Option<Pending>,
    attempts: u32,
    failed: bool,
    retries: AgentRetries,
}

impl Agent<'_> {
    fn step(&self) -> Option<&SimStep> {
        self.task.steps.get(self.pc)
    }

    fn absorb(&mut self, path: &str, fresh: Option<(String, u64)>) {
        match fresh {
            Some((c, v)) => {
                self.view.insert(path.to_string(), c);
                self.versions.insert(path.to_string(), v);
            }
            None => {
                self.view.remove(path);
                self.versions.remove(path);
            }
        }
    }

    fn advance(&mut self) {
        self.pc += 1;
        self.pending = None;
        self.attempts = 0;
    }
}

pub struct Simulator {
    pub strategies: StrategyRegistry,
    pub generators: GeneratorRegistry,
    pub tick_limit: u64,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator {
            strategies: StrategyRegistry::default(),
            generators: GeneratorRegistry::default(),
            tick_limit: DEFAULT_TICK_LIMIT,
        }
    }
}

impl Simulator {
    pub fn run(&self, workload: &Workload, mode: &str, seed: u64) -> Result<RunResult> {
        workload.check(&self.generators)?;
        let clock = Arc::new(ManualClock::new(0));
        let ctx = StrategyContext { clock: clock.clone() };
        let mut strategy = self.strategies.create(mode, &ctx, workload)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut agents = Vec::with_capacity(workload.tasks.len());
        for task in &workload.tasks {
            let session = strategy.open(task)?;
            agents.push(Agent {
                task,
                session,
                pc: 0,
                busy_until: 0,
                done: false,
                versions: BTreeMap::new(),
                view: BTreeMap::new(),
                pending: None,
                attempts: 0,
                failed: false,
                retries: AgentRetries::default(),
            });
        }

        let mut edits: Vec<(usize, &crate::workload::ExternalEdit)> = workload.external_edits.iter().enumerate().collect();
        edits.sort_by_key(|(i, e)| (e.at_tick, *i));
        let mut next_edit = 0;

        let mut tick = 0u64;
        loop {
            clock.set(tick);
            while let Some((i, e)) = edits.get(next_edit).filter(|(_, e)| e.at_tick <= tick) {
                let base = strategy.shared_content(&e.path).unwrap_or_default();
                let gctx = GenContext {
                    task_id: EXTERNAL_AUTHOR,
                    engineer_id: EXTERNAL_AUTHOR,
                    step: *i,
                    seed,
                };
                let new = self.generators.get(&e.rule)?.generate(&base, &gctx, &e.params)?;
                strategy.external_edit(&e.path, &new)?;
                next_edit += 1;
            }

            for a in agents.iter_mut().filter(|a| !a.done && a.step().is_none()) {
                strategy.close(&a.session)?;
                a.done = true;
            }
            if agents.iter().all(|a| a.done) && next_edit == edits.len() {
                break;
            }

            let mut ready = Vec::new();
            for (i, a) in agents.iter_mut().enumerate() {
                if a.done || a.busy_until > tick {
                    continue;
                }
                // Agents check for a foreign reservation before writing and
                // wait it out instead of spending an attempt.
                if let Some(SimStep::Write { path, .. }) = a.step() {
                    let refreshing = matches!(a.pending, Some(Pending::Refresh(_)));
                    if !refreshing && strategy.blocked(&a.session, path)? {
                        a.pending = Some(Pending::Held);
                        continue;
                    }
                }
                ready.push(i);
            }
            if !ready.is_empty() {
                let pick = ready[rng.gen_range(0..ready.len())];
                self.act(strategy.as_mut(), &mut agents[pick], tick, seed)?;
            }

            tick += 1;
            if tick > self.tick_limit {
                return Err(SimError::TickLimit(self.tick_limit));
            }
        }

        let completed = agents.iter().filter(|a| !a.failed).count();
        let retries = agents.iter().map(|a| (a.task.task_id.clone(), a.retries)).collect();
        let finished = strategy.finish()?;
        let metrics = compute_metrics(workload, mode, seed, &finished.events, completed);
        Ok(RunResult {
            mode: mode.to_string(),
            seed,
            files: finished.files,
            events: finished.events,
            metrics,
            ticks: tick,
            retries,
        })
    }

    fn act(&self, strategy: &mut dyn CoordinationStrategy, a: &mut Agent<'_>, tick: u64, seed: u64) -> Result<()> {
        let step = a.step().expect("ready agents have a step").clone();
        match (&a.pending, step) {
            (Some(Pending::Held), SimStep::Write { path, .. }) => {
                // The holder has most likely committed; catch up first.
                a.pending = Some(Pending::Refresh(vec![path]));
                self.act(strategy, a, tick, seed)?;
            }
            (Some(Pending::Refresh(paths)), step) => {
                let paths = paths.clone();
                for (p, fresh) in strategy.refresh(&a.session, &paths)? {
                    a.absorb(&p, fresh);
                }
                if let SimStep::Write { retry, .. } = step {
                    a.busy_until = tick + 1 + retry.unwrap_or(a.task.retry).rebuild_ticks;
                }
                a.pending = Some(Pending::Retry);
            }
            (_, SimStep::Read { path }) => {
                let fresh = strategy.read(&a.session, &path)?;
                a.absorb(&path, fresh);
                a.advance();
            }
            (_, SimStep::Refresh { path }) => {
                let fresh = strategy.refresh(&a.session, std::slice::from_ref(&path))?.pop().and_then(|(_, f)| f);
                a.absorb(&path, fresh);
                a.advance();
            }
            (_, SimStep::Prune { path }) => {
                strategy.prune(&a.session, &path)?;
                a.advance();
            }
            (_, SimStep::Think { duration_ticks }) => {
                a.busy_until = tick + duration_ticks;
                a.advance();
            }
            (_, SimStep::Write { path, rule, params, retry }) => {
                let base = a.view.get(&path).cloned().unwrap_or_default();
                let gctx = GenContext {
                    task_id: &a.task.task_id,
                    engineer_id: &a.task.engineer_id,
                    step: a.pc,
                    seed,
                };
                let content = self.generators.get(&rule)?.generate(&base, &gctx, &params)?;
                let expected = a.versions.get(&path).copied().unwrap_or(0);
                match strategy.write(&a.session, &path, &content, expected)? {
                    SimWrite::Accepted { version } => {
                        a.versions.insert(path.clone(), version);
                        a.view.insert(path, content);
                        a.advance();
                    }
                    SimWrite::Rejected { kind, stale_paths } => {
                        a.attempts += 1;
                        a.retries.total += 1;
                        a.retries.worst_write = a.retries.worst_write.max(a.attempts);
                        let policy = retry.unwrap_or(a.task.retry);
                        if policy.on_reject == OnReject::GiveUp || a.attempts > policy.max_retries {
                            a.failed = true;
                            a.advance();
                        } else if kind == ConflictKind::ReservationHeld {
                            a.pending = Some(Pending::Held);
                        } else {
                            let mut paths: BTreeSet<String> = stale_paths.into_iter().collect();
                            paths.insert(path);
                            a.pending = Some(Pending::Refresh(paths.into_iter().collect()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs with the default registries.
pub fn run_workload(workload: &Workload, mode: &str, seed: u64) -> Result<RunResult> {
    Simulator::default().run(workload, mode, seed)
}
