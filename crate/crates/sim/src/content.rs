//! Deterministic content generators.
//!
//! A write step names a generator and its parameters. The generator turns
//! the content the agent currently believes the target holds into the new
//! content. Output depends only on that base text, the task, the step index
//! and the seed, so a retry after a rejection rebuilds the same edit on top
//! of the fresh content.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use crate::error::{Result, SimError};

pub type Params = BTreeMap<String, Value>;

#[derive(Debug, Clone)]
pub struct GenContext<'a> {
    pub task_id: &'a str,
    pub engineer_id: &'a str,
    pub step: usize,
    pub seed: u64,
}

impl GenContext<'_> {
    /// Expands `{task}`, `{engineer}`, `{step}` and `{seed}`.
    pub fn expand(&self, template: &str) -> String {
        template
            .replace("{task}", self.task_id)
            .replace("{engineer}", self.engineer_id)
            .replace("{step}", &self.step.to_string())
            .replace("{seed}", &self.seed.to_string())
    }
}

pub trait ContentGenerator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Checks parameters up front so a bad workload fails at load time.
    fn check(&self, params: &Params) -> Result<()>;

    fn generate(&self, base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String>;
}

fn bad(rule: &str, message: impl Into<String>) -> SimError {
    SimError::BadRuleParams {
        rule: rule.to_string(),
        message: message.into(),
    }
}

fn str_param<'a>(rule: &str, params: &'a Params, key: &str) -> Result<&'a str> {
    params
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| bad(rule, format!("missing string parameter {key:?}")))
}

fn line_param(rule: &str, params: &Params, key: &str) -> Result<usize> {
    params
        .get(key)
        .and_then(Value::as_u64)
        .map(|n| n as usize)
        .ok_or_else(|| bad(rule, format!("missing integer parameter {key:?}")))
}

fn lines_of(base: &str) -> Vec<String> {
    base.lines().map(str::to_string).collect()
}

fn join(lines: &[String]) -> String {
    let mut out = lines.join("\n");
    if !lines.is_empty() {
        out.push('\n');
    }
    out
}

struct AppendLine;

impl ContentGenerator for AppendLine {
    fn name(&self) -> &'static str {
        "append_line"
    }

    fn check(&self, params: &Params) -> Result<()> {
        str_param(self.name(), params, "text").map(drop)
    }

    fn generate(&self, base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String> {
        let mut lines = lines_of(base);
        lines.push(ctx.expand(str_param(self.name(), params, "text")?));
        Ok(join(&lines))
    }
}

/// Replaces line `line` (1-based); appends when the file is shorter.
struct ReplaceLine;

impl ContentGenerator for ReplaceLine {
    fn name(&self) -> &'static str {
        "replace_line"
    }

    fn check(&self, params: &Params) -> Result<()> {
        str_param(self.name(), params, "text")?;
        match line_param(self.name(), params, "line")? {
            0 => Err(bad(self.name(), "line is 1-based")),
            _ => Ok(()),
        }
    }

    fn generate(&self, base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String> {
        let n = line_param(self.name(), params, "line")?;
        let text = ctx.expand(str_param(self.name(), params, "text")?);
        let mut lines = lines_of(base);
        match lines.get_mut(n - 1) {
            Some(l) => *l = text,
            None => lines.push(text),
        }
        Ok(join(&lines))
    }
}

/// Inserts after line `line`; 0 inserts at the top.
struct InsertAfter;

impl ContentGenerator for InsertAfter {
    fn name(&self) -> &'static str {
        "insert_after"
    }

    fn check(&self, params: &Params) -> Result<()> {
        str_param(self.name(), params, "text")?;
        line_param(self.name(), params, "line").map(drop)
    }

    fn generate(&self, base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String> {
        let n = line_param(self.name(), params, "line")?;
        let text = ctx.expand(str_param(self.name(), params, "text")?);
        let mut lines = lines_of(base);
        let at = n.min(lines.len());
        lines.splice(at..at, text.lines().map(str::to_string));
        Ok(join(&lines))
    }
}

/// Appends an intent-annotated block: `<prefix> <engineer>: <intent>`
/// followed by `body`.
struct AnnotatedBlock;

impl ContentGenerator for AnnotatedBlock {
    fn name(&self) -> &'static str {
        "annotated_block"
    }

    fn check(&self, params: &Params) -> Result<()> {
        str_param(self.name(), params, "intent")?;
        str_param(self.name(), params, "body").map(drop)
    }

    fn generate(&self, base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String> {
        let prefix = params.get("prefix").and_then(Value::as_str).unwrap_or("#");
        let intent = ctx.expand(str_param(self.name(), params, "intent")?);
        let body = ctx.expand(str_param(self.name(), params, "body")?);
        let mut lines = lines_of(base);
        lines.push(format!("{prefix} {}: {intent}", ctx.engineer_id));
        lines.extend(body.lines().map(str::to_string));
        Ok(join(&lines))
    }
}

/// Drops every line containing `needle`.
struct RemoveLines;

impl ContentGenerator for RemoveLines {
    fn name(&self) -> &'static str {
        "remove_lines"
    }

    fn check(&self, params: &Params) -> Result<()> {
        str_param(self.name(), params, "needle").map(drop)
    }

    fn generate(&self, base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String> {
        let needle = ctx.expand(str_param(self.name(), params, "needle")?);
        let lines: Vec<String> = lines_of(base).into_iter().filter(|l| !l.contains(&needle)).collect();
        Ok(join(&lines))
    }
}

/// Replaces the whole file.
struct SetContent;

impl ContentGenerator for SetContent {
    fn name(&self) -> &'static str {
        "set"
    }

    fn check(&self, params: &Params) -> Result<()> {
        str_param(self.name(), params, "text").map(drop)
    }

    fn generate(&self, _base: &str, ctx: &GenContext<'_>, params: &Params) -> Result<String> {
        Ok(ctx.expand(str_param(self.name(), params, "text")?))
    }
}

/// Generators by name.
#[derive(Clone)]
pub struct GeneratorRegistry {
    by_name: BTreeMap<&'static str, Arc<dyn ContentGenerator>>,
}

impl Default for GeneratorRegistry {
    fn default() -> Self {
        let mut r = GeneratorRegistry {
            by_name: BTreeMap::new(),
        };
        r.register(Arc::new(AppendLine));
        r.register(Arc::new(ReplaceLine));
        r.register(Arc::new(InsertAfter));
        r.register(Arc::new(AnnotatedBlock));
        r.register(Arc::new(RemoveLines));
        r.register(Arc::new(SetContent));
        r
    }
}

impl GeneratorRegistry {
    pub fn register(&mut self, g: Arc<dyn ContentGenerator>) {
        self.by_name.insert(g.name(), g);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ContentGenerator> {
        self.by_name
            .get(name)
            .map(|g| g.as_ref())
            .ok_or_else(|| SimError::UnknownContentRule(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.by_name.keys().copied()
    }
}
