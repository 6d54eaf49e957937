//! Structured intent comments: `<prefix> <author>: <intent>`.
//!
//! An annotation is anchored to the first code line below it, so that the
//! preservation check can tell "comment deleted" apart from "comment kept
//! but the block it describes was rewritten". Pure line moves are neither.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::Workspace;

/// Anchor of an annotation with no code line below it.
pub const EMPTY_BLOCK: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentAnnotation {
    pub author: String,
    pub text: String,
    /// 1-based line of the comment.
    pub line: usize,
    pub anchor_hash: String,
    /// Leading whitespace before the comment prefix.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub indent: String,
}

impl IntentAnnotation {
    /// The source line this annotation was parsed from.
    pub fn render(&self, prefix: &str) -> String {
        format!("{}{prefix} {}: {}", self.indent, self.author, self.text)
    }

    fn key(&self) -> (&str, &str) {
        (&self.author, &self.text)
    }
}

impl fmt::Display for IntentAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} (line {})", self.author, self.text, self.line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationPolicy {
    /// Removals are logged, writes proceed.
    #[default]
    Warn,
    /// Removing a foreign annotation rejects the write.
    Strict,
}

impl FromStr for AnnotationPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "warn" => Ok(AnnotationPolicy::Warn),
            "strict" => Ok(AnnotationPolicy::Strict),
            other => Err(format!("unknown annotation policy {other:?}")),
        }
    }
}

/// Comment prefix per file extension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommentPrefixes(pub BTreeMap<String, String>);

impl Default for CommentPrefixes {
    fn default() -> Self {
        let hash = ["py", "sh", "rb", "toml", "yaml", "yml"];
        let slashes = ["rs", "ts", "tsx", "js", "go", "cpp", "cc", "c", "h", "hpp", "java"];
        CommentPrefixes(
            hash.iter()
                .map(|e| (e.to_string(), "#".to_string()))
                .chain(slashes.iter().map(|e| (e.to_string(), "//".to_string())))
                .collect(),
        )
    }
}

impl CommentPrefixes {
    pub fn for_path(&self, path: &str) -> Option<&str> {
        let name = path.rsplit('/').next().unwrap_or(path);
        let (_, ext) = name.rsplit_once('.')?;
        self.0.get(ext).map(String::as_str)
    }

    /// Overlays `other` on top of these prefixes.
    pub fn merged(mut self, other: &BTreeMap<String, String>) -> Self {
        for (k, v) in other {
            self.0.insert(k.trim_start_matches('.').to_string(), v.clone());
        }
        self
    }
}

fn text_of(content: &[u8]) -> Result<&str> {
    if content.contains(&0) {
        return Err(Error::Binary("annotations need text content".into()));
    }
    std::str::from_utf8(content).map_err(|_| Error::Binary("annotations need UTF-8 content".into()))
}

fn is_author(token: &str) -> bool {
    !token.is_empty()
        && token
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn match_line<'a>(line: &'a str, prefix: &str) -> Option<(&'a str, &'a str, &'a str)> {
    let body = line.trim_start_matches([' ', '\t']);
    let indent = &line[..line.len() - body.len()];
    let rest = body.strip_prefix(prefix)?.strip_prefix(' ')?;
    let (author, text) = rest.split_once(": ")?;
    (is_author(author) && !text.trim().is_empty()).then_some((indent, author, text))
}

fn anchor_hash(line: Option<&str>) -> String {
    match line {
        Some(l) => hex::encode(&Sha256::digest(l.trim().as_bytes())[..8]),
        None => EMPTY_BLOCK.to_string(),
    }
}

/// Every annotation in `content`, in line order.
pub fn parse_annotations(content: &[u8], prefix: &str) -> Result<Vec<IntentAnnotation>> {
    let text = text_of(content)?;
    let lines: Vec<&str> = text.split('\n').collect();
    let mut out = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        let Some((indent, author, body)) = match_line(line, prefix) else {
            continue;
        };
        let anchor = lines[idx + 1..]
            .iter()
            .find(|l| {
                let t = l.trim();
                !t.is_empty() && !t.starts_with(prefix)
            })
            .copied();
        out.push(IntentAnnotation {
            author: author.to_string(),
            text: body.to_string(),
            line: idx + 1,
            anchor_hash: anchor_hash(anchor),
            indent: indent.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PreservationReport {
    pub removed: Vec<IntentAnnotation>,
    pub modified_blocks: Vec<IntentAnnotation>,
    pub policy_applied: AnnotationPolicy,
}

impl PreservationReport {
    pub fn is_clean(&self) -> bool {
        self.removed.is_empty() && self.modified_blocks.is_empty()
    }

    pub fn rejects(&self) -> bool {
        self.policy_applied == AnnotationPolicy::Strict && !self.removed.is_empty()
    }
}

/// Compares foreign annotations before and after a write by `writer`.
pub fn check_preservation(
    old: &[u8],
    new: &[u8],
    prefix: &str,
    writer: &str,
    policy: AnnotationPolicy,
) -> Result<PreservationReport> {
    let before: Vec<IntentAnnotation> = parse_annotations(old, prefix)?
        .into_iter()
        .filter(|a| a.author != writer)
        .collect();
    let mut after: Vec<Option<IntentAnnotation>> = parse_annotations(new, prefix)?.into_iter().map(Some).collect();

    // Exact matches first, so duplicates pair up with their own block.
    let mut unmatched = Vec::new();
    for a in before {
        let hit = after.iter_mut().find(|b| {
            b.as_ref()
                .is_some_and(|b| b.key() == a.key() && b.anchor_hash == a.anchor_hash)
        });
        match hit {
            Some(slot) => *slot = None,
            None => unmatched.push(a),
        }
    }
    let mut report = PreservationReport {
        policy_applied: policy,
        ..Default::default()
    };
    for a in unmatched {
        let hit = after
            .iter_mut()
            .find(|b| b.as_ref().is_some_and(|b| b.key() == a.key()));
        match hit {
            Some(slot) => {
                *slot = None;
                report.modified_blocks.push(a);
            }
            None => report.removed.push(a),
        }
    }
    Ok(report)
}

/// Annotation counts per file and author over current live text files
/// with a known comment prefix.
pub fn annotation_digest(store: &Workspace, prefixes: &CommentPrefixes) -> BTreeMap<String, BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for rec in store.live_files() {
        let Some(prefix) = prefixes.for_path(&rec.path) else {
            continue;
        };
        let Ok(anns) = parse_annotations(&rec.content, prefix) else {
            continue;
        };
        let counts: &mut BTreeMap<String, u64> = out.entry(rec.path.clone()).or_default();
        for a in anns {
            *counts.entry(a.author).or_default() += 1;
        }
    }
    out
}
