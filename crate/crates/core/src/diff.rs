//! Unified diffs over text content, and the matching patch applier.

use std::ops::Range;

use similar::{capture_diff_slices, Algorithm, DiffOp};

use crate::error::{Error, Result};

/// Lines of context around each hunk.
pub const CONTEXT_LINES: usize = 3;

/// Marker used in place of a diff when either side is binary.
pub const BINARY_CHANGED: &str = "Binary files differ";

/// Text means valid UTF-8 with no NUL byte.
pub fn is_text(bytes: &[u8]) -> bool {
    !bytes.contains(&0) && std::str::from_utf8(bytes).is_ok()
}

fn as_text<'a>(bytes: &'a [u8], side: &str) -> Result<&'a str> {
    if bytes.contains(&0) {
        return Err(Error::Binary(format!("{side} side contains NUL")));
    }
    std::str::from_utf8(bytes).map_err(|_| Error::Binary(format!("{side} side is not UTF-8")))
}

/// Lines end at `\n` only, matching how patches are applied.
fn lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

/// Unified diff with `a`/`b` headers. Identical inputs yield an empty string.
pub fn unified_diff(old: &[u8], new: &[u8]) -> Result<String> {
    unified_diff_labeled(old, new, "a", "b")
}

pub fn unified_diff_labeled(old: &[u8], new: &[u8], old_label: &str, new_label: &str) -> Result<String> {
    let old = as_text(old, "old")?;
    let new = as_text(new, "new")?;
    if old == new {
        return Ok(String::new());
    }
    let (old, new) = (lines(old), lines(new));
    let changes = changed_ranges(&old, &new);
    let mut out = format!("--- {old_label}\n+++ {new_label}\n");
    let mut i = 0;
    while i < changes.len() {
        // Extend the hunk while the equal gap to the next change fits in
        // the two contexts.
        let mut j = i + 1;
        while j < changes.len() && changes[j].0.start - changes[j - 1].0.end <= 2 * CONTEXT_LINES {
            j += 1;
        }
        let group = &changes[i..j];
        let prev_end = if i == 0 { 0 } else { changes[i - 1].0.end };
        let next_start = changes.get(j).map_or(old.len(), |c| c.0.start);
        let (first, last) = (&group[0], &group[group.len() - 1]);
        let before = CONTEXT_LINES.min(first.0.start - prev_end);
        let after = CONTEXT_LINES.min(next_start - last.0.end);
        let o = first.0.start - before..last.0.end + after;
        let n = first.1.start - before..last.1.end + after;
        out.push_str(&format!("@@ -{} +{} @@\n", hunk_range(&o), hunk_range(&n)));
        let mut at = o.start;
        for (oc, nc) in group {
            push_lines(&mut out, ' ', &old[at..oc.start]);
            push_lines(&mut out, '-', &old[oc.clone()]);
            push_lines(&mut out, '+', &new[nc.clone()]);
            at = oc.end;
        }
        push_lines(&mut out, ' ', &old[at..o.end]);
        i = j;
    }
    Ok(out)
}

fn push_lines(out: &mut String, sign: char, lines: &[&str]) {
    for text in lines {
        out.push(sign);
        out.push_str(text);
        if !text.ends_with('\n') {
            out.push_str("\n\\ No newline at end of file\n");
        }
    }
}

/// `start,len` in the 1-based form hunk headers use.
fn hunk_range(r: &Range<usize>) -> String {
    match r.len() {
        0 => format!("{},0", r.start),
        1 => format!("{}", r.start + 1),
        len => format!("{},{len}", r.start + 1),
    }
}

/// Changed (old, new) line ranges: the gaps between equal runs of a Myers
/// diff. Insert and delete ops from `similar` can carry off-by-one indices
/// on the other side, so only the equal runs are used.
pub fn changed_ranges(old: &[&str], new: &[&str]) -> Vec<(Range<usize>, Range<usize>)> {
    let mut out = Vec::new();
    let (mut o, mut n) = (0, 0);
    let equal = capture_diff_slices(Algorithm::Myers, old, new)
        .into_iter()
        .filter_map(|op| match op {
            DiffOp::Equal { old_index, new_index, len } => Some((old_index, new_index, len)),
            _ => None,
        })
        .chain(std::iter::once((old.len(), new.len(), 0)));
    for (oi, ni, len) in equal {
        if oi > o || ni > n {
            out.push((o..oi, n..ni));
        }
        o = oi + len;
        n = ni + len;
    }
    out
}

/// Counts of (added, removed) lines between two texts; `None` for binary.
pub fn line_stats(old: &[u8], new: &[u8]) -> Option<(u64, u64)> {
    let old = as_text(old, "old").ok()?;
    let new = as_text(new, "new").ok()?;
    let (old, new) = (lines(old), lines(new));
    let (mut added, mut removed) = (0, 0);
    for (o, n) in changed_ranges(&old, &new) {
        removed += o.len() as u64;
        added += n.len() as u64;
    }
    Some((added, removed))
}

#[derive(Debug)]
struct Hunk {
    old_start: usize,
    old_len: usize,
    lines: Vec<(char, String)>,
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Patch(format!("bad hunk range {s:?}"));
    match s.split_once(',') {
        Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
        None => Ok((s.parse().map_err(|_| bad())?, 1)),
    }
}

fn parse_hunks(patch: &str) -> Result<Vec<Hunk>> {
    let mut hunks: Vec<Hunk> = Vec::new();
    for line in patch.split_inclusive('\n') {
        if let Some(rest) = line.strip_prefix("@@ ") {
            let inner = rest
                .split(" @@")
                .next()
                .ok_or_else(|| Error::Patch(format!("bad hunk header {line:?}")))?;
            let mut parts = inner.split_whitespace();
            let old = parts.next().and_then(|p| p.strip_prefix('-'));
            let new = parts.next().and_then(|p| p.strip_prefix('+'));
            let (Some(old), Some(_new)) = (old, new) else {
                return Err(Error::Patch(format!("bad hunk header {line:?}")));
            };
            let (old_start, old_len) = parse_range(old)?;
            hunks.push(Hunk {
                old_start,
                old_len,
                lines: Vec::new(),
            });
            continue;
        }
        let Some(hunk) = hunks.last_mut() else {
            // File headers and preamble.
            continue;
        };
        let mut chars = line.chars();
        match chars.next() {
            Some(tag @ (' ' | '-' | '+')) => hunk.lines.push((tag, chars.as_str().to_string())),
            Some('\\') => match hunk.lines.last_mut() {
                Some((_, prev)) if prev.ends_with('\n') => {
                    prev.pop();
                }
                _ => return Err(Error::Patch("dangling no-newline marker".into())),
            },
            Some('\n') => hunk.lines.push((' ', "\n".into())),
            _ => return Err(Error::Patch(format!("unexpected patch line {line:?}"))),
        }
    }
    Ok(hunks)
}

/// Applies a unified diff to `old`. Context and removed lines must match
/// exactly; no fuzz.
pub fn apply_patch(old: &str, patch: &str) -> Result<String> {
    let old_lines: Vec<&str> = old.split_inclusive('\n').collect();
    let mut out = String::with_capacity(old.len());
    let mut cursor = 0usize;
    for hunk in parse_hunks(patch)? {
        let start = if hunk.old_len == 0 {
            hunk.old_start
        } else {
            hunk.old_start.saturating_sub(1)
        };
        if start < cursor || start > old_lines.len() {
            return Err(Error::Patch(format!("hunk at line {} out of order", hunk.old_start)));
        }
        for l in &old_lines[cursor..start] {
            out.push_str(l);
        }
        cursor = start;
        for (tag, text) in &hunk.lines {
            match tag {
                ' ' | '-' => {
                    let Some(actual) = old_lines.get(cursor) else {
                        return Err(Error::Patch("hunk runs past end of input".into()));
                    };
                    if *actual != text.as_str() {
                        return Err(Error::Patch(format!(
                            "context mismatch at line {}: {actual:?} != {text:?}",
                            cursor + 1
                        )));
                    }
                    cursor += 1;
                    if *tag == ' ' {
                        out.push_str(text);
                    }
                }
                _ => out.push_str(text),
            }
        }
    }
    for l in &old_lines[cursor..] {
        out.push_str(l);
    }
    Ok(out)
}
