//! Line-based three-way merge with diff3 semantics.
//!
//! Both sides are diffed against the base. Change regions from the two
//! sides that overlap or touch on the base are grouped; a group changed on
//! one side only takes that side, a group changed identically on both sides
//! merges cleanly, anything else is a conflict. Conflicts resolve to "ours"
//! so a merge always yields a tree.

use cowork_core::diff::changed_ranges;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub merged: String,
    /// Number of conflicting groups, each resolved to "ours".
    pub conflicts: usize,
}

impl MergeOutcome {
    pub fn is_clean(&self) -> bool {
        self.conflicts == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Region {
    base: (usize, usize),
    side: (usize, usize),
}

fn regions(base: &[&str], side: &[&str]) -> Vec<Region> {
    changed_ranges(base, side)
        .into_iter()
        .map(|(b, s)| Region {
            base: (b.start, b.end),
            side: (s.start, s.end),
        })
        .collect()
}

/// Side line range covering base range `[lo, hi)`, given that side's
/// change regions inside it. Outside the regions the side equals the base.
fn project(regions: &[Region], lo: usize, hi: usize) -> (usize, usize) {
    let first = regions.first().expect("non-empty");
    let last = regions.last().expect("non-empty");
    (first.side.0 - (first.base.0 - lo), last.side.1 + (hi - last.base.1))
}

pub fn merge3(base: &str, ours: &str, theirs: &str) -> MergeOutcome {
    let b: Vec<&str> = base.split_inclusive('\n').collect();
    let o: Vec<&str> = ours.split_inclusive('\n').collect();
    let t: Vec<&str> = theirs.split_inclusive('\n').collect();
    let ro = regions(&b, &o);
    let rt = regions(&b, &t);

    let mut merged = String::with_capacity(ours.len().max(theirs.len()));
    let mut conflicts = 0;
    let (mut io, mut it) = (0usize, 0usize);
    let mut cursor = 0usize;

    while io < ro.len() || it < rt.len() {
        // Seed the group with whichever region starts first on the base.
        let take_ours = match (ro.get(io), rt.get(it)) {
            (Some(a), Some(c)) => a.base.0 <= c.base.0,
            (Some(_), None) => true,
            _ => false,
        };
        let (lo, mut hi) = if take_ours { ro[io].base } else { rt[it].base };
        let (go, gt) = (io, it);
        if take_ours {
            io += 1;
        } else {
            it += 1;
        }
        loop {
            if let Some(r) = ro.get(io).filter(|r| r.base.0 <= hi) {
                hi = hi.max(r.base.1);
                io += 1;
            } else if let Some(r) = rt.get(it).filter(|r| r.base.0 <= hi) {
                hi = hi.max(r.base.1);
                it += 1;
            } else {
                break;
            }
        }
        for l in &b[cursor..lo] {
            merged.push_str(l);
        }
        let og = &ro[go..io];
        let tg = &rt[gt..it];
        let o_span = (!og.is_empty()).then(|| {
            let (s, e) = project(og, lo, hi);
            &o[s..e]
        });
        let t_span = (!tg.is_empty()).then(|| {
            let (s, e) = project(tg, lo, hi);
            &t[s..e]
        });
        let chosen: &[&str] = match (o_span, t_span) {
            (Some(x), None) | (None, Some(x)) => x,
            (Some(x), Some(y)) => {
                if x != y {
                    conflicts += 1;
                }
                x
            }
            (None, None) => unreachable!("group has at least one region"),
        };
        for l in chosen {
            merged.push_str(l);
        }
        cursor = hi;
    }
    for l in &b[cursor..] {
        merged.push_str(l);
    }
    MergeOutcome { merged, conflicts }
}
