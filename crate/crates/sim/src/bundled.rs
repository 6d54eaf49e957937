//! Workloads shipped with the simulator.

use crate::error::Result;
use crate::workload::Workload;

/// `(name, json)` for every bundled workload.
pub const ALL: &[(&str, &str)] = &[
    ("disjoint", include_str!("../workloads/disjoint.json")),
    ("shared_disjoint_lines", include_str!("../workloads/shared_disjoint_lines.json")),
    ("shared_same_line", include_str!("../workloads/shared_same_line.json")),
    ("alternating", include_str!("../workloads/alternating.json")),
    ("hc_shared_config", include_str!("../workloads/hc_shared_config.json")),
    ("hc_api_rename", include_str!("../workloads/hc_api_rename.json")),
    ("hc_annotated_utils", include_str!("../workloads/hc_annotated_utils.json")),
];

/// Names of the high-coupling suite.
pub const HIGH_COUPLING: &[&str] = &["hc_shared_config", "hc_api_rename", "hc_annotated_utils"];

pub fn source(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load(name: &str) -> Option<Result<Workload>> {
    source(name).map(Workload::from_json)
}

pub fn high_coupling_suite() -> Result<Vec<Workload>> {
    HIGH_COUPLING
        .iter()
        .map(|n| Workload::from_json(source(n).expect("suite members are bundled")))
        .collect()
}
