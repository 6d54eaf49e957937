//! Service configuration file (TOML).
//!
//! ```toml
//! ttl_ms = 30000
//! annotation_policy = "warn"   # or "strict"
//! sync_interval = 0            # ms between filesystem syncs, 0 = on demand only
//! reservations = true
//!
//! [comment_prefix]
//! py = "#"
//! lua = "--"
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use cowork_core::annotations::{AnnotationPolicy, CommentPrefixes};
use cowork_core::coordinator::DEFAULT_TTL_MS;
use cowork_core::CoordinatorConfig;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub ttl_ms: u64,
    pub annotation_policy: AnnotationPolicy,
    /// Extension to comment prefix, layered over the built-in table.
    pub comment_prefix: BTreeMap<String, String>,
    /// Milliseconds; 0 disables the background sync.
    pub sync_interval: u64,
    pub reservations: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            ttl_ms: DEFAULT_TTL_MS,
            annotation_policy: AnnotationPolicy::Warn,
            comment_prefix: BTreeMap::new(),
            sync_interval: 0,
            reservations: true,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn sync_every(&self) -> Option<Duration> {
        (self.sync_interval > 0).then(|| Duration::from_millis(self.sync_interval))
    }

    pub fn coordinator(&self) -> CoordinatorConfig {
        CoordinatorConfig {
            reservation_ttl: self.ttl_ms,
            reservations: self.reservations,
            validation: true,
            annotation_policy: self.annotation_policy,
            comment_prefixes: CommentPrefixes::default().merged(&self.comment_prefix),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        assert_eq!(ServiceConfig::from_toml("").unwrap(), ServiceConfig::default());
        let c = ServiceConfig::from_toml(
            "ttl_ms = 500\nannotation_policy = \"strict\"\nsync_interval = 250\n[comment_prefix]\n\".lua\" = \"--\"\n",
        )
        .unwrap();
        assert_eq!(c.sync_every(), Some(Duration::from_millis(250)));
        let co = c.coordinator();
        assert_eq!(co.reservation_ttl, 500);
        assert_eq!(co.annotation_policy, AnnotationPolicy::Strict);
        assert_eq!(co.comment_prefixes.for_path("x/init.lua"), Some("--"));
        assert_eq!(co.comment_prefixes.for_path("a.py"), Some("#"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ServiceConfig::from_toml("ttl = 5\n").is_err());
    }
}
