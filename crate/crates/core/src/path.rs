//! Workspace-relative path normalization.

use crate::error::{Error, Result};

/// Normalizes a workspace-relative path.
///
/// `.` segments and empty segments are dropped, `..` pops the previous
/// segment. Absolute paths and paths escaping the root are rejected.
pub fn normalize(raw: &str) -> Result<String> {
    if raw.starts_with('/') || raw.starts_with('\\') {
        return Err(Error::InvalidPath(raw.to_string()));
    }
    let mut parts: Vec<&str> = Vec::new();
    for seg in raw.split(['/', '\\']) {
        match seg {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(Error::InvalidPath(raw.to_string()));
                }
            }
            s => {
                if s.contains('\0') {
                    return Err(Error::InvalidPath(raw.to_string()));
                }
                parts.push(s)
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::InvalidPath(raw.to_string()));
    }
    Ok(parts.join("/"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_dots() {
        assert_eq!(normalize("dir/../a.py").unwrap(), "a.py");
        assert_eq!(normalize("./src//lib.rs").unwrap(), "src/lib.rs");
        assert_eq!(normalize("a/b/./c/../d").unwrap(), "a/b/d");
    }

    #[test]
    fn rejects_escapes_and_absolute() {
        assert!(normalize("../a").is_err());
        assert!(normalize("/etc/passwd").is_err());
        assert!(normalize("a/../..").is_err());
        assert!(normalize("").is_err());
        assert!(normalize(".").is_err());
    }
}
