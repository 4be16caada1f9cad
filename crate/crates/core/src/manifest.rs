//! The virtual-namespace manifest: which artifact backs which path.
//!
//! Wire form: `{"version":1,"entries":[{"path","artifact","size","mode"}]}`.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::archive::valid_path;
use crate::artifact::ArtifactId;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub artifact: ArtifactId,
    pub size: u64,
    pub mode: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("duplicate path {0:?}")]
    DuplicatePath(String),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("{0:?} is both a file and a directory")]
    FileDirConflict(String),
    #[error("manifest is not valid JSON: {0}")]
    Json(String),
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { version: MANIFEST_VERSION, entries }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ManifestError> {
        let m: Manifest =
            serde_json::from_slice(bytes).map_err(|e| ManifestError::Json(alloc::format!("{e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("manifest serializes")
    }

    /// Paths unique and well formed; no path is also a directory prefix of
    /// another. Sizes are checked against content at fetch time.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.version != MANIFEST_VERSION {
            return Err(ManifestError::Version(self.version));
        }
        let mut files = BTreeSet::new();
        for e in &self.entries {
            if !valid_path(&e.path) {
                return Err(ManifestError::InvalidPath(e.path.clone()));
            }
            if !files.insert(e.path.as_str()) {
                return Err(ManifestError::DuplicatePath(e.path.clone()));
            }
        }
        for e in &self.entries {
            let mut prefix = e.path.as_str();
            while let Some((parent, _)) = prefix.rsplit_once('/') {
                if files.contains(parent) {
                    return Err(ManifestError::FileDirConflict(parent.into()));
                }
                prefix = parent;
            }
        }
        Ok(())
    }

    pub fn total_size(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(path: &str) -> ManifestEntry {
        ManifestEntry { path: path.into(), artifact: ArtifactId::of(path.as_bytes()), size: 1, mode: 0o644 }
    }

    #[test]
    fn json_roundtrip() {
        let m = Manifest::new(vec![entry("bin/a"), entry("lib/x.so")]);
        let json = m.to_json();
        let text = core::str::from_utf8(&json).unwrap();
        assert!(text.starts_with(r#"{"version":1,"entries":[{"path":"bin/a","artifact":""#));
        assert_eq!(Manifest::from_json(&json).unwrap(), m);
    }

    #[test]
    fn rejects_duplicates_and_conflicts() {
        let m = Manifest::new(vec![entry("a"), entry("a")]);
        assert_eq!(m.validate(), Err(ManifestError::DuplicatePath("a".into())));
        let m = Manifest::new(vec![entry("a"), entry("a/b")]);
        assert_eq!(m.validate(), Err(ManifestError::FileDirConflict("a".into())));
        let m = Manifest { version: 2, entries: vec![] };
        assert_eq!(m.validate(), Err(ManifestError::Version(2)));
        assert!(Manifest::from_json(b"{").is_err());
    }
}
