//! Manifest-backed namespace index: stat and list without fetching any
//! content. Directories are the implicit prefixes of file paths.
//!
//! Lookups accept an optional leading `/` and, for directories, a trailing
//! `/`; the root is `/` or the empty string.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::manifest::{Manifest, ManifestEntry, ManifestError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Stat {
    File { size: u64, mode: u32 },
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NamespaceError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(#[from] ManifestError),
    #[error("{0:?} is not in the namespace")]
    NotInNamespace(String),
}

#[derive(Clone, Debug)]
pub struct NamespaceIndex {
    files: BTreeMap<String, ManifestEntry>,
    dirs: BTreeMap<String, BTreeSet<String>>,
}

pub fn normalize(path: &str) -> &str {
    path.trim_start_matches('/').trim_end_matches('/')
}

impl NamespaceIndex {
    pub fn new(manifest: &Manifest) -> Result<Self, NamespaceError> {
        manifest.validate()?;
        let mut files = BTreeMap::new();
        let mut dirs: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        dirs.insert(String::new(), BTreeSet::new());
        for e in &manifest.entries {
            files.insert(e.path.clone(), e.clone());
            let mut child = e.path.as_str();
            loop {
                let (parent, name) = match child.rsplit_once('/') {
                    Some((p, n)) => (p, n),
                    None => ("", child),
                };
                let newly = dirs.entry(parent.into()).or_default().insert(name.into());
                if parent.is_empty() || !newly {
                    break;
                }
                child = parent;
            }
        }
        Ok(NamespaceIndex { files, dirs })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn entry(&self, path: &str) -> Result<&ManifestEntry, NamespaceError> {
        self.files
            .get(normalize(path))
            .ok_or_else(|| NamespaceError::NotInNamespace(path.into()))
    }

    pub fn stat(&self, path: &str) -> Result<Stat, NamespaceError> {
        let p = normalize(path);
        if let Some(e) = self.files.get(p) {
            return Ok(Stat::File { size: e.size, mode: e.mode });
        }
        if self.dirs.contains_key(p) {
            return Ok(Stat::Dir);
        }
        Err(NamespaceError::NotInNamespace(path.into()))
    }

    /// Child names of a directory, sorted.
    pub fn list(&self, path: &str) -> Result<Vec<String>, NamespaceError> {
        self.dirs
            .get(normalize(path))
            .map(|c| c.iter().cloned().collect())
            .ok_or_else(|| NamespaceError::NotInNamespace(path.into()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.files.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::ArtifactId;
    use alloc::vec;

    fn manifest(paths: &[&str]) -> Manifest {
        Manifest::new(
            paths
                .iter()
                .map(|p| ManifestEntry {
                    path: (*p).into(),
                    artifact: ArtifactId::of(p.as_bytes()),
                    size: p.len() as u64,
                    mode: 0o755,
                })
                .collect(),
        )
    }

    #[test]
    fn empty_manifest_has_empty_root() {
        let ns = NamespaceIndex::new(&manifest(&[])).unwrap();
        assert_eq!(ns.list("/").unwrap(), Vec::<String>::new());
        assert_eq!(ns.stat("/").unwrap(), Stat::Dir);
    }

    #[test]
    fn lists_implicit_directories() {
        let ns = NamespaceIndex::new(&manifest(&["bin/a", "bin/b", "lib/deep/x.so", "README"])).unwrap();
        assert_eq!(ns.list("bin/").unwrap(), vec!["a", "b"]);
        assert_eq!(ns.list("/").unwrap(), vec!["README", "bin", "lib"]);
        assert_eq!(ns.list("/lib").unwrap(), vec!["deep"]);
        assert_eq!(ns.stat("lib/deep").unwrap(), Stat::Dir);
        assert_eq!(ns.stat("/bin/a").unwrap(), Stat::File { size: 5, mode: 0o755 });
    }

    #[test]
    fn list_of_file_or_missing_is_not_in_namespace() {
        let ns = NamespaceIndex::new(&manifest(&["bin/a"])).unwrap();
        assert!(matches!(ns.list("bin/a"), Err(NamespaceError::NotInNamespace(_))));
        assert!(matches!(ns.stat("/nonexistent"), Err(NamespaceError::NotInNamespace(_))));
        assert!(matches!(ns.list("nope/"), Err(NamespaceError::NotInNamespace(_))));
    }

    #[test]
    fn duplicate_paths_are_invalid() {
        let err = NamespaceIndex::new(&manifest(&["a", "a"])).unwrap_err();
        assert!(matches!(err, NamespaceError::InvalidManifest(_)));
    }
}
