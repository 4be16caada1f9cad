//! A mounted fetch-on-demand namespace backed by a scratch directory.
//!
//! Mounting reads only the manifest. The first `resolve_open` of a path
//! fetches its artifact, verifies it and writes it under the scratch root;
//! later opens of the same path return the local copy.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use caf_core::cache::{verify, ProxyError};
use caf_core::manifest::Manifest;
use caf_core::namespace::{NamespaceError, NamespaceIndex, Stat};
use tempfile::TempDir;

use crate::proxy::Upstream;

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error("{0:?} is not in the namespace")]
    NotInNamespace(String),
    #[error(transparent)]
    IntegrityMismatch(ProxyError),
    #[error("fetch failed: {0}")]
    FetchFailed(ProxyError),
    #[error(transparent)]
    Manifest(NamespaceError),
    #[error("scratch directory: {0}")]
    Io(#[from] io::Error),
}

impl From<NamespaceError> for OpenError {
    fn from(e: NamespaceError) -> Self {
        match e {
            NamespaceError::NotInNamespace(p) => OpenError::NotInNamespace(p),
            other => OpenError::Manifest(other),
        }
    }
}

pub struct MountedNamespace {
    index: NamespaceIndex,
    scratch: TempDir,
    source: Box<dyn Upstream>,
    /// One slot per path opened so far; the slot's lock serializes the
    /// first fetch so concurrent opens of one path fetch once.
    opened: Mutex<HashMap<String, Arc<Mutex<Option<PathBuf>>>>>,
    fetches: AtomicU64,
}

impl MountedNamespace {
    pub fn mount(manifest: &Manifest, source: impl Upstream + 'static) -> Result<Self, OpenError> {
        let index = NamespaceIndex::new(manifest)?;
        let scratch = TempDir::with_prefix("caf-ns-")?;
        Ok(MountedNamespace {
            index,
            scratch,
            source: Box::new(source),
            opened: Mutex::new(HashMap::new()),
            fetches: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        self.scratch.path()
    }

    /// Artifact fetches issued by this mount.
    pub fn fetches(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    pub fn stat(&self, path: &str) -> Result<Stat, NamespaceError> {
        self.index.stat(path)
    }

    pub fn list(&self, path: &str) -> Result<Vec<String>, NamespaceError> {
        self.index.list(path)
    }

    pub fn resolve_open(&self, path: &str) -> Result<PathBuf, OpenError> {
        let entry = self.index.entry(path)?;
        let slot = self
            .opened
            .lock()
            .expect("namespace lock")
            .entry(entry.path.clone())
            .or_default()
            .clone();
        let mut slot = slot.lock().expect("namespace slot");
        if let Some(local) = slot.as_ref() {
            return Ok(local.clone());
        }
        self.fetches.fetch_add(1, Ordering::SeqCst);
        let bytes = self.source.fetch(&entry.artifact).map_err(|e| match e {
            e @ ProxyError::IntegrityMismatch { .. } => OpenError::IntegrityMismatch(e),
            e => OpenError::FetchFailed(e),
        })?;
        verify(&entry.artifact, &bytes).map_err(OpenError::IntegrityMismatch)?;
        let local = self.scratch.path().join(&entry.path);
        if let Some(dir) = local.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&local, &bytes)?;
        set_mode(&local, entry.mode)?;
        *slot = Some(local.clone());
        Ok(local)
    }
}

#[cfg(unix)]
pub(crate) fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(mode & 0o7777))
}

#[cfg(not(unix))]
pub(crate) fn set_mode(_: &Path, _: u32) -> io::Result<()> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::Origin;
    use caf_core::manifest::ManifestEntry;
    use caf_core::ArtifactId;

    fn setup() -> (Arc<Origin>, Manifest) {
        let origin = Arc::new(Origin::new());
        let mut entries = Vec::new();
        for (path, body, mode) in [("bin/a", "#!/bin/sh\n", 0o755), ("bin/b", "b", 0o644), ("lib/c.so", "c", 0o644)] {
            let artifact = origin.put(body.as_bytes().to_vec());
            entries.push(ManifestEntry { path: path.into(), artifact, size: body.len() as u64, mode });
        }
        (origin, Manifest::new(entries))
    }

    #[test]
    fn open_is_memoized() {
        let (origin, m) = setup();
        let ns = MountedNamespace::mount(&m, origin.clone()).unwrap();
        assert_eq!(ns.fetches(), 0);
        let p = ns.resolve_open("/bin/a").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"#!/bin/sh\n");
        assert_eq!(ns.resolve_open("bin/a").unwrap(), p);
        assert_eq!((ns.fetches(), origin.requests()), (1, 1));
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&p).unwrap().permissions().mode() & 0o777, 0o755);
        }
    }

    #[test]
    fn metadata_needs_no_fetch() {
        let (origin, m) = setup();
        let ns = MountedNamespace::mount(&m, origin.clone()).unwrap();
        assert_eq!(ns.stat("lib/c.so").unwrap(), Stat::File { size: 1, mode: 0o644 });
        assert_eq!(ns.list("bin/").unwrap(), ["a", "b"]);
        assert!(ns.list("bin/a").is_err());
        assert!(matches!(ns.resolve_open("/nonexistent"), Err(OpenError::NotInNamespace(_))));
        assert_eq!(origin.requests(), 0);
    }

    #[test]
    fn corrupt_source_is_detected() {
        struct Liar;
        impl Upstream for Liar {
            fn fetch(&self, _: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
                Ok(b"tampered".to_vec())
            }
        }
        let (_, m) = setup();
        let ns = MountedNamespace::mount(&m, Liar).unwrap();
        assert!(matches!(ns.resolve_open("bin/b"), Err(OpenError::IntegrityMismatch(_))));
        assert!(!ns.root().join("bin/b").exists());
    }
}
