//! The authenticated-copy channel that output archives leave the portal by.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("destination unreachable: {0}")]
pub struct Unreachable(pub String);

/// Receives archives, uncompressed CAF1 bytes; implementations decide the
/// transport encoding. Writing the same name twice overwrites.
pub trait OutputSink {
    /// Fails when nothing can be written to `destination`.
    fn check(&mut self, destination: &str) -> Result<(), Unreachable>;
    fn put(&mut self, destination: &str, name: &str, archive: &[u8]) -> Result<(), Unreachable>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub bytes: u64,
    pub archive_count: u32,
    pub names: Vec<String>,
}

/// In-memory sink keyed by `(destination, name)`.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub files: BTreeMap<(String, String), Vec<u8>>,
    pub unreachable: BTreeSet<String>,
}

impl OutputSink for MemorySink {
    fn check(&mut self, destination: &str) -> Result<(), Unreachable> {
        if self.unreachable.contains(destination) {
            Err(Unreachable(destination.into()))
        } else {
            Ok(())
        }
    }

    fn put(&mut self, destination: &str, name: &str, archive: &[u8]) -> Result<(), Unreachable> {
        self.check(destination)?;
        self.files.insert((destination.into(), name.into()), archive.into());
        Ok(())
    }
}
