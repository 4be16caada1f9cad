//! Byte-capacity LRU cache for content-addressed artifacts, the state behind
//! a site caching proxy.
//!
//! Artifacts are immutable, so there is no revalidation: an entry is either
//! resident and served, or fetched from the next hop and verified against
//! its id before admission.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub origin_fetches: u64,
    pub bytes_served: u64,
    /// Misses that joined a fetch already in flight instead of starting one.
    #[serde(default)]
    pub coalesced: u64,
    #[serde(default)]
    pub evictions: u64,
    #[serde(default)]
    pub integrity_failures: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Hit,
    Miss,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProxyError {
    #[error("origin unreachable: {0}")]
    OriginUnreachable(String),
    #[error("artifact {0} not found at origin")]
    NotFound(ArtifactId),
    #[error("integrity mismatch: expected {expected}, got {actual}")]
    IntegrityMismatch { expected: ArtifactId, actual: ArtifactId },
}

#[derive(Clone, Debug)]
pub struct LruCache {
    capacity_bytes: u64,
    used_bytes: u64,
    tick: u64,
    resident: BTreeMap<ArtifactId, (u64, Vec<u8>)>,
    recency: BTreeMap<u64, ArtifactId>,
    counters: CacheCounters,
}

impl LruCache {
    pub fn new(capacity_bytes: u64) -> Self {
        LruCache {
            capacity_bytes,
            used_bytes: 0,
            tick: 0,
            resident: BTreeMap::new(),
            recency: BTreeMap::new(),
            counters: CacheCounters::default(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn resident_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.resident.contains_key(id)
    }

    /// Resident ids, least recently used first.
    pub fn lru_order(&self) -> Vec<ArtifactId> {
        self.recency.values().cloned().collect()
    }

    fn touch(&mut self, id: &ArtifactId) {
        self.tick += 1;
        let tick = self.tick;
        if let Some((old, _)) = self.resident.get_mut(id) {
            self.recency.remove(old);
            *old = tick;
            self.recency.insert(tick, id.clone());
        }
    }

    /// Serve a resident artifact (counted as a hit, recency refreshed) or
    /// count a miss.
    pub fn lookup(&mut self, id: &ArtifactId) -> Option<Vec<u8>> {
        if self.resident.contains_key(id) {
            self.touch(id);
            let bytes = self.resident[id].1.clone();
            self.counters.hits += 1;
            self.counters.bytes_served += bytes.len() as u64;
            Some(bytes)
        } else {
            self.counters.misses += 1;
            None
        }
    }

    pub fn note_origin_fetch(&mut self) {
        self.counters.origin_fetches += 1;
    }

    pub fn note_coalesced(&mut self) {
        self.counters.coalesced += 1;
    }

    pub fn note_integrity_failure(&mut self) {
        self.counters.integrity_failures += 1;
    }

    pub fn note_served(&mut self, bytes: u64) {
        self.counters.bytes_served += bytes;
    }

    /// Insert verified bytes, evicting least recently used entries until the
    /// resident set fits. Objects larger than the whole cache are not kept.
    pub fn admit(&mut self, id: ArtifactId, bytes: Vec<u8>) -> bool {
        let size = bytes.len() as u64;
        if size > self.capacity_bytes {
            return false;
        }
        if self.resident.contains_key(&id) {
            self.touch(&id);
            return true;
        }
        while self.used_bytes + size > self.capacity_bytes {
            let (&oldest, _) = self.recency.iter().next().expect("over capacity implies resident");
            let victim = self.recency.remove(&oldest).unwrap();
            let (_, data) = self.resident.remove(&victim).unwrap();
            self.used_bytes -= data.len() as u64;
            self.counters.evictions += 1;
        }
        self.tick += 1;
        self.recency.insert(self.tick, id.clone());
        self.resident.insert(id, (self.tick, bytes));
        self.used_bytes += size;
        true
    }
}

/// Check fetched bytes against the id they were requested under.
pub fn verify(id: &ArtifactId, bytes: &[u8]) -> Result<(), ProxyError> {
    let actual = ArtifactId::of(bytes);
    if actual == *id {
        Ok(())
    } else {
        Err(ProxyError::IntegrityMismatch { expected: id.clone(), actual })
    }
}

/// Sequential proxy GET: serve a hit, or fetch through `origin`, verify and
/// admit. A poisoned response is rejected and never cached.
pub fn proxy_get<F>(
    cache: &mut LruCache,
    id: &ArtifactId,
    origin: F,
) -> Result<(Vec<u8>, Source), ProxyError>
where
    F: FnOnce(&ArtifactId) -> Result<Vec<u8>, ProxyError>,
{
    if let Some(bytes) = cache.lookup(id) {
        return Ok((bytes, Source::Hit));
    }
    cache.note_origin_fetch();
    let bytes = origin(id)?;
    if let Err(e) = verify(id, &bytes) {
        cache.note_integrity_failure();
        return Err(e);
    }
    cache.note_served(bytes.len() as u64);
    cache.admit(id.clone(), bytes.clone());
    Ok((bytes, Source::Miss))
}
