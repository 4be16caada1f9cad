//! Thread-safe artifact sources: the origin store and the caching proxy.
//!
//! Concurrent misses for one id coalesce onto a single upstream fetch; the
//! waiters receive the leader's verified bytes or its error.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use caf_core::artifact::ArtifactStore;
use caf_core::cache::{verify, CacheCounters, LruCache, ProxyError, Source};
use caf_core::ArtifactId;

/// Anything artifacts can be fetched from: an origin, a proxy, a remote
/// server.
pub trait Upstream: Send + Sync {
    fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError>;

    /// Cache counters, for sources that cache.
    fn stats(&self) -> Option<CacheCounters> {
        None
    }
}

impl<U: Upstream + ?Sized> Upstream for &U {
    fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
        (**self).fetch(id)
    }

    fn stats(&self) -> Option<CacheCounters> {
        (**self).stats()
    }
}

impl<U: Upstream + ?Sized> Upstream for Arc<U> {
    fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
        (**self).fetch(id)
    }

    fn stats(&self) -> Option<CacheCounters> {
        (**self).stats()
    }
}

/// The origin artifact store, shareable across threads.
#[derive(Debug, Default)]
pub struct Origin {
    store: RwLock<ArtifactStore>,
    requests: AtomicU64,
}

impl Origin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: ArtifactStore) -> Self {
        Origin { store: RwLock::new(store), requests: AtomicU64::new(0) }
    }

    pub fn put(&self, bytes: Vec<u8>) -> ArtifactId {
        self.store.write().expect("origin lock").put(bytes)
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.store.read().expect("origin lock").contains(id)
    }

    /// Fetch requests served so far, found or not.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Upstream for Origin {
    fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let store = self.store.read().expect("origin lock");
        store.get(id).map(<[u8]>::to_vec).ok_or_else(|| ProxyError::NotFound(id.clone()))
    }
}

type Outcome = Result<Vec<u8>, ProxyError>;

#[derive(Default)]
struct Flight {
    result: Mutex<Option<Outcome>>,
    done: Condvar,
}

impl Flight {
    fn finish(&self, outcome: Outcome) {
        *self.result.lock().expect("flight lock") = Some(outcome);
        self.done.notify_all();
    }

    fn wait(&self) -> Outcome {
        let mut slot = self.result.lock().expect("flight lock");
        loop {
            if let Some(r) = slot.as_ref() {
                return r.clone();
            }
            slot = self.done.wait(slot).expect("flight lock");
        }
    }
}

/// Completes the flight with an error if the leader unwinds, so waiters
/// never block forever.
struct FlightGuard<'a> {
    flight: &'a Flight,
    armed: bool,
}

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        if self.armed {
            self.flight.finish(Err(ProxyError::OriginUnreachable("fetch aborted".into())));
        }
    }
}

struct State {
    cache: LruCache,
    inflight: HashMap<ArtifactId, Arc<Flight>>,
}

/// Byte-capacity LRU proxy in front of `U`.
pub struct CachingProxy<U> {
    upstream: U,
    state: Mutex<State>,
}

impl<U: Upstream> CachingProxy<U> {
    pub fn new(upstream: U, capacity_bytes: u64) -> Self {
        CachingProxy {
            upstream,
            state: Mutex::new(State { cache: LruCache::new(capacity_bytes), inflight: HashMap::new() }),
        }
    }

    pub fn upstream(&self) -> &U {
        &self.upstream
    }

    pub fn counters(&self) -> CacheCounters {
        self.lock().cache.counters()
    }

    pub fn resident_bytes(&self) -> u64 {
        self.lock().cache.resident_bytes()
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.lock().cache.contains(id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("proxy lock")
    }

    pub fn get(&self, id: &ArtifactId) -> Result<(Vec<u8>, Source), ProxyError> {
        let (flight, leader) = {
            let mut st = self.lock();
            if let Some(bytes) = st.cache.lookup(id) {
                return Ok((bytes, Source::Hit));
            }
            match st.inflight.get(id).cloned() {
                Some(f) => {
                    st.cache.note_coalesced();
                    (f, false)
                }
                None => {
                    st.cache.note_origin_fetch();
                    let f = Arc::new(Flight::default());
                    st.inflight.insert(id.clone(), f.clone());
                    (f, true)
                }
            }
        };
        if !leader {
            let bytes = flight.wait()?;
            self.lock().cache.note_served(bytes.len() as u64);
            return Ok((bytes, Source::Miss));
        }

        let mut guard = FlightGuard { flight: &flight, armed: true };
        let outcome = self.upstream.fetch(id).and_then(|b| verify(id, &b).map(|()| b));
        {
            let mut st = self.lock();
            st.inflight.remove(id);
            match &outcome {
                Ok(bytes) => {
                    st.cache.note_served(bytes.len() as u64);
                    st.cache.admit(id.clone(), bytes.clone());
                }
                Err(ProxyError::IntegrityMismatch { .. }) => st.cache.note_integrity_failure(),
                Err(_) => {}
            }
        }
        guard.armed = false;
        flight.finish(outcome.clone());
        outcome.map(|b| (b, Source::Miss))
    }
}

impl<U: Upstream> Upstream for CachingProxy<U> {
    fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
        self.get(id).map(|(b, _)| b)
    }

    fn stats(&self) -> Option<CacheCounters> {
        Some(self.counters())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Barrier;
    use std::thread;
    use std::time::Duration;

    /// Origin that stalls each fetch so concurrent callers overlap.
    struct Slow(Origin);

    impl Upstream for Slow {
        fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
            thread::sleep(Duration::from_millis(50));
            self.0.fetch(id)
        }
    }

    #[test]
    fn hit_after_miss() {
        let origin = Origin::new();
        let id = origin.put(b"libcdf.so".to_vec());
        let p = CachingProxy::new(origin, 1 << 20);
        assert_eq!(p.get(&id).unwrap().1, Source::Miss);
        assert_eq!(p.get(&id).unwrap().1, Source::Hit);
        let c = p.counters();
        assert_eq!((c.hits, c.misses, c.origin_fetches), (1, 1, 1));
        assert_eq!(p.upstream().requests(), 1);
    }

    #[test]
    fn concurrent_misses_coalesce() {
        let origin = Origin::new();
        let id = origin.put(vec![7; 4096]);
        let p = Arc::new(CachingProxy::new(Slow(origin), 1 << 20));
        let gate = Arc::new(Barrier::new(8));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (p, gate, id) = (p.clone(), gate.clone(), id.clone());
                thread::spawn(move || {
                    gate.wait();
                    p.get(&id).unwrap().0.len()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 4096);
        }
        let c = p.counters();
        assert_eq!(c.origin_fetches, 1);
        assert_eq!(p.upstream().0.requests(), 1);
        assert_eq!(c.hits + c.misses, 8);
    }

    #[test]
    fn missing_artifact_is_not_found() {
        let p = CachingProxy::new(Origin::new(), 100);
        let id = ArtifactId::of(b"nope");
        assert_eq!(p.get(&id).unwrap_err(), ProxyError::NotFound(id.clone()));
        assert!(p.lock().inflight.is_empty());
    }

    #[test]
    fn proxies_chain() {
        let origin = Origin::new();
        let id = origin.put(b"x".repeat(10));
        let site = CachingProxy::new(origin, 1000);
        let worker = CachingProxy::new(&site as &dyn Upstream, 1000);
        worker.get(&id).unwrap();
        worker.get(&id).unwrap();
        assert_eq!(site.counters().misses, 1);
        assert_eq!(worker.counters().hits, 1);
    }
}
