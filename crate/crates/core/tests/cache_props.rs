use caf_core::cache::{proxy_get, LruCache, ProxyError, Source};
use caf_core::ArtifactId;
use proptest::prelude::*;

const CAPACITY: u64 = 100;

fn blob(key: u8) -> Vec<u8> {
    // Sizes 5..=40, plus one object larger than the whole cache.
    let len = if key == 11 { 150 } else { 5 + (key as usize * 7) % 36 };
    vec![key; len]
}

/// Reference LRU: a list ordered least to most recently used.
#[derive(Default)]
struct Reference {
    order: Vec<(u8, u64)>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl Reference {
    fn get(&mut self, key: u8) -> Source {
        if let Some(i) = self.order.iter().position(|(k, _)| *k == key) {
            let e = self.order.remove(i);
            self.order.push(e);
            self.hits += 1;
            return Source::Hit;
        }
        self.misses += 1;
        let size = blob(key).len() as u64;
        if size <= CAPACITY {
            while self.order.iter().map(|(_, s)| s).sum::<u64>() + size > CAPACITY {
                self.order.remove(0);
                self.evictions += 1;
            }
            self.order.push((key, size));
        }
        Source::Miss
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn lru_matches_reference(ops in proptest::collection::vec(0u8..12, 1000)) {
        let mut cache = LruCache::new(CAPACITY);
        let mut reference = Reference::default();
        let mut origin_calls = 0u64;
        for key in ops {
            let bytes = blob(key);
            let id = ArtifactId::of(&bytes);
            let (got, source) = proxy_get(&mut cache, &id, |_| {
                origin_calls += 1;
                Ok(bytes.clone())
            })
            .unwrap();
            prop_assert_eq!(&got, &bytes);
            prop_assert_eq!(source, reference.get(key));
            let want: Vec<ArtifactId> = reference.order.iter().map(|(k, _)| ArtifactId::of(&blob(*k))).collect();
            prop_assert_eq!(cache.lru_order(), want);
            prop_assert!(cache.resident_bytes() <= CAPACITY);
        }
        let c = cache.counters();
        prop_assert_eq!((c.hits, c.misses, c.evictions), (reference.hits, reference.misses, reference.evictions));
        prop_assert_eq!(c.origin_fetches, origin_calls);
        prop_assert_eq!(c.origin_fetches, reference.misses);
    }
}

#[test]
fn poisoned_origin_is_rejected_and_not_cached() {
    let good = b"calibration constants v7".to_vec();
    let id = ArtifactId::of(&good);
    let mut cache = LruCache::new(1 << 20);
    let mut bad = good.clone();
    bad[3] ^= 0x20;
    let err = proxy_get(&mut cache, &id, |_| Ok(bad.clone())).unwrap_err();
    assert!(matches!(err, ProxyError::IntegrityMismatch { ref expected, .. } if *expected == id));
    assert!(!cache.contains(&id));
    assert_eq!(cache.resident_bytes(), 0);
    assert_eq!(cache.counters().integrity_failures, 1);
    // The next request goes back to the origin.
    let (bytes, source) = proxy_get(&mut cache, &id, |_| Ok(good.clone())).unwrap();
    assert_eq!((bytes, source), (good, Source::Miss));
}

#[test]
fn unreachable_origin_propagates() {
    let id = ArtifactId::of(b"x");
    let mut cache = LruCache::new(10);
    let err = proxy_get(&mut cache, &id, |_| Err(ProxyError::OriginUnreachable("down".into()))).unwrap_err();
    assert_eq!(err, ProxyError::OriginUnreachable("down".into()));
    assert!(!cache.contains(&id));
}
