//! Per-process proxy resolution with a byte-bounded LRU cache.

use std::collections::HashMap;
use std::sync::Arc;

use lru::LruCache;
use once_cell::sync::Lazy;
use parking_lot::Mutex;

use super::{
    payload_to_value, sha256_hex, FabricError, FileDirStore, MemoryStoreClient, MetricCounters,
    ProxyRef, StoreHandle, StoreKind, StoreMetrics,
};
use crate::record::Value;

pub const DEFAULT_CACHE_BUDGET: u64 = 256 << 20;

static GLOBAL: Lazy<Resolver> = Lazy::new(|| Resolver::new(DEFAULT_CACHE_BUDGET));

#[derive(Clone)]
struct CacheEntry {
    hash: String,
    bytes: Arc<Vec<u8>>,
}

struct ByteLru {
    entries: LruCache<String, CacheEntry>,
    bytes: u64,
    budget: u64,
}

impl ByteLru {
    fn get(&mut self, key: &str) -> Option<CacheEntry> {
        self.entries.get(key).cloned()
    }

    fn insert(&mut self, key: String, value: CacheEntry) {
        let len = value.bytes.len() as u64;
        if len > self.budget {
            return;
        }
        if let Some(old) = self.entries.put(key, value) {
            self.bytes -= old.bytes.len() as u64;
        }
        self.bytes += len;
        while self.bytes > self.budget {
            match self.entries.pop_lru() {
                Some((_, v)) => self.bytes -= v.bytes.len() as u64,
                None => break,
            }
        }
    }
}

/// Resolves [`ProxyRef`]s, caching bytes by key.
///
/// Keys are write-once, so a cached entry stays valid even after the key is
/// evicted from its store. Store handles are opened on first use from the
/// reference's locator and reused afterwards.
pub struct Resolver {
    cache: Mutex<ByteLru>,
    stores: Mutex<HashMap<(StoreKind, String), StoreHandle>>,
    metrics: MetricCounters,
}

impl Resolver {
    pub fn new(cache_budget_bytes: u64) -> Self {
        Resolver {
            cache: Mutex::new(ByteLru {
                entries: LruCache::unbounded(),
                bytes: 0,
                budget: cache_budget_bytes,
            }),
            stores: Mutex::new(HashMap::new()),
            metrics: MetricCounters::default(),
        }
    }

    /// The process-wide resolver.
    pub fn global() -> &'static Resolver {
        &GLOBAL
    }

    /// Makes an already-open store handle available for resolution.
    pub fn register(&self, store: StoreHandle) {
        self.stores
            .lock()
            .insert((store.kind(), store.locator()), store);
    }

    pub fn store_for(&self, kind: StoreKind, locator: &str) -> Result<StoreHandle, FabricError> {
        if let Some(s) = self.stores.lock().get(&(kind, locator.to_owned())) {
            return Ok(Arc::clone(s));
        }
        let store: StoreHandle = match kind {
            StoreKind::FileDir => Arc::new(FileDirStore::open(locator)?),
            StoreKind::MemoryTcp => Arc::new(MemoryStoreClient::connect(locator)?),
        };
        let mut stores = self.stores.lock();
        let entry = stores
            .entry((kind, locator.to_owned()))
            .or_insert_with(|| Arc::clone(&store));
        Ok(Arc::clone(entry))
    }

    pub fn resolve(&self, proxy: &ProxyRef) -> Result<Vec<u8>, FabricError> {
        Ok(self.resolve_shared(proxy)?.as_ref().clone())
    }

    pub fn resolve_shared(&self, proxy: &ProxyRef) -> Result<Arc<Vec<u8>>, FabricError> {
        MetricCounters::add(&self.metrics.gets, 1);
        if let Some(hit) = self.cache.lock().get(&proxy.key) {
            // Entries were hash-checked on insertion; a reference naming the
            // same key with another hash does not get them.
            if hit.hash == proxy.content_hash {
                MetricCounters::add(&self.metrics.cache_hits, 1);
                return Ok(hit.bytes);
            }
        }
        let store = self.store_for(proxy.store_kind, &proxy.locator)?;
        let bytes = store.get_bytes(&proxy.key)?;
        if bytes.len() as u64 != proxy.size_bytes || sha256_hex(&bytes) != proxy.content_hash {
            return Err(FabricError::Corruption(proxy.key.clone()));
        }
        MetricCounters::add(&self.metrics.bytes_in, bytes.len() as u64);
        let bytes = Arc::new(bytes);
        self.cache.lock().insert(
            proxy.key.clone(),
            CacheEntry {
                hash: proxy.content_hash.clone(),
                bytes: Arc::clone(&bytes),
            },
        );
        Ok(bytes)
    }

    pub fn resolve_value(&self, proxy: &ProxyRef) -> Result<Value, FabricError> {
        payload_to_value(proxy, self.resolve(proxy)?)
    }

    pub fn is_cached(&self, key: &str) -> bool {
        self.cache.lock().entries.contains(key)
    }

    pub fn metrics(&self) -> StoreMetrics {
        self.metrics.snapshot()
    }
}

/// Resolves through the process-wide resolver.
pub fn resolve(proxy: &ProxyRef) -> Result<Vec<u8>, FabricError> {
    Resolver::global().resolve(proxy)
}

pub fn resolve_value(proxy: &ProxyRef) -> Result<Value, FabricError> {
    Resolver::global().resolve_value(proxy)
}
