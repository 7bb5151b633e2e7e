use std::any::Any;
use std::num::NonZeroUsize;
use std::sync::Arc;

use anyhow::anyhow;
use lru::LruCache;
use once_cell::sync::OnceCell;
use parking_lot::Mutex;

pub const DEFAULT_CACHE_CAPACITY: usize = 16;

type Slot = Arc<OnceCell<Arc<dyn Any + Send + Sync>>>;

/// Per-worker store for expensive objects (models, lookup tables) that
/// outlive a single task. Holds at most `capacity` entries and drops the
/// least recently used one on overflow.
pub struct StateCache {
    slots: Mutex<LruCache<String, Slot>>,
    capacity: usize,
}

impl std::fmt::Debug for StateCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateCache")
            .field("len", &self.len())
            .field("capacity", &self.capacity)
            .finish()
    }
}

impl Default for StateCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl StateCache {
    /// A capacity of 0 is treated as 1.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        StateCache {
            slots: Mutex::new(LruCache::new(NonZeroUsize::new(capacity).unwrap())),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True if `key` holds an initialized value. Does not touch recency.
    pub fn contains(&self, key: &str) -> bool {
        self.slots
            .lock()
            .peek(key)
            .is_some_and(|slot| slot.get().is_some())
    }

    /// Returns the value under `key`, running `init` first if it is absent.
    /// Concurrent callers for one key share a single `init` call. If `init`
    /// fails the error is returned and nothing is stored.
    pub fn get_or_init<T, F>(&self, key: &str, init: F) -> anyhow::Result<Arc<T>>
    where
        T: Any + Send + Sync,
        F: FnOnce() -> anyhow::Result<T>,
    {
        let slot = {
            let mut slots = self.slots.lock();
            match slots.get(key) {
                Some(slot) => Arc::clone(slot),
                None => {
                    let slot: Slot = Arc::default();
                    slots.put(key.to_owned(), Arc::clone(&slot));
                    slot
                }
            }
        };
        let value = slot
            .get_or_try_init(|| init().map(|v| Arc::new(v) as Arc<dyn Any + Send + Sync>))
            .inspect_err(|_| {
                let mut slots = self.slots.lock();
                if slots
                    .peek(key)
                    .is_some_and(|s| Arc::ptr_eq(s, &slot) && s.get().is_none())
                {
                    slots.pop(key);
                }
            })?;
        Arc::clone(value)
            .downcast::<T>()
            .map_err(|_| anyhow!("cached value for {key:?} has a different type"))
    }

    pub fn remove(&self, key: &str) -> bool {
        self.slots.lock().pop(key).is_some()
    }
}
