use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResourceError {
    #[error("unknown resource pool {0:?}")]
    UnknownPool(String),
    #[error("slot count must be at least 1")]
    ZeroCount,
    #[error("releasing {n} slots to {pool:?} would exceed its total of {total} ({available} free)")]
    OverRelease {
        pool: String,
        n: u64,
        available: u64,
        total: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoolLevel {
    pub available: u64,
    pub total: u64,
}

struct Pools {
    levels: BTreeMap<String, PoolLevel>,
    interrupted: bool,
}

/// Named pools of countable slots. Every operation is linearizable: it
/// happens entirely under one lock, and blocked allocations re-check after
/// each release or reallocation.
pub struct ResourceCounter {
    pools: Mutex<Pools>,
    freed: Condvar,
}

impl std::fmt::Debug for ResourceCounter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.snapshot()).finish()
    }
}

impl ResourceCounter {
    /// Creates pools, all slots free.
    pub fn new<I, S>(pools: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let levels = pools
            .into_iter()
            .map(|(name, total)| {
                (
                    name.into(),
                    PoolLevel {
                        available: total,
                        total,
                    },
                )
            })
            .collect();
        ResourceCounter {
            pools: Mutex::new(Pools {
                levels,
                interrupted: false,
            }),
            freed: Condvar::new(),
        }
    }

    fn level_mut<'a>(pools: &'a mut Pools, pool: &str) -> Result<&'a mut PoolLevel, ResourceError> {
        pools
            .levels
            .get_mut(pool)
            .ok_or_else(|| ResourceError::UnknownPool(pool.to_owned()))
    }

    /// Takes `n` slots from `pool`, waiting up to `timeout` (forever when
    /// `None`). Returns false on timeout or after [`interrupt`]; nothing is
    /// taken in that case.
    ///
    /// [`interrupt`]: ResourceCounter::interrupt
    pub fn allocate(
        &self,
        pool: &str,
        n: u64,
        timeout: Option<Duration>,
    ) -> Result<bool, ResourceError> {
        if n == 0 {
            return Err(ResourceError::ZeroCount);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut pools = self.pools.lock();
        loop {
            if pools.interrupted {
                // validate the name even when giving up
                Self::level_mut(&mut pools, pool)?;
                return Ok(false);
            }
            let level = Self::level_mut(&mut pools, pool)?;
            if level.available >= n {
                level.available -= n;
                return Ok(true);
            }
            match deadline {
                Some(d) => {
                    if self.freed.wait_until(&mut pools, d).timed_out() {
                        let level = Self::level_mut(&mut pools, pool)?;
                        if level.available >= n && !pools.interrupted {
                            pools.levels.get_mut(pool).unwrap().available -= n;
                            return Ok(true);
                        }
                        return Ok(false);
                    }
                }
                None => self.freed.wait(&mut pools),
            }
        }
    }

    pub fn release(&self, pool: &str, n: u64) -> Result<(), ResourceError> {
        if n == 0 {
            return Err(ResourceError::ZeroCount);
        }
        let mut pools = self.pools.lock();
        let level = Self::level_mut(&mut pools, pool)?;
        if level.available + n > level.total {
            return Err(ResourceError::OverRelease {
                pool: pool.to_owned(),
                n,
                available: level.available,
                total: level.total,
            });
        }
        level.available += n;
        drop(pools);
        self.freed.notify_all();
        Ok(())
    }

    /// Moves `n` slots from one pool to another: waits until `from` has `n`
    /// free, then shrinks its total and grows `to` in the same step.
    pub fn reallocate(
        &self,
        from: &str,
        to: &str,
        n: u64,
        timeout: Option<Duration>,
    ) -> Result<bool, ResourceError> {
        {
            let mut pools = self.pools.lock();
            Self::level_mut(&mut pools, to)?;
            Self::level_mut(&mut pools, from)?;
        }
        if from == to {
            return Ok(true);
        }
        if n == 0 {
            return Err(ResourceError::ZeroCount);
        }
        if !self.allocate(from, n, timeout)? {
            return Ok(false);
        }
        let mut pools = self.pools.lock();
        Self::level_mut(&mut pools, from)?.total -= n;
        let dest = Self::level_mut(&mut pools, to)?;
        dest.total += n;
        dest.available += n;
        drop(pools);
        self.freed.notify_all();
        Ok(true)
    }

    pub fn level(&self, pool: &str) -> Result<PoolLevel, ResourceError> {
        let mut pools = self.pools.lock();
        Self::level_mut(&mut pools, pool).map(|l| *l)
    }

    pub fn available(&self, pool: &str) -> Result<u64, ResourceError> {
        self.level(pool).map(|l| l.available)
    }

    pub fn total(&self, pool: &str) -> Result<u64, ResourceError> {
        self.level(pool).map(|l| l.total)
    }

    pub fn snapshot(&self) -> BTreeMap<String, PoolLevel> {
        self.pools.lock().levels.clone()
    }

    /// Makes every pending and future allocation return false promptly.
    pub fn interrupt(&self) {
        self.pools.lock().interrupted = true;
        self.freed.notify_all();
    }
}
