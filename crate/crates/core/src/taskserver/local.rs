use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crossbeam_channel::Sender;
use parking_lot::Mutex;

use super::{execute_task, Executor, MethodRegistry, ServerError, StateCache};
use crate::datafabric::Resolver;
use crate::record::{FailureCategory, ResultRecord};

/// Executes tasks on `slots` threads inside the server process. All
/// threads share one [`StateCache`], as workers in one process would.
pub struct LocalExecutor {
    slots: usize,
    cache: Arc<StateCache>,
    queue: Mutex<Option<Sender<ResultRecord>>>,
    completions: Mutex<Option<Sender<ResultRecord>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl LocalExecutor {
    pub fn new(slots: usize) -> Self {
        Self::with_cache(slots, Arc::new(StateCache::default()))
    }

    pub fn with_cache(slots: usize, cache: Arc<StateCache>) -> Self {
        LocalExecutor {
            slots: slots.max(1),
            cache,
            queue: Mutex::new(None),
            completions: Mutex::new(None),
            threads: Mutex::new(Vec::new()),
        }
    }

    pub fn cache(&self) -> &Arc<StateCache> {
        &self.cache
    }
}

impl Executor for LocalExecutor {
    fn start(
        &self,
        registry: Arc<MethodRegistry>,
        completions: Sender<ResultRecord>,
    ) -> Result<(), ServerError> {
        let (tx, rx) = crossbeam_channel::unbounded::<ResultRecord>();
        let mut threads = self.threads.lock();
        for i in 0..self.slots {
            let rx = rx.clone();
            let registry = Arc::clone(&registry);
            let cache = Arc::clone(&self.cache);
            let completions = completions.clone();
            let worker_id = format!("local-{i}");
            threads.push(
                thread::Builder::new()
                    .name(worker_id.clone())
                    .spawn(move || {
                        for record in rx {
                            let done = execute_task(
                                &registry,
                                record,
                                &cache,
                                Resolver::global(),
                                &worker_id,
                            );
                            if completions.send(done).is_err() {
                                break;
                            }
                        }
                    })?,
            );
        }
        *self.queue.lock() = Some(tx);
        *self.completions.lock() = Some(completions);
        Ok(())
    }

    fn submit(&self, mut record: ResultRecord) {
        let rejected = match self.queue.lock().as_ref() {
            Some(q) => match q.send(record) {
                Ok(()) => return,
                Err(e) => e.into_inner(),
            },
            None => record.clone(),
        };
        record = rejected;
        record.set_failure(FailureCategory::ServerShutdown, "executor is not running");
        if let Some(c) = self.completions.lock().as_ref() {
            let _ = c.send(record);
        }
    }

    fn parallelism(&self) -> usize {
        self.slots
    }

    fn shutdown(&self) {
        self.queue.lock().take();
        for t in self.threads.lock().drain(..) {
            let _ = t.join();
        }
        self.completions.lock().take();
    }
}
