//! Task execution: a registry of named methods, executors that run them,
//! and the serve loop that connects an executor to the server side of the
//! task queues.
//!
//! Two executors share the [`Executor`] contract. [`LocalExecutor`] runs
//! tasks on a pool of threads in this process; [`RemoteExecutor`] hands
//! them to worker processes over TCP (see [`run_worker`]).

mod cache;
mod execute;
mod local;
pub mod protocol;
mod remote;
mod worker;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use thiserror::Error;

use crate::queues::{QueueError, ServerQueues};
use crate::record::{FailureCategory, ResourceSpec, ResultRecord, Value};

pub use cache::{StateCache, DEFAULT_CACHE_CAPACITY};
pub use execute::execute_task;
pub use local::LocalExecutor;
pub use remote::{RemoteConfig, RemoteExecutor, RemoteStats, WorkerInfo};
pub use worker::{run_worker, WorkerOptions};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("method {0:?} is already registered")]
    DuplicateMethod(String),
    #[error("methods cannot be registered once serving has started")]
    Serving,
    #[error("no methods registered")]
    NoMethods,
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("executor failure: {0}")]
    Executor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type MethodBody = dyn Fn(&[Value], &BTreeMap<String, Value>, &WorkerContext<'_>) -> anyhow::Result<Value>
    + Send
    + Sync;

/// What a method body can see besides its inputs.
pub struct WorkerContext<'a> {
    pub cache: &'a StateCache,
    pub worker_id: &'a str,
    pub task_id: &'a str,
    pub task_info: &'a BTreeMap<String, Value>,
}

#[derive(Clone)]
pub struct MethodRegistration {
    pub name: String,
    pub body: Arc<MethodBody>,
    pub default_resources: ResourceSpec,
}

impl std::fmt::Debug for MethodRegistration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MethodRegistration")
            .field("name", &self.name)
            .field("default_resources", &self.default_resources)
            .finish_non_exhaustive()
    }
}

impl MethodRegistration {
    pub fn new(
        name: impl Into<String>,
        body: impl Fn(&[Value], &BTreeMap<String, Value>, &WorkerContext<'_>) -> anyhow::Result<Value>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        MethodRegistration {
            name: name.into(),
            body: Arc::new(body),
            default_resources: ResourceSpec::default(),
        }
    }

    pub fn with_resources(mut self, resources: ResourceSpec) -> Self {
        self.default_resources = resources;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct MethodRegistry {
    methods: BTreeMap<String, MethodRegistration>,
}

impl MethodRegistry {
    pub fn register(&mut self, registration: MethodRegistration) -> Result<(), ServerError> {
        if self.methods.contains_key(&registration.name) {
            return Err(ServerError::DuplicateMethod(registration.name));
        }
        self.methods.insert(registration.name.clone(), registration);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MethodRegistration> {
        self.methods.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }
}

/// Runs tasks handed over by the serve loop. Every submitted record comes
/// back exactly once on the completion channel given to `start`,
/// succeeded or failed.
pub trait Executor: Send + Sync {
    fn start(
        &self,
        registry: Arc<MethodRegistry>,
        completions: Sender<ResultRecord>,
    ) -> Result<(), ServerError>;

    fn submit(&self, record: ResultRecord);

    /// How many tasks can run at once right now; sizes the post-processing
    /// pool.
    fn parallelism(&self) -> usize;

    /// Stops the executor. Tasks still pending are returned failed with
    /// `server-shutdown`.
    fn shutdown(&self);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub received: usize,
    pub completed: usize,
    pub undeliverable: usize,
}

/// A task server: a method registry plus the loop that serves it.
#[derive(Default)]
pub struct TaskServer {
    registry: MethodRegistry,
    serving: AtomicBool,
    drain_timeout: Option<Duration>,
}

impl TaskServer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bounds how long `serve` waits for in-flight tasks after the queue
    /// closes. Tasks still unfinished then are failed by the executor.
    pub fn with_drain_timeout(mut self, timeout: Duration) -> Self {
        self.drain_timeout = Some(timeout);
        self
    }

    pub fn register_method(&mut self, registration: MethodRegistration) -> Result<(), ServerError> {
        if self.serving.load(Ordering::SeqCst) {
            return Err(ServerError::Serving);
        }
        self.registry.register(registration)
    }

    pub fn registry(&self) -> &MethodRegistry {
        &self.registry
    }

    /// Pulls tasks from `queues` and runs them on `executor` until the queue
    /// closes, then waits for in-flight tasks and stops the executor.
    ///
    /// Unknown methods come back as `method-not-found` failures. Results are
    /// returned by a separate pool of threads, so a large result being
    /// proxied or encoded never holds up the next dispatch.
    pub fn serve(
        &self,
        queues: &ServerQueues,
        executor: Arc<dyn Executor>,
    ) -> Result<ServeStats, ServerError> {
        if self.registry.is_empty() {
            return Err(ServerError::NoMethods);
        }
        self.serving.store(true, Ordering::SeqCst);
        let registry = Arc::new(self.registry.clone());
        let (done_tx, done_rx) = crossbeam_channel::unbounded::<ResultRecord>();
        executor.start(Arc::clone(&registry), done_tx.clone())?;

        let in_flight = Arc::new(AtomicUsize::new(0));
        let completed = Arc::new(AtomicUsize::new(0));
        let undeliverable = Arc::new(AtomicUsize::new(0));
        let posters: Vec<_> = (0..executor.parallelism().max(1))
            .map(|i| {
                spawn_poster(
                    i,
                    done_rx.clone(),
                    queues.clone(),
                    Arc::clone(&in_flight),
                    Arc::clone(&completed),
                    Arc::clone(&undeliverable),
                )
            })
            .collect::<Result<_, _>>()?;
        drop(done_rx);

        let mut received = 0;
        let outcome = loop {
            match queues.get_task(Duration::from_millis(50)) {
                Ok(Some(mut record)) => {
                    received += 1;
                    in_flight.fetch_add(1, Ordering::SeqCst);
                    if registry.get(&record.method).is_none() {
                        let msg = format!("method {:?} is not registered", record.method);
                        record.set_failure(FailureCategory::MethodNotFound, msg);
                        let _ = done_tx.send(record);
                    } else {
                        executor.submit(record);
                    }
                }
                Ok(None) => {}
                Err(QueueError::Closed) => break Ok(()),
                Err(e) => break Err(ServerError::from(e)),
            }
        };

        let deadline = self.drain_timeout.map(|t| Instant::now() + t);
        while in_flight.load(Ordering::SeqCst) > 0 {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                tracing::warn!("drain timed out with tasks still in flight");
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        executor.shutdown();
        drop(done_tx);
        for p in posters {
            let _ = p.join();
        }
        outcome.map(|()| ServeStats {
            received,
            completed: completed.load(Ordering::SeqCst),
            undeliverable: undeliverable.load(Ordering::SeqCst),
        })
    }
}

fn spawn_poster(
    index: usize,
    completions: Receiver<ResultRecord>,
    queues: ServerQueues,
    in_flight: Arc<AtomicUsize>,
    completed: Arc<AtomicUsize>,
    undeliverable: Arc<AtomicUsize>,
) -> std::io::Result<thread::JoinHandle<()>> {
    thread::Builder::new()
        .name(format!("result-poster-{index}"))
        .spawn(move || {
            for record in completions {
                let task_id = record.task_id.clone();
                if let Err(e) = queues.send_result(record) {
                    tracing::warn!(%task_id, "result could not be returned: {e}");
                    undeliverable.fetch_add(1, Ordering::SeqCst);
                }
                completed.fetch_add(1, Ordering::SeqCst);
                in_flight.fetch_sub(1, Ordering::SeqCst);
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queues::{queue_pair, QueueConfig};
    use crate::record::{TaskRequest, TaskStatus};

    fn server() -> TaskServer {
        let mut s = TaskServer::new();
        s.register_method(MethodRegistration::new("add", |args, _, _| {
            Ok(Value::Int(args.iter().filter_map(Value::as_i64).sum()))
        }))
        .unwrap();
        s.register_method(MethodRegistration::new("sleep", |args, _, _| {
            thread::sleep(Duration::from_secs_f64(args[0].as_f64().unwrap()));
            Ok(Value::Null)
        }))
        .unwrap();
        s
    }

    #[test]
    fn duplicate_and_late_registration() {
        let mut s = server();
        assert!(matches!(
            s.register_method(MethodRegistration::new("add", |_, _, _| Ok(Value::Null))),
            Err(ServerError::DuplicateMethod(_))
        ));
        let (client, queues) = queue_pair(&QueueConfig::in_process()).unwrap();
        client.close();
        s.serve(&queues, Arc::new(LocalExecutor::new(1))).unwrap();
        assert!(matches!(
            s.register_method(MethodRegistration::new("late", |_, _, _| Ok(Value::Null))),
            Err(ServerError::Serving)
        ));
    }

    #[test]
    fn serve_answers_known_and_unknown_methods() {
        let s = server();
        let (client, queues) = queue_pair(&QueueConfig::in_process()).unwrap();
        let handle = thread::spawn(move || s.serve(&queues, Arc::new(LocalExecutor::new(2))));
        let add = client.send_inputs(TaskRequest::new("add").arg(1i64).arg(2i64)).unwrap();
        let mul = client.send_inputs(TaskRequest::new("mul")).unwrap();
        let mut seen = BTreeMap::new();
        for _ in 0..2 {
            let r = client.get_result("default", Duration::from_secs(5)).unwrap().unwrap();
            seen.insert(r.task_id.clone(), r);
        }
        let a = &seen[&add];
        assert_eq!(a.success, TaskStatus::Succeeded);
        assert_eq!(a.value, Some(Value::Int(3)));
        assert!(a.time_costs.running_s > 0.0);
        assert_eq!(seen[&mul].failure_category(), Some(FailureCategory::MethodNotFound));
        client.close();
        let stats = handle.join().unwrap().unwrap();
        assert_eq!(stats.received, 2);
        assert_eq!(stats.completed, 2);
    }

    #[test]
    fn short_task_overtakes_long_one() {
        let s = server();
        let (client, queues) = queue_pair(&QueueConfig::in_process()).unwrap();
        let handle = thread::spawn(move || s.serve(&queues, Arc::new(LocalExecutor::new(2))));
        let long = client.send_inputs(TaskRequest::new("sleep").arg(0.4)).unwrap();
        let short = client.send_inputs(TaskRequest::new("sleep").arg(0.01)).unwrap();
        let first = client.get_result("default", Duration::from_secs(5)).unwrap().unwrap();
        let second = client.get_result("default", Duration::from_secs(5)).unwrap().unwrap();
        assert_eq!(first.task_id, short);
        assert_eq!(second.task_id, long);
        client.close();
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn close_drains_in_flight_work() {
        let s = server();
        let (client, queues) = queue_pair(&QueueConfig::in_process()).unwrap();
        let handle = thread::spawn(move || s.serve(&queues, Arc::new(LocalExecutor::new(1))));
        client.send_inputs(TaskRequest::new("sleep").arg(0.2)).unwrap();
        thread::sleep(Duration::from_millis(50));
        let t = Instant::now();
        client.close();
        let stats = handle.join().unwrap().unwrap();
        assert_eq!(stats.completed, 1);
        assert_eq!(stats.undeliverable, 1);
        assert!(t.elapsed() < Duration::from_secs(2));
    }
}
