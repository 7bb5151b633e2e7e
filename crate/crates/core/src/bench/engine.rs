use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tempfile::TempDir;

use super::{BenchError, ExecutorChoice, QueueChoice};
use crate::datafabric::{
    FileDirStore, MemoryStoreClient, MemoryStoreServer, Resolver, StoreHandle, ThresholdPolicy,
};
use crate::queues::{queue_pair, QueueConfig, ServerQueues, TaskQueues};
use crate::taskserver::{
    Executor, LocalExecutor, MethodRegistry, RemoteConfig, RemoteExecutor, RemoteStats,
    ServeStats, ServerError, TaskServer,
};

/// Capacity of the memory store started for TCP runs.
const MEMORY_STORE_BYTES: u64 = 4 << 30;

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub queue: QueueChoice,
    pub proxy_threshold: Option<u64>,
    pub executor: ExecutorChoice,
    /// Execution slots for the local executor.
    pub slots: usize,
    /// How long the server waits for in-flight work once the queues close.
    pub drain_timeout: Duration,
}

impl EngineOptions {
    pub fn local(queue: QueueChoice, slots: usize) -> Self {
        EngineOptions {
            queue,
            proxy_threshold: None,
            executor: ExecutorChoice::Local,
            slots,
            drain_timeout: Duration::from_secs(30),
        }
    }
}

/// The methods the benchmarks and the `worker` binary serve.
pub fn bench_registry() -> MethodRegistry {
    let mut registry = MethodRegistry::default();
    registry
        .register(super::sleep_task_method())
        .expect("fresh registry");
    registry
        .register(super::compute_logp_method())
        .expect("fresh registry");
    registry
}

/// A complete in-process deployment: queues, optional proxy store, and a
/// task server on its own thread. Remote workers, when used, live
/// elsewhere and connect to [`Engine::remote_addr`].
pub struct Engine {
    queues: TaskQueues,
    server_queues: ServerQueues,
    server: Option<JoinHandle<Result<ServeStats, ServerError>>>,
    remote: Option<Arc<RemoteExecutor>>,
    store: Option<StoreHandle>,
    _memory: Option<MemoryStoreServer>,
    _dir: Option<TempDir>,
}

impl Engine {
    pub fn start(options: &EngineOptions, registry: MethodRegistry) -> Result<Engine, BenchError> {
        let mut dir = None;
        let mut memory = None;
        let store: Option<StoreHandle> = match (options.proxy_threshold, options.queue) {
            (None, _) => None,
            (Some(_), QueueChoice::Inproc) => {
                let d = tempfile::tempdir()?;
                let s = FileDirStore::open(d.path())?;
                dir = Some(d);
                Some(Arc::new(s))
            }
            (Some(_), QueueChoice::Tcp) => {
                let server = MemoryStoreServer::start("127.0.0.1:0", MEMORY_STORE_BYTES)?;
                let client = MemoryStoreClient::connect(&server.locator())?;
                memory = Some(server);
                Some(Arc::new(client))
            }
        };
        let policy = match (&store, options.proxy_threshold) {
            (Some(s), Some(t)) => Some(ThresholdPolicy::new(Arc::clone(s), t)?),
            _ => None,
        };
        if let Some(s) = &store {
            Resolver::global().register(Arc::clone(s));
        }

        let mut qconfig = match options.queue {
            QueueChoice::Inproc => QueueConfig::in_process(),
            QueueChoice::Tcp => QueueConfig::tcp("127.0.0.1:0"),
        };
        if let Some(p) = &policy {
            qconfig = qconfig.with_policy(p.clone());
        }
        let (queues, server_queues) = queue_pair(&qconfig)?;

        let (executor, remote): (Arc<dyn Executor>, _) = match &options.executor {
            ExecutorChoice::Local => (Arc::new(LocalExecutor::new(options.slots.max(1))), None),
            ExecutorChoice::Remote { listen } => {
                let mut rc = RemoteConfig::new(listen.clone());
                rc.proxy_policy = policy.as_ref().map(ThresholdPolicy::descriptor);
                let ex = Arc::new(RemoteExecutor::bind(rc)?);
                (Arc::clone(&ex) as Arc<dyn Executor>, Some(ex))
            }
        };

        let mut server = TaskServer::new().with_drain_timeout(options.drain_timeout);
        for name in registry.names().map(str::to_owned).collect::<Vec<_>>() {
            let registration = registry.get(&name).expect("listed name").clone();
            server.register_method(registration)?;
        }
        let sq = server_queues.clone();
        let handle = thread::Builder::new()
            .name("task-server".into())
            .spawn(move || server.serve(&sq, executor))?;

        Ok(Engine {
            queues,
            server_queues,
            server: Some(handle),
            remote,
            store,
            _memory: memory,
            _dir: dir,
        })
    }

    pub fn queues(&self) -> &TaskQueues {
        &self.queues
    }

    pub fn store(&self) -> Option<&StoreHandle> {
        self.store.as_ref()
    }

    /// Where remote workers should connect, if the executor is remote.
    pub fn remote_addr(&self) -> Option<SocketAddr> {
        self.remote.as_ref().map(|r| r.local_addr())
    }

    pub fn remote_stats(&self) -> Option<RemoteStats> {
        self.remote.as_ref().map(|r| r.stats())
    }

    /// Closes the queues and waits for the server to drain.
    pub fn shutdown(mut self) -> Result<ServeStats, BenchError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<ServeStats, BenchError> {
        self.queues.close();
        self.server_queues.close();
        let Some(handle) = self.server.take() else {
            return Ok(ServeStats::default());
        };
        let stats = handle
            .join()
            .map_err(|p| ServerError::Executor(crate::thinker::panic_message(p.as_ref())))??;
        if let Some(r) = &self.remote {
            r.shutdown();
        }
        Ok(stats)
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if self.server.is_some() {
            let _ = self.stop();
        }
    }
}
