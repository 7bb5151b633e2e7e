use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::Sender;
use parking_lot::Mutex;
use serde::Serialize;

use super::protocol::{read_message, write_message, ServerMessage, WorkerMessage};
use super::{Executor, MethodRegistry, ServerError};
use crate::datafabric::PolicyDescriptor;
use crate::record::{FailureCategory, ResultRecord, Stamp};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Address to accept workers on, e.g. `127.0.0.1:0`.
    pub listen: String,
    pub heartbeat_interval: Duration,
    /// A worker silent for this many intervals is declared dead.
    pub missed_heartbeats: u32,
    /// Losses a task survives before it fails with `worker-lost`.
    pub max_losses: u32,
    /// Sent to workers so they proxy large results themselves.
    pub proxy_policy: Option<PolicyDescriptor>,
}

impl RemoteConfig {
    pub fn new(listen: impl Into<String>) -> Self {
        RemoteConfig {
            listen: listen.into(),
            heartbeat_interval: Duration::from_secs(5),
            missed_heartbeats: 3,
            max_losses: 2,
            proxy_policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerInfo {
    pub worker_id: String,
    pub slots: usize,
    /// Wall-clock seconds of the last message from the worker.
    pub last_heartbeat: f64,
    pub in_flight: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RemoteStats {
    pub workers_registered: u64,
    pub workers_rejected: u64,
    pub workers_lost: u64,
    pub dispatched: u64,
    pub redispatches: u64,
    pub lost_tasks_failed: u64,
    /// Highest in-flight count seen on any worker, in thousandths of its
    /// slot count. The dispatcher never lets it exceed 1000.
    pub peak_slot_use: u64,
}

struct Conn {
    info: WorkerInfo,
    stream: Arc<Mutex<TcpStream>>,
    conn_id: u64,
}

#[derive(Default)]
struct State {
    workers: BTreeMap<String, Conn>,
    pending: VecDeque<ResultRecord>,
    in_flight: HashMap<String, (String, ResultRecord)>,
    losses: HashMap<String, u32>,
    completions: Option<Sender<ResultRecord>>,
    stats: RemoteStats,
    stopping: bool,
    next_conn: u64,
    max_losses: u32,
}

struct Shared {
    state: Mutex<State>,
    config: RemoteConfig,
    addr: SocketAddr,
}

/// Dispatches tasks to worker processes connected over TCP.
///
/// Each worker receives at most `slots` tasks at a time. A worker that
/// disconnects or stops sending heartbeats is dropped and its tasks are
/// queued again at the front; a task lost `max_losses` times fails with
/// `worker-lost` instead.
pub struct RemoteExecutor {
    shared: Arc<Shared>,
    listener: Mutex<Option<TcpListener>>,
}

impl RemoteExecutor {
    pub fn bind(config: RemoteConfig) -> Result<Self, ServerError> {
        let listener = TcpListener::bind(&config.listen)?;
        let addr = listener.local_addr()?;
        Ok(RemoteExecutor {
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    max_losses: config.max_losses.max(1),
                    ..State::default()
                }),
                config,
                addr,
            }),
            listener: Mutex::new(Some(listener)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.addr
    }

    pub fn stats(&self) -> RemoteStats {
        self.shared.state.lock().stats
    }

    pub fn workers(&self) -> Vec<WorkerInfo> {
        let state = self.shared.state.lock();
        state.workers.values().map(|c| c.info.clone()).collect()
    }

    pub fn pending(&self) -> usize {
        self.shared.state.lock().pending.len()
    }
}

impl Executor for RemoteExecutor {
    fn start(
        &self,
        _registry: Arc<MethodRegistry>,
        completions: Sender<ResultRecord>,
    ) -> Result<(), ServerError> {
        let listener = self
            .listener
            .lock()
            .take()
            .ok_or_else(|| ServerError::Executor("remote executor already started".into()))?;
        self.shared.state.lock().completions = Some(completions);
        let shared = Arc::clone(&self.shared);
        thread::Builder::new()
            .name("worker-accept".into())
            .spawn(move || accept_loop(listener, shared))?;
        Ok(())
    }

    fn submit(&self, mut record: ResultRecord) {
        let mut state = self.shared.state.lock();
        if state.stopping {
            record.set_failure(FailureCategory::ServerShutdown, "executor is shutting down");
            complete(&mut state, record);
            return;
        }
        state.pending.push_back(record);
        pump(&mut state);
    }

    fn parallelism(&self) -> usize {
        let state = self.shared.state.lock();
        state.workers.values().map(|c| c.info.slots).sum::<usize>().max(1)
    }

    fn shutdown(&self) {
        let mut state = self.shared.state.lock();
        if state.stopping {
            return;
        }
        state.stopping = true;
        let mut leftovers: Vec<ResultRecord> = state.pending.drain(..).collect();
        leftovers.extend(state.in_flight.drain().map(|(_, (_, r))| r));
        for mut r in leftovers {
            r.set_failure(FailureCategory::ServerShutdown, "task server stopped");
            complete(&mut state, r);
        }
        for conn in std::mem::take(&mut state.workers).into_values() {
            let mut s = conn.stream.lock();
            let _ = write_message(&mut *s, &ServerMessage::Shutdown, None);
            let _ = s.shutdown(Shutdown::Both);
        }
        state.completions = None;
        drop(state);
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.shared.addr, Duration::from_millis(200));
    }
}

impl Drop for RemoteExecutor {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn complete(state: &mut State, record: ResultRecord) {
    if let Some(tx) = &state.completions {
        let _ = tx.send(record);
    }
}

/// Hands pending tasks to workers with free slots, least loaded first.
fn pump(state: &mut State) {
    while !state.pending.is_empty() && !state.stopping {
        let Some(worker_id) = state
            .workers
            .values()
            .filter(|c| c.info.in_flight.len() < c.info.slots)
            .min_by_key(|c| c.info.in_flight.len() * 1000 / c.info.slots)
            .map(|c| c.info.worker_id.clone())
        else {
            return;
        };
        let record = state.pending.pop_front().expect("pending is not empty");
        let conn = state.workers.get_mut(&worker_id).expect("worker is present");
        conn.info.in_flight.insert(record.task_id.clone());
        assert!(conn.info.in_flight.len() <= conn.info.slots, "slot bound violated");
        let use_permille = (conn.info.in_flight.len() * 1000 / conn.info.slots) as u64;
        let stream = Arc::clone(&conn.stream);
        let conn_id = conn.conn_id;
        state.stats.peak_slot_use = state.stats.peak_slot_use.max(use_permille);
        let sent = write_message(&mut *stream.lock(), &ServerMessage::Task, Some(&record));
        state
            .in_flight
            .insert(record.task_id.clone(), (worker_id.clone(), record));
        match sent {
            Ok(()) => state.stats.dispatched += 1,
            Err(e) => {
                tracing::warn!(%worker_id, "dispatch failed: {e}");
                lose_worker(state, &worker_id, conn_id);
            }
        }
    }
}

fn lose_worker(state: &mut State, worker_id: &str, conn_id: u64) {
    match state.workers.get(worker_id) {
        Some(c) if c.conn_id == conn_id => {}
        _ => return,
    }
    let conn = state.workers.remove(worker_id).expect("checked above");
    let _ = conn.stream.lock().shutdown(Shutdown::Both);
    if state.stopping {
        return;
    }
    state.stats.workers_lost += 1;
    tracing::warn!(%worker_id, tasks = conn.info.in_flight.len(), "worker lost");
    for task_id in conn.info.in_flight {
        let Some((_, record)) = state.in_flight.remove(&task_id) else {
            continue;
        };
        let losses = state.losses.entry(task_id.clone()).or_insert(0);
        *losses += 1;
        let losses = *losses;
        requeue_or_fail(state, record, losses, worker_id);
    }
}

fn requeue_or_fail(state: &mut State, mut record: ResultRecord, losses: u32, worker_id: &str) {
    if losses >= state.max_losses {
        state.losses.remove(&record.task_id);
        state.stats.lost_tasks_failed += 1;
        record.set_failure(
            FailureCategory::WorkerLost,
            format!("task lost with worker {worker_id:?} ({losses} losses)"),
        );
        complete(state, record);
    } else {
        state.stats.redispatches += 1;
        state.pending.push_front(record);
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.state.lock().stopping {
            return;
        }
        let Ok(stream) = stream else { continue };
        let shared = Arc::clone(&shared);
        let _ = thread::Builder::new()
            .name("worker-conn".into())
            .spawn(move || serve_worker(stream, shared));
    }
}

fn serve_worker(mut stream: TcpStream, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let cfg = &shared.config;
    if stream.set_read_timeout(Some(Duration::from_secs(5))).is_err() {
        return;
    }
    let (worker_id, slots) = match read_message::<WorkerMessage, _>(&mut stream) {
        Ok((WorkerMessage::Register { worker_id, slots }, _)) => (worker_id, slots),
        Ok((other, _)) => {
            tracing::warn!("worker opened with {other:?} instead of register");
            return;
        }
        Err(e) => {
            tracing::debug!("worker handshake failed: {e}");
            return;
        }
    };
    let Ok(writer) = stream.try_clone() else { return };
    let writer = Arc::new(Mutex::new(writer));

    let conn_id = {
        let mut state = shared.state.lock();
        let reason = if state.stopping {
            Some("server is shutting down".to_owned())
        } else if worker_id.is_empty() || slots == 0 {
            Some("worker id must be non-empty and slots at least 1".to_owned())
        } else if state.workers.contains_key(&worker_id) {
            Some(format!("worker id {worker_id:?} is already connected"))
        } else {
            None
        };
        if let Some(reason) = reason {
            state.stats.workers_rejected += 1;
            drop(state);
            let _ = write_message(&mut *writer.lock(), &ServerMessage::Rejected { reason }, None);
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
        let registered = ServerMessage::Registered {
            heartbeat_interval_s: cfg.heartbeat_interval.as_secs_f64(),
            proxy_policy: cfg.proxy_policy.clone(),
        };
        if write_message(&mut *writer.lock(), &registered, None).is_err() {
            return;
        }
        state.next_conn += 1;
        let conn_id = state.next_conn;
        state.workers.insert(
            worker_id.clone(),
            Conn {
                info: WorkerInfo {
                    worker_id: worker_id.clone(),
                    slots,
                    last_heartbeat: Stamp::now().wall,
                    in_flight: BTreeSet::new(),
                },
                stream: writer,
                conn_id,
            },
        );
        state.stats.workers_registered += 1;
        tracing::info!(%worker_id, slots, "worker registered");
        pump(&mut state);
        conn_id
    };

    let silence = cfg.heartbeat_interval * cfg.missed_heartbeats.max(1);
    let _ = stream.set_read_timeout(Some(silence));
    loop {
        match read_message::<WorkerMessage, _>(&mut stream) {
            Ok((WorkerMessage::Ping, _)) => {
                if let Some(c) = shared.state.lock().workers.get_mut(&worker_id) {
                    c.info.last_heartbeat = Stamp::now().wall;
                }
            }
            Ok((WorkerMessage::Result, Some(record))) => {
                let mut state = shared.state.lock();
                let ours = matches!(state.in_flight.get(&record.task_id), Some((w, _)) if *w == worker_id);
                if !ours {
                    tracing::debug!(task_id = %record.task_id, "ignoring stale result");
                    continue;
                }
                state.in_flight.remove(&record.task_id);
                state.losses.remove(&record.task_id);
                if let Some(c) = state.workers.get_mut(&worker_id) {
                    c.info.in_flight.remove(&record.task_id);
                    c.info.last_heartbeat = Stamp::now().wall;
                }
                complete(&mut state, record);
                pump(&mut state);
            }
            Ok((other, _)) => {
                tracing::warn!(%worker_id, "protocol violation: unexpected {other:?}");
                break;
            }
            Err(e) => {
                tracing::debug!(%worker_id, "worker connection ended: {e}");
                break;
            }
        }
    }
    let mut state = shared.state.lock();
    lose_worker(&mut state, &worker_id, conn_id);
    pump(&mut state);
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use crossbeam_channel::Receiver;

    use super::*;
    use crate::record::{new_task_request, TaskRequest, TaskStatus, Value};
    use crate::taskserver::{run_worker, MethodRegistration, WorkerOptions};

    fn registry() -> MethodRegistry {
        let mut r = MethodRegistry::default();
        r.register(MethodRegistration::new("sleep", |args, _, _| {
            thread::sleep(Duration::from_secs_f64(args[0].as_f64().unwrap_or(0.0)));
            Ok(Value::Null)
        }))
        .unwrap();
        r
    }

    fn started(config: RemoteConfig) -> (RemoteExecutor, Receiver<ResultRecord>) {
        let ex = RemoteExecutor::bind(config).unwrap();
        let (tx, rx) = crossbeam_channel::unbounded();
        ex.start(Arc::new(registry()), tx).unwrap();
        (ex, rx)
    }

    fn task(seconds: f64) -> ResultRecord {
        new_task_request(TaskRequest::new("sleep").arg(seconds)).unwrap()
    }

    fn fake_worker(addr: SocketAddr, id: &str) -> (TcpStream, ServerMessage) {
        let mut s = TcpStream::connect(addr).unwrap();
        let register = WorkerMessage::Register {
            worker_id: id.into(),
            slots: 1,
        };
        write_message(&mut s, &register, None).unwrap();
        let (reply, _) = read_message::<ServerMessage, _>(&mut s).unwrap();
        (s, reply)
    }

    fn take_task(s: &mut TcpStream) -> ResultRecord {
        match read_message::<ServerMessage, _>(s).unwrap() {
            (ServerMessage::Task, Some(r)) => r,
            other => panic!("expected a task, got {other:?}"),
        }
    }

    fn real_worker(addr: SocketAddr, id: &str, slots: usize) -> thread::JoinHandle<anyhow::Result<()>> {
        let opts = WorkerOptions::new(addr.to_string(), id, slots);
        thread::spawn(move || run_worker(&opts, registry()))
    }

    #[test]
    fn slots_bound_in_flight_work() {
        let (ex, rx) = started(RemoteConfig::new("127.0.0.1:0"));
        let worker = real_worker(ex.local_addr(), "w1", 2);
        for _ in 0..5 {
            ex.submit(task(0.05));
        }
        let mut done = 0;
        let deadline = Instant::now() + Duration::from_secs(10);
        while done < 5 && Instant::now() < deadline {
            for w in ex.workers() {
                assert!(w.in_flight.len() <= w.slots);
            }
            if let Ok(r) = rx.recv_timeout(Duration::from_millis(5)) {
                assert_eq!(r.success, TaskStatus::Succeeded);
                done += 1;
            }
        }
        assert_eq!(done, 5);
        let stats = ex.stats();
        assert_eq!(stats.peak_slot_use, 1000);
        assert_eq!(stats.dispatched, 5);
        ex.shutdown();
        worker.join().unwrap().unwrap();
    }

    #[test]
    fn lost_task_is_redispatched_once() {
        let (ex, rx) = started(RemoteConfig::new("127.0.0.1:0"));
        let (mut a, _) = fake_worker(ex.local_addr(), "a");
        let submitted = task(0.0);
        ex.submit(submitted.clone());
        assert_eq!(take_task(&mut a).task_id, submitted.task_id);
        drop(a);
        let worker = real_worker(ex.local_addr(), "b", 1);
        let r = rx.recv_timeout(Duration::from_secs(10)).unwrap();
        assert_eq!(r.task_id, submitted.task_id);
        assert_eq!(r.success, TaskStatus::Succeeded);
        assert_eq!(ex.stats().redispatches, 1);
        ex.shutdown();
        worker.join().unwrap().unwrap();
    }

    #[test]
    fn task_lost_twice_fails() {
        let (ex, rx) = started(RemoteConfig::new("127.0.0.1:0"));
        let submitted = task(0.0);
        ex.submit(submitted.clone());
        for id in ["a", "b"] {
            let (mut w, _) = fake_worker(ex.local_addr(), id);
            assert_eq!(take_task(&mut w).task_id, submitted.task_id);
        }
        let r = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(r.failure_category(), Some(FailureCategory::WorkerLost));
        let stats = ex.stats();
        assert_eq!((stats.redispatches, stats.lost_tasks_failed), (1, 1));
    }

    #[test]
    fn duplicate_worker_id_is_rejected() {
        let (ex, _rx) = started(RemoteConfig::new("127.0.0.1:0"));
        let (_a, reply) = fake_worker(ex.local_addr(), "same");
        assert!(matches!(reply, ServerMessage::Registered { .. }));
        let (_b, reply) = fake_worker(ex.local_addr(), "same");
        assert!(matches!(reply, ServerMessage::Rejected { .. }));
        assert_eq!(ex.stats().workers_rejected, 1);
    }

    #[test]
    fn silent_worker_is_declared_dead() {
        let mut config = RemoteConfig::new("127.0.0.1:0");
        config.heartbeat_interval = Duration::from_millis(50);
        let (ex, rx) = started(config);
        let (mut silent, _) = fake_worker(ex.local_addr(), "silent");
        ex.submit(task(0.0));
        take_task(&mut silent);
        let start = Instant::now();
        while ex.stats().workers_lost == 0 {
            assert!(start.elapsed() < Duration::from_secs(2), "worker never declared dead");
            thread::sleep(Duration::from_millis(10));
        }
        assert!(start.elapsed() >= Duration::from_millis(100));
        let worker = real_worker(ex.local_addr(), "alive", 1);
        let r = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(r.success, TaskStatus::Succeeded);
        ex.shutdown();
        worker.join().unwrap().unwrap();
        drop(silent);
    }

    #[test]
    fn shutdown_fails_pending_tasks() {
        let (ex, rx) = started(RemoteConfig::new("127.0.0.1:0"));
        ex.submit(task(0.0));
        ex.shutdown();
        let r = rx.recv_timeout(Duration::from_secs(1)).unwrap();
        assert_eq!(r.failure_category(), Some(FailureCategory::ServerShutdown));
    }
}
