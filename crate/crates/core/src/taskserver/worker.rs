use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use parking_lot::Mutex;

use super::protocol::{read_message, write_message, ProtocolError, ServerMessage, WorkerMessage};
use super::{execute_task, MethodRegistry, StateCache, DEFAULT_CACHE_CAPACITY};
use crate::datafabric::{ProxyStage, Resolver, ThresholdPolicy};
use crate::queues::frame::FrameError;
use crate::record::{FailureCategory, ResultRecord};

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub connect: String,
    pub worker_id: String,
    pub slots: usize,
    pub cache_capacity: usize,
    /// How long to keep retrying the initial connection.
    pub connect_wait: Duration,
}

impl WorkerOptions {
    pub fn new(connect: impl Into<String>, worker_id: impl Into<String>, slots: usize) -> Self {
        WorkerOptions {
            connect: connect.into(),
            worker_id: worker_id.into(),
            slots,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            connect_wait: Duration::from_secs(10),
        }
    }
}

fn connect(addr: &str, wait: Duration) -> anyhow::Result<TcpStream> {
    let deadline = Instant::now() + wait;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(e).with_context(|| format!("connecting to {addr}"))
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

/// Runs a remote worker until the server sends `shutdown` or closes the
/// connection. Tasks execute on `slots` threads sharing one state cache;
/// large results are proxied here when the server hands out a policy.
pub fn run_worker(options: &WorkerOptions, registry: MethodRegistry) -> anyhow::Result<()> {
    let mut stream = connect(&options.connect, options.connect_wait)?;
    let _ = stream.set_nodelay(true);
    let register = WorkerMessage::Register {
        worker_id: options.worker_id.clone(),
        slots: options.slots,
    };
    write_message(&mut stream, &register, None)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let (heartbeat, policy) = match read_message::<ServerMessage, _>(&mut stream)?.0 {
        ServerMessage::Registered {
            heartbeat_interval_s,
            proxy_policy,
        } => (
            Duration::from_secs_f64(heartbeat_interval_s.max(0.01)),
            proxy_policy.map(|d| ThresholdPolicy::from_descriptor(&d)).transpose()?,
        ),
        ServerMessage::Rejected { reason } => bail!("server rejected worker: {reason}"),
        other => bail!("unexpected reply to register: {other:?}"),
    };
    stream.set_read_timeout(None)?;
    tracing::info!(worker_id = %options.worker_id, "registered with {}", options.connect);

    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let stop = Arc::new(AtomicBool::new(false));
    let registry = Arc::new(registry);
    let cache = Arc::new(StateCache::new(options.cache_capacity));
    let policy = Arc::new(policy);
    let (tx, rx) = crossbeam_channel::unbounded::<ResultRecord>();

    let mut threads = Vec::new();
    for i in 0..options.slots.max(1) {
        let rx = rx.clone();
        let registry = Arc::clone(&registry);
        let cache = Arc::clone(&cache);
        let policy = Arc::clone(&policy);
        let writer = Arc::clone(&writer);
        let worker_id = options.worker_id.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("{worker_id}-slot{i}"))
                .spawn(move || {
                    for task in rx {
                        let mut done =
                            execute_task(&registry, task, &cache, Resolver::global(), &worker_id);
                        if let Some(p) = policy.as_ref() {
                            if let Err(e) = p.apply(&mut done, ProxyStage::Result) {
                                done.set_failure(
                                    FailureCategory::TaskError,
                                    format!("result could not be stored: {e}"),
                                );
                            }
                        }
                        let sent =
                            write_message(&mut *writer.lock(), &WorkerMessage::Result, Some(&done));
                        if let Err(e) = sent {
                            tracing::warn!("result not returned: {e}");
                            break;
                        }
                    }
                })?,
        );
    }

    let pinger = {
        let writer = Arc::clone(&writer);
        let stop = Arc::clone(&stop);
        thread::Builder::new().name("heartbeat".into()).spawn(move || {
            let tick = Duration::from_millis(20).min(heartbeat);
            let mut next = Instant::now() + heartbeat;
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(tick);
                if Instant::now() >= next {
                    if write_message(&mut *writer.lock(), &WorkerMessage::Ping, None).is_err() {
                        break;
                    }
                    next += heartbeat;
                }
            }
        })?
    };

    let outcome = loop {
        match read_message::<ServerMessage, _>(&mut stream) {
            Ok((ServerMessage::Task, Some(task))) => {
                let _ = tx.send(task);
            }
            Ok((ServerMessage::Shutdown, _)) => break Ok(()),
            Ok((other, _)) => break Err(anyhow::anyhow!("unexpected server message {other:?}")),
            Err(ProtocolError::Frame(FrameError::Closed)) => break Ok(()),
            Err(e) => break Err(e.into()),
        }
    };
    stop.store(true, Ordering::SeqCst);
    drop(tx);
    for t in threads {
        let _ = t.join();
    }
    let _ = stream.shutdown(Shutdown::Both);
    let _ = pinger.join();
    outcome
}
