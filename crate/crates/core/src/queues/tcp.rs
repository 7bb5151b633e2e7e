//! TCP queue. The steering side listens; the task server connects. One
//! connection carries every topic, each frame holding one record envelope
//! after a hello exchange.

use std::collections::{BTreeSet, VecDeque};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::frame::{read_frame, write_frame, FrameError};
use super::mailbox::Mailbox;
use super::{ClientTransport, QueueError, ServerTransport};
use crate::record::{decode_record_timed, encode_record_timed, ResultRecord, ENVELOPE_VERSION};

const TASKS: &str = "";
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub v: u64,
    pub kind: String,
    pub role: String,
    pub topics: Vec<String>,
}

impl Hello {
    pub fn new(role: &str, topics: &BTreeSet<String>) -> Self {
        Hello {
            v: ENVELOPE_VERSION,
            kind: "hello".into(),
            role: role.into(),
            topics: topics.iter().cloned().collect(),
        }
    }

    fn check(&self, role: &str, topics: &BTreeSet<String>) -> Result<(), QueueError> {
        if self.v != ENVELOPE_VERSION || self.kind != "hello" || self.role != role {
            return Err(QueueError::Handshake(format!("unexpected hello {self:?}")));
        }
        let theirs: BTreeSet<String> = self.topics.iter().cloned().collect();
        if &theirs != topics {
            return Err(QueueError::Handshake(format!(
                "topic mismatch: ours {topics:?}, theirs {theirs:?}"
            )));
        }
        Ok(())
    }
}

fn send_hello(stream: &mut TcpStream, hello: &Hello) -> Result<(), QueueError> {
    let bytes = serde_json::to_vec(hello).expect("hello serializes");
    write_frame(stream, &bytes, 64 * 1024)?;
    Ok(())
}

fn read_hello(stream: &mut TcpStream) -> Result<Hello, QueueError> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let bytes = read_frame(stream, 64 * 1024)?;
    stream.set_read_timeout(None)?;
    serde_json::from_slice(&bytes).map_err(|e| QueueError::Handshake(e.to_string()))
}

fn encode_capped(record: &ResultRecord, cap: usize) -> Result<Vec<u8>, QueueError> {
    let (bytes, _) = encode_record_timed(record)?;
    if bytes.len() > cap {
        return Err(QueueError::PayloadTooLarge {
            len: bytes.len(),
            cap,
        });
    }
    Ok(bytes)
}

/// Reads record frames until the stream ends, pushing each under its topic
/// (or the merged task key) and closing the mailbox afterwards.
fn spawn_reader(
    mut stream: TcpStream,
    mailbox: Arc<Mailbox<ResultRecord>>,
    cap: usize,
    by_topic: bool,
    on_exit: impl FnOnce() + Send + 'static,
) {
    let _ = thread::Builder::new()
        .name("queue-reader".into())
        .spawn(move || {
            loop {
                let bytes = match read_frame(&mut stream, cap) {
                    Ok(b) => b,
                    Err(FrameError::Closed) => break,
                    Err(e) => {
                        tracing::debug!("queue connection ended: {e}");
                        break;
                    }
                };
                match decode_record_timed(&bytes) {
                    Ok(record) => {
                        let key = if by_topic { record.topic.clone() } else { TASKS.to_owned() };
                        if mailbox.push(&key, record).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        tracing::warn!("dropping connection after undecodable record: {e}");
                        break;
                    }
                }
            }
            mailbox.close();
            on_exit();
        });
}

struct HostConn {
    stream: Option<TcpStream>,
    pending: VecDeque<Vec<u8>>,
}

struct HostShared {
    results: Arc<Mailbox<ResultRecord>>,
    conn: Mutex<HostConn>,
    closed: AtomicBool,
    cap: usize,
    addr: SocketAddr,
}

impl HostShared {
    fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        self.results.close();
        let mut conn = self.conn.lock();
        match conn.stream.take() {
            Some(s) => {
                let _ = s.shutdown(Shutdown::Both);
            }
            None => {
                // unblock the pending accept
                let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
            }
        }
    }
}

/// Steering-side endpoint of the TCP queue.
pub(crate) struct TcpHost {
    shared: Arc<HostShared>,
}

impl TcpHost {
    pub fn listen(
        addr: impl ToSocketAddrs,
        topics: BTreeSet<String>,
        cap: usize,
    ) -> Result<Self, QueueError> {
        let listener = TcpListener::bind(addr)?;
        let shared = Arc::new(HostShared {
            results: Arc::new(Mailbox::new()),
            conn: Mutex::new(HostConn {
                stream: None,
                pending: VecDeque::new(),
            }),
            closed: AtomicBool::new(false),
            cap,
            addr: listener.local_addr()?,
        });
        let accept_shared = Arc::clone(&shared);
        thread::Builder::new()
            .name("queue-accept".into())
            .spawn(move || host_accept(listener, accept_shared, topics))?;
        Ok(TcpHost { shared })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.addr
    }
}

fn host_accept(listener: TcpListener, shared: Arc<HostShared>, topics: BTreeSet<String>) {
    for stream in listener.incoming() {
        if shared.closed.load(Ordering::SeqCst) {
            return;
        }
        let Ok(mut stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let handshake = read_hello(&mut stream)
            .and_then(|h| h.check("server", &topics))
            .and_then(|_| send_hello(&mut stream, &Hello::new("client", &topics)));
        if let Err(e) = handshake {
            tracing::warn!("rejecting queue peer: {e}");
            let _ = stream.shutdown(Shutdown::Both);
            continue;
        }
        let Ok(reader) = stream.try_clone() else { continue };
        {
            let mut conn = shared.conn.lock();
            while let Some(frame) = conn.pending.pop_front() {
                if write_frame(&mut stream, &frame, shared.cap).is_err() {
                    break;
                }
            }
            conn.stream = Some(stream);
        }
        let exit_shared = Arc::clone(&shared);
        spawn_reader(reader, Arc::clone(&shared.results), shared.cap, true, move || {
            exit_shared.close()
        });
        // one task server per queue
        return;
    }
}

impl ClientTransport for TcpHost {
    fn send_task(&self, record: &ResultRecord) -> Result<(), QueueError> {
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(QueueError::Closed);
        }
        let bytes = encode_capped(record, self.shared.cap)?;
        let mut conn = self.shared.conn.lock();
        match conn.stream.as_mut() {
            Some(stream) => {
                if let Err(e) = write_frame(stream, &bytes, self.shared.cap) {
                    drop(conn);
                    self.shared.close();
                    return Err(e.into());
                }
            }
            None => conn.pending.push_back(bytes),
        }
        Ok(())
    }

    fn recv_result(&self, topic: &str, timeout: Duration) -> Result<Option<ResultRecord>, QueueError> {
        self.shared
            .results
            .pop(topic, timeout)
            .map_err(|_| QueueError::Closed)
    }

    fn close(&self) {
        self.shared.close();
    }

    fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }
}

/// Task-server endpoint of the TCP queue.
pub(crate) struct TcpPeer {
    tasks: Arc<Mailbox<ResultRecord>>,
    writer: Mutex<TcpStream>,
    closed: Arc<AtomicBool>,
    cap: usize,
}

impl TcpPeer {
    /// Connects to a listening steering process, retrying until `wait`
    /// elapses.
    pub fn connect(
        addr: &str,
        topics: BTreeSet<String>,
        cap: usize,
        wait: Duration,
    ) -> Result<Self, QueueError> {
        let deadline = Instant::now() + wait;
        let mut stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() >= deadline => return Err(e.into()),
                Err(_) => thread::sleep(Duration::from_millis(50)),
            }
        };
        let _ = stream.set_nodelay(true);
        send_hello(&mut stream, &Hello::new("server", &topics))?;
        read_hello(&mut stream)?.check("client", &topics)?;
        let tasks = Arc::new(Mailbox::new());
        let closed = Arc::new(AtomicBool::new(false));
        let reader = stream.try_clone()?;
        let exit_closed = Arc::clone(&closed);
        spawn_reader(reader, Arc::clone(&tasks), cap, false, move || {
            exit_closed.store(true, Ordering::SeqCst)
        });
        Ok(TcpPeer {
            tasks,
            writer: Mutex::new(stream),
            closed,
            cap,
        })
    }
}

impl ServerTransport for TcpPeer {
    fn recv_task(&self, timeout: Duration) -> Result<Option<ResultRecord>, QueueError> {
        self.tasks.pop(TASKS, timeout).map_err(|_| QueueError::Closed)
    }

    fn send_result(&self, record: &ResultRecord) -> Result<(), QueueError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(QueueError::Closed);
        }
        let bytes = encode_capped(record, self.cap)?;
        let mut w = self.writer.lock();
        write_frame(&mut *w, &bytes, self.cap).map_err(|e| {
            self.closed.store(true, Ordering::SeqCst);
            QueueError::from(e)
        })
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.tasks.close();
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst) || self.tasks.is_closed()
    }
}
