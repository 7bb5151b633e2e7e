//! In-memory key-value server and its client.
//!
//! Wire protocol: each request is a framed JSON header
//! `{"op":"put"|"get"|"evict"|"exists","key":...,"len":N}`; a put header is
//! followed by N raw bytes. Responses mirror this: a framed JSON header
//! `{"ok":true,"len":N}` followed by N raw bytes for a get.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{FabricError, MetricCounters, ObjectStore, StoreKind, StoreMetrics};
use crate::queues::frame::{read_exact_payload, read_frame, write_frame, FrameError};

const HEADER_CAP: usize = 64 * 1024;
/// Puts larger than this are refused outright and the connection dropped.
const MAX_BODY: u64 = 1 << 32;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Request {
    Put { key: String, len: u64 },
    Get { key: String },
    Evict { key: String },
    Exists { key: String },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Response {
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exists: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    available: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity: Option<u64>,
}

impl Response {
    fn ok() -> Self {
        Response {
            ok: true,
            ..Default::default()
        }
    }

    fn err(kind: &str, message: impl Into<String>) -> Self {
        Response {
            ok: false,
            error: Some(kind.to_owned()),
            message: Some(message.into()),
            ..Default::default()
        }
    }
}

#[derive(Default)]
struct Table {
    entries: HashMap<String, Arc<Vec<u8>>>,
    used: u64,
}

struct ServerShared {
    table: Mutex<Table>,
    capacity: u64,
    metrics: MetricCounters,
    stopped: AtomicBool,
    conns: Mutex<Vec<TcpStream>>,
}

/// In-memory object store served over TCP.
pub struct MemoryStoreServer {
    shared: Arc<ServerShared>,
    addr: SocketAddr,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

impl MemoryStoreServer {
    /// Binds `addr` (use port 0 for an ephemeral port). `capacity_bytes`
    /// bounds the total size of stored values.
    pub fn start(addr: impl ToSocketAddrs, capacity_bytes: u64) -> Result<Self, FabricError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(ServerShared {
            table: Mutex::new(Table::default()),
            capacity: capacity_bytes,
            metrics: MetricCounters::default(),
            stopped: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
        });
        let acceptor = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("memstore-accept".into())
                .spawn(move || accept_loop(listener, shared))?
        };
        Ok(MemoryStoreServer {
            shared,
            addr,
            acceptor: Mutex::new(Some(acceptor)),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn locator(&self) -> String {
        self.addr.to_string()
    }

    pub fn metrics(&self) -> StoreMetrics {
        self.shared.metrics.snapshot()
    }

    pub fn used_bytes(&self) -> u64 {
        self.shared.table.lock().used
    }

    /// Stops accepting connections and drops every open one. Stored data
    /// is discarded with the server.
    pub fn stop(&self) {
        if self.shared.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for c in self.shared.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for MemoryStoreServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<ServerShared>) {
    for stream in listener.incoming() {
        if shared.stopped.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            let mut conns = shared.conns.lock();
            conns.retain(|c| c.peer_addr().is_ok());
            conns.push(clone);
        }
        let shared = Arc::clone(&shared);
        let _ = thread::Builder::new()
            .name("memstore-conn".into())
            .spawn(move || {
                if let Err(e) = serve_connection(stream, &shared) {
                    tracing::debug!("memory store connection ended: {e}");
                }
            });
    }
}

fn serve_connection(mut stream: TcpStream, shared: &ServerShared) -> Result<(), FrameError> {
    loop {
        let header = match read_frame(&mut stream, HEADER_CAP) {
            Ok(h) => h,
            Err(FrameError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        if shared.stopped.load(Ordering::SeqCst) {
            return Ok(());
        }
        let request: Request = match serde_json::from_slice(&header) {
            Ok(r) => r,
            Err(e) => {
                send(&mut stream, &Response::err("bad_request", e.to_string()))?;
                return Ok(());
            }
        };
        match request {
            Request::Put { key, len } => {
                if len > MAX_BODY {
                    send(&mut stream, &Response::err("bad_request", "body too large"))?;
                    return Ok(());
                }
                let fits = {
                    let t = shared.table.lock();
                    t.used + len <= shared.capacity
                };
                if !fits {
                    io::copy(&mut (&mut stream).take(len), &mut io::sink())?;
                    let used = shared.table.lock().used;
                    let mut resp = Response::err("full", "store capacity exceeded");
                    resp.available = Some(shared.capacity.saturating_sub(used));
                    resp.capacity = Some(shared.capacity);
                    send(&mut stream, &resp)?;
                    continue;
                }
                let body = read_exact_payload(&mut stream, len as usize)?;
                let resp = {
                    let mut t = shared.table.lock();
                    if t.entries.contains_key(&key) {
                        Response::err("exists", format!("key {key} already written"))
                    } else if t.used + len > shared.capacity {
                        let mut r = Response::err("full", "store capacity exceeded");
                        r.available = Some(shared.capacity.saturating_sub(t.used));
                        r.capacity = Some(shared.capacity);
                        r
                    } else {
                        t.used += len;
                        t.entries.insert(key, Arc::new(body));
                        MetricCounters::add(&shared.metrics.puts, 1);
                        MetricCounters::add(&shared.metrics.bytes_in, len);
                        Response::ok()
                    }
                };
                send(&mut stream, &resp)?;
            }
            Request::Get { key } => {
                let value = shared.table.lock().entries.get(&key).cloned();
                match value {
                    Some(bytes) => {
                        let resp = Response {
                            len: Some(bytes.len() as u64),
                            ..Response::ok()
                        };
                        send(&mut stream, &resp)?;
                        stream.write_all(&bytes)?;
                        stream.flush()?;
                        MetricCounters::add(&shared.metrics.gets, 1);
                        MetricCounters::add(&shared.metrics.bytes_out, bytes.len() as u64);
                    }
                    None => send(&mut stream, &Response::err("missing", key))?,
                }
            }
            Request::Evict { key } => {
                {
                    let mut t = shared.table.lock();
                    if let Some(v) = t.entries.remove(&key) {
                        t.used -= v.len() as u64;
                        MetricCounters::add(&shared.metrics.evictions, 1);
                    }
                }
                send(&mut stream, &Response::ok())?;
            }
            Request::Exists { key } => {
                let exists = shared.table.lock().entries.contains_key(&key);
                send(
                    &mut stream,
                    &Response {
                        exists: Some(exists),
                        ..Response::ok()
                    },
                )?;
            }
        }
    }
}

fn send(stream: &mut TcpStream, resp: &Response) -> Result<(), FrameError> {
    let bytes = serde_json::to_vec(resp).expect("response serializes");
    write_frame(stream, &bytes, HEADER_CAP)
}

/// Client handle for a [`MemoryStoreServer`], safe to share between
/// threads. Connections are pooled.
pub struct MemoryStoreClient {
    addr: String,
    pool: Mutex<Vec<TcpStream>>,
    metrics: MetricCounters,
}

impl std::fmt::Debug for MemoryStoreClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStoreClient").field("addr", &self.addr).finish()
    }
}

impl MemoryStoreClient {
    pub fn connect(locator: &str) -> Result<Self, FabricError> {
        let client = MemoryStoreClient {
            addr: locator.to_owned(),
            pool: Mutex::new(Vec::new()),
            metrics: MetricCounters::default(),
        };
        let stream = client.open()?;
        client.pool.lock().push(stream);
        Ok(client)
    }

    fn open(&self) -> Result<TcpStream, FabricError> {
        let stream = TcpStream::connect(&self.addr)
            .map_err(|e| FabricError::Unreachable(format!("{}: {e}", self.addr)))?;
        let _ = stream.set_nodelay(true);
        Ok(stream)
    }

    fn request(
        &self,
        req: &Request,
        body: Option<&[u8]>,
    ) -> Result<(Response, Option<Vec<u8>>), FabricError> {
        let pooled = self.pool.lock().pop();
        let had_pooled = pooled.is_some();
        let mut stream = match pooled {
            Some(s) => s,
            None => self.open()?,
        };
        let result = match exchange(&mut stream, req, body) {
            // A pooled connection may have gone stale; retry once on a
            // fresh one.
            Err(_) if had_pooled => {
                stream = self.open()?;
                exchange(&mut stream, req, body)
            }
            other => other,
        };
        match result {
            Ok(out) => {
                self.pool.lock().push(stream);
                Ok(out)
            }
            Err(e) => Err(FabricError::Unreachable(format!("{}: {e}", self.addr))),
        }
    }

    fn check(resp: Response) -> Result<Response, FabricError> {
        if resp.ok {
            return Ok(resp);
        }
        let message = resp.message.clone().unwrap_or_default();
        Err(match resp.error.as_deref() {
            Some("missing") => FabricError::MissingKey(message),
            Some("full") => FabricError::StoreFull {
                requested: 0,
                available: resp.available.unwrap_or(0),
                capacity: resp.capacity.unwrap_or(0),
            },
            _ => FabricError::Protocol(message),
        })
    }
}

fn exchange(
    stream: &mut TcpStream,
    req: &Request,
    body: Option<&[u8]>,
) -> Result<(Response, Option<Vec<u8>>), FrameError> {
    let header = serde_json::to_vec(req).expect("request serializes");
    write_frame(stream, &header, HEADER_CAP)?;
    if let Some(body) = body {
        stream.write_all(body)?;
        stream.flush()?;
    }
    let resp: Response = serde_json::from_slice(&read_frame(stream, HEADER_CAP)?)
        .map_err(|e| FrameError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))?;
    let payload = match (&req, resp.ok, resp.len) {
        (Request::Get { .. }, true, Some(len)) => Some(read_exact_payload(stream, len as usize)?),
        _ => None,
    };
    Ok((resp, payload))
}

impl ObjectStore for MemoryStoreClient {
    fn kind(&self) -> StoreKind {
        StoreKind::MemoryTcp
    }

    fn locator(&self) -> String {
        self.addr.clone()
    }

    fn put_bytes(&self, key: &str, bytes: &[u8], _content_hash: &str) -> Result<(), FabricError> {
        let req = Request::Put {
            key: key.to_owned(),
            len: bytes.len() as u64,
        };
        let (resp, _) = self.request(&req, Some(bytes))?;
        match Self::check(resp) {
            Err(FabricError::StoreFull {
                available, capacity, ..
            }) => Err(FabricError::StoreFull {
                requested: bytes.len() as u64,
                available,
                capacity,
            }),
            Err(e) => Err(e),
            Ok(_) => {
                MetricCounters::add(&self.metrics.puts, 1);
                MetricCounters::add(&self.metrics.bytes_in, bytes.len() as u64);
                Ok(())
            }
        }
    }

    fn get_bytes(&self, key: &str) -> Result<Vec<u8>, FabricError> {
        let (resp, payload) = self.request(
            &Request::Get {
                key: key.to_owned(),
            },
            None,
        )?;
        Self::check(resp)?;
        let bytes = payload.ok_or_else(|| FabricError::Protocol("get without body".into()))?;
        MetricCounters::add(&self.metrics.gets, 1);
        MetricCounters::add(&self.metrics.bytes_out, bytes.len() as u64);
        Ok(bytes)
    }

    fn evict(&self, key: &str) -> Result<(), FabricError> {
        let (resp, _) = self.request(
            &Request::Evict {
                key: key.to_owned(),
            },
            None,
        )?;
        Self::check(resp)?;
        MetricCounters::add(&self.metrics.evictions, 1);
        Ok(())
    }

    fn exists(&self, key: &str) -> Result<bool, FabricError> {
        let (resp, _) = self.request(
            &Request::Exists {
                key: key.to_owned(),
            },
            None,
        )?;
        Ok(Self::check(resp)?.exists.unwrap_or(false))
    }

    fn metrics(&self) -> StoreMetrics {
        self.metrics.snapshot()
    }
}
