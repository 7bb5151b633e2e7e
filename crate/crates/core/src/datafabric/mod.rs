//! Pass-by-reference data fabric.
//!
//! Large values are written to an object store and replaced by a small
//! [`ProxyRef`] that travels with the control messages. Workers resolve
//! every reference before a task body runs, so task code never sees
//! proxies.
//!
//! Two store backends exist: [`MemoryStoreServer`]/[`MemoryStoreClient`],
//! a key-value server speaking framed requests over TCP, and
//! [`FileDirStore`], one file per key in a shared directory. Keys are
//! write-once, which keeps the per-process [`Resolver`] cache coherent
//! without invalidation.

mod file_dir;
mod memory;
mod policy;
mod resolver;

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::record::Value;

pub use file_dir::FileDirStore;
pub use memory::{MemoryStoreClient, MemoryStoreServer};
pub use policy::{apply_policy, AppliesTo, PolicyDescriptor, ProxyStage, ThresholdPolicy};
pub use resolver::{resolve, resolve_value, Resolver};

pub const DEFAULT_THRESHOLD_BYTES: u64 = 100_000;

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("store unreachable: {0}")]
    Unreachable(String),
    #[error("store full: {requested} bytes requested, {available} of {capacity} free")]
    StoreFull {
        requested: u64,
        available: u64,
        capacity: u64,
    },
    #[error("key {0} is not in the store")]
    MissingKey(String),
    #[error("content hash mismatch for key {0}")]
    Corruption(String),
    #[error("store protocol error: {0}")]
    Protocol(String),
    #[error("invalid proxy payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    MemoryTcp,
    FileDir,
}

/// How the stored bytes map back to a [`Value`]: byte strings are stored
/// raw, everything else as the value's JSON form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadEncoding {
    #[default]
    Raw,
    Json,
}

/// Reference to bytes held in an object store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProxyRef {
    pub store_kind: StoreKind,
    pub locator: String,
    pub key: String,
    pub size_bytes: u64,
    /// SHA-256 of the stored bytes, lowercase hex.
    pub content_hash: String,
    #[serde(default)]
    pub encoding: PayloadEncoding,
}

/// Store-side counters. The resolver keeps its own copy where `gets` counts
/// resolve calls and `bytes_in` the bytes it had to fetch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StoreMetrics {
    pub puts: u64,
    pub gets: u64,
    pub cache_hits: u64,
    pub evictions: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Default)]
pub(crate) struct MetricCounters {
    pub puts: AtomicU64,
    pub gets: AtomicU64,
    pub cache_hits: AtomicU64,
    pub evictions: AtomicU64,
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
}

impl MetricCounters {
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> StoreMetrics {
        StoreMetrics {
            puts: self.puts.load(Ordering::Relaxed),
            gets: self.gets.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            bytes_in: self.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.bytes_out.load(Ordering::Relaxed),
        }
    }
}

/// A key-value byte store reachable from every process in a campaign.
pub trait ObjectStore: Send + Sync {
    fn kind(&self) -> StoreKind;

    /// Where other processes find this store: an address or a directory.
    fn locator(&self) -> String;

    /// Writes `bytes` under `key`. `content_hash` is the SHA-256 hex of
    /// `bytes`, already computed by the caller.
    fn put_bytes(&self, key: &str, bytes: &[u8], content_hash: &str) -> Result<(), FabricError>;

    fn get_bytes(&self, key: &str) -> Result<Vec<u8>, FabricError>;

    /// Removes a key; absent keys are not an error.
    fn evict(&self, key: &str) -> Result<(), FabricError>;

    fn exists(&self, key: &str) -> Result<bool, FabricError>;

    fn metrics(&self) -> StoreMetrics;
}

pub type StoreHandle = Arc<dyn ObjectStore>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stores `bytes` under a fresh key and returns the reference.
pub fn store_put(store: &dyn ObjectStore, bytes: &[u8]) -> Result<ProxyRef, FabricError> {
    put_encoded(store, bytes, PayloadEncoding::Raw)
}

fn put_encoded(
    store: &dyn ObjectStore,
    bytes: &[u8],
    encoding: PayloadEncoding,
) -> Result<ProxyRef, FabricError> {
    let key = Uuid::new_v4().simple().to_string();
    let content_hash = sha256_hex(bytes);
    store.put_bytes(&key, bytes, &content_hash)?;
    Ok(ProxyRef {
        store_kind: store.kind(),
        locator: store.locator(),
        key,
        size_bytes: bytes.len() as u64,
        content_hash,
        encoding,
    })
}

/// Bytes that represent `value` in a store, with their encoding.
pub fn value_payload(value: &Value) -> Result<(PayloadEncoding, std::borrow::Cow<'_, [u8]>), FabricError> {
    match value {
        Value::Bytes(b) => Ok((PayloadEncoding::Raw, std::borrow::Cow::Borrowed(b))),
        other => serde_json::to_vec(other)
            .map(|v| (PayloadEncoding::Json, std::borrow::Cow::Owned(v)))
            .map_err(|e| FabricError::Payload(e.to_string())),
    }
}

/// Size used by the threshold policy: raw length for byte strings, JSON
/// length otherwise.
pub fn payload_size(value: &Value) -> Result<u64, FabricError> {
    Ok(value_payload(value)?.1.len() as u64)
}

/// Manually proxies a value, e.g. an object many tasks will share.
pub fn proxy_value(store: &dyn ObjectStore, value: &Value) -> Result<ProxyRef, FabricError> {
    if let Value::Proxy(p) = value {
        return Ok(p.clone());
    }
    let (encoding, bytes) = value_payload(value)?;
    put_encoded(store, &bytes, encoding)
}

pub(crate) fn payload_to_value(proxy: &ProxyRef, bytes: Vec<u8>) -> Result<Value, FabricError> {
    match proxy.encoding {
        PayloadEncoding::Raw => Ok(Value::Bytes(bytes)),
        PayloadEncoding::Json => {
            serde_json::from_slice(&bytes).map_err(|e| FabricError::Payload(e.to_string()))
        }
    }
}
