//! Remote worker protocol. Every message is a framed JSON header
//! `{"v":1,"kind":...}`; `task` and `result` headers are followed by one
//! more frame holding the record envelope.
//!
//! Worker to server: `register {worker_id, slots}`, `ping`, `result`.
//! Server to worker: `registered {heartbeat_interval_s, proxy_policy}`,
//! `rejected {reason}`, `task`, `shutdown`.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datafabric::PolicyDescriptor;
use crate::queues::frame::{read_frame, write_frame, FrameError, DEFAULT_FRAME_CAP};
use crate::record::{
    decode_record_timed, encode_record_timed, RecordError, ResultRecord, ENVELOPE_VERSION,
};

const HEADER_CAP: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkerMessage {
    Register { worker_id: String, slots: usize },
    Ping,
    Result,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Registered {
        heartbeat_interval_s: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        proxy_policy: Option<PolicyDescriptor>,
    },
    Rejected { reason: String },
    Task,
    Shutdown,
}

pub trait Message: Serialize + DeserializeOwned {
    fn carries_record(&self) -> bool;
}

impl Message for WorkerMessage {
    fn carries_record(&self) -> bool {
        matches!(self, WorkerMessage::Result)
    }
}

impl Message for ServerMessage {
    fn carries_record(&self) -> bool {
        matches!(self, ServerMessage::Task)
    }
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    v: u64,
    #[serde(flatten)]
    msg: M,
}

/// Writes `msg`, followed by `record` for messages that carry one.
pub fn write_message<M: Message, W: Write>(
    w: &mut W,
    msg: &M,
    record: Option<&ResultRecord>,
) -> Result<(), ProtocolError> {
    if msg.carries_record() != record.is_some() {
        return Err(ProtocolError::Malformed(
            "record presence does not match message kind".into(),
        ));
    }
    let header = serde_json::to_vec(&Header {
        v: ENVELOPE_VERSION,
        msg,
    })
    .map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    // Encode before writing anything so a too-large record leaves the
    // stream intact.
    let body = record.map(encode_record_timed).transpose()?;
    write_frame(w, &header, HEADER_CAP)?;
    if let Some((bytes, _)) = body {
        write_frame(w, &bytes, DEFAULT_FRAME_CAP)?;
    }
    Ok(())
}

pub fn read_message<M: Message, R: Read>(
    r: &mut R,
) -> Result<(M, Option<ResultRecord>), ProtocolError> {
    let bytes = read_frame(r, HEADER_CAP)?;
    let header: Header<M> =
        serde_json::from_slice(&bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if header.v != ENVELOPE_VERSION {
        return Err(RecordError::UnsupportedVersion(header.v).into());
    }
    let record = if header.msg.carries_record() {
        Some(decode_record_timed(&read_frame(r, DEFAULT_FRAME_CAP)?)?)
    } else {
        None
    };
    Ok((header.msg, record))
}
