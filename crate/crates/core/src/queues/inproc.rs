//! In-process queue pair. Records are still encoded to the envelope on
//! send and decoded on receipt, the way a pipe between processes would
//! carry them, so costs and size limits match the TCP queue.

use std::sync::Arc;
use std::time::Duration;

use super::mailbox::Mailbox;
use super::{ClientTransport, QueueError, ServerTransport};
use crate::record::{decode_record_timed, encode_record_timed, ResultRecord};

const TASKS: &str = "";

pub(crate) struct InProcShared {
    tasks: Mailbox<Vec<u8>>,
    results: Mailbox<Vec<u8>>,
    cap: usize,
}

impl InProcShared {
    pub fn new(cap: usize) -> Arc<Self> {
        Arc::new(InProcShared {
            tasks: Mailbox::new(),
            results: Mailbox::new(),
            cap,
        })
    }

    fn encode(&self, record: &ResultRecord) -> Result<Vec<u8>, QueueError> {
        let (bytes, _) = encode_record_timed(record)?;
        if bytes.len() > self.cap {
            return Err(QueueError::PayloadTooLarge {
                len: bytes.len(),
                cap: self.cap,
            });
        }
        Ok(bytes)
    }

    fn close(&self) {
        self.tasks.close();
        self.results.close();
    }
}

pub(crate) struct InProcClient(pub Arc<InProcShared>);
pub(crate) struct InProcServer(pub Arc<InProcShared>);

impl ClientTransport for InProcClient {
    fn send_task(&self, record: &ResultRecord) -> Result<(), QueueError> {
        let bytes = self.0.encode(record)?;
        self.0.tasks.push(TASKS, bytes).map_err(|_| QueueError::Closed)
    }

    fn recv_result(&self, topic: &str, timeout: Duration) -> Result<Option<ResultRecord>, QueueError> {
        match self.0.results.pop(topic, timeout) {
            Ok(Some(bytes)) => Ok(Some(decode_record_timed(&bytes)?)),
            Ok(None) => Ok(None),
            Err(_) => Err(QueueError::Closed),
        }
    }

    fn close(&self) {
        self.0.close();
    }

    fn is_closed(&self) -> bool {
        self.0.results.is_closed()
    }
}

impl ServerTransport for InProcServer {
    fn recv_task(&self, timeout: Duration) -> Result<Option<ResultRecord>, QueueError> {
        match self.0.tasks.pop(TASKS, timeout) {
            Ok(Some(bytes)) => Ok(Some(decode_record_timed(&bytes)?)),
            Ok(None) => Ok(None),
            Err(_) => Err(QueueError::Closed),
        }
    }

    fn send_result(&self, record: &ResultRecord) -> Result<(), QueueError> {
        let bytes = self.0.encode(record)?;
        self.0
            .results
            .push(&record.topic, bytes)
            .map_err(|_| QueueError::Closed)
    }

    fn close(&self) {
        self.0.close();
    }

    fn is_closed(&self) -> bool {
        self.0.tasks.is_closed()
    }
}
