//! Topic-partitioned task queues between the steering process and the task
//! server.
//!
//! [`TaskQueues`] is the steering side (send requests, receive results) and
//! [`ServerQueues`] the task-server side. Both wrap a transport: an
//! in-process pair or one TCP connection hosted by the steering process.
//! Timeouts come back as `Ok(None)`; only a closed queue is an error.

pub mod frame;
mod inproc;
mod mailbox;
mod tcp;

use std::collections::BTreeSet;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::datafabric::{FabricError, ProxyStage, ThresholdPolicy};
use crate::record::{
    new_task_request, RecordError, ResultRecord, TaskRequest, TimestampEvent, DEFAULT_TOPIC,
};
use frame::{FrameError, DEFAULT_FRAME_CAP};

pub use tcp::Hello;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("topic {0:?} is not declared on this queue")]
    UnknownTopic(String),
    #[error("queue is closed")]
    Closed,
    #[error("encoded record of {len} bytes exceeds the {cap}-byte frame cap")]
    PayloadTooLarge { len: usize, cap: usize },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("queue connection failed: {0}")]
    Connection(String),
    #[error("queue handshake failed: {0}")]
    Handshake(String),
    #[error("invalid queue configuration: {0}")]
    InvalidConfig(String),
}

impl From<FrameError> for QueueError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::TooLarge { len, cap } => QueueError::PayloadTooLarge { len, cap },
            FrameError::Closed => QueueError::Closed,
            other => QueueError::Connection(other.to_string()),
        }
    }
}

impl From<io::Error> for QueueError {
    fn from(e: io::Error) -> Self {
        QueueError::Connection(e.to_string())
    }
}

/// Steering-side half of a transport.
pub trait ClientTransport: Send + Sync {
    fn send_task(&self, record: &ResultRecord) -> Result<(), QueueError>;
    fn recv_result(&self, topic: &str, timeout: Duration) -> Result<Option<ResultRecord>, QueueError>;
    fn close(&self);
    fn is_closed(&self) -> bool;
}

/// Task-server half of a transport. Tasks from all topics arrive merged in
/// send order.
pub trait ServerTransport: Send + Sync {
    fn recv_task(&self, timeout: Duration) -> Result<Option<ResultRecord>, QueueError>;
    fn send_result(&self, record: &ResultRecord) -> Result<(), QueueError>;
    fn close(&self);
    fn is_closed(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueKind {
    InProcess,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    pub kind: QueueKind,
    /// `host:port`; required for TCP, absent otherwise.
    pub endpoint: Option<String>,
    pub topics: BTreeSet<String>,
    pub proxy_policy: Option<ThresholdPolicy>,
    pub frame_cap: usize,
}

impl QueueConfig {
    pub fn in_process() -> Self {
        QueueConfig {
            kind: QueueKind::InProcess,
            endpoint: None,
            topics: [DEFAULT_TOPIC.to_owned()].into(),
            proxy_policy: None,
            frame_cap: DEFAULT_FRAME_CAP,
        }
    }

    pub fn tcp(endpoint: impl Into<String>) -> Self {
        QueueConfig {
            kind: QueueKind::Tcp,
            endpoint: Some(endpoint.into()),
            ..Self::in_process()
        }
    }

    /// Adds topics next to `"default"`.
    pub fn with_topics<I, S>(mut self, topics: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.topics.extend(topics.into_iter().map(Into::into));
        self
    }

    pub fn with_policy(mut self, policy: ThresholdPolicy) -> Self {
        self.proxy_policy = Some(policy);
        self
    }

    pub fn with_frame_cap(mut self, cap: usize) -> Self {
        self.frame_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        if !self.topics.contains(DEFAULT_TOPIC) {
            return Err(QueueError::InvalidConfig(
                "topics must include \"default\"".into(),
            ));
        }
        if self.topics.iter().any(String::is_empty) {
            return Err(QueueError::InvalidConfig("empty topic name".into()));
        }
        match (self.kind, &self.endpoint) {
            (QueueKind::Tcp, None) => Err(QueueError::InvalidConfig(
                "tcp queue needs an endpoint".into(),
            )),
            (QueueKind::InProcess, Some(_)) => Err(QueueError::InvalidConfig(
                "in-process queue takes no endpoint".into(),
            )),
            _ if self.frame_cap == 0 => Err(QueueError::InvalidConfig("zero frame cap".into())),
            _ => Ok(()),
        }
    }
}

/// Builds both ends inside this process. For TCP the steering side listens
/// on the configured endpoint and the server side connects to it.
pub fn queue_pair(config: &QueueConfig) -> Result<(TaskQueues, ServerQueues), QueueError> {
    config.validate()?;
    match config.kind {
        QueueKind::InProcess => {
            let shared = inproc::InProcShared::new(config.frame_cap);
            let client = TaskQueues::from_transport(
                Box::new(inproc::InProcClient(Arc::clone(&shared))),
                config,
                None,
            );
            let server = ServerQueues::from_transport(
                Box::new(inproc::InProcServer(shared)),
                config,
            );
            Ok((client, server))
        }
        QueueKind::Tcp => {
            let client = TaskQueues::listen(config)?;
            let addr = client.local_addr().expect("tcp queue has an address");
            let server = ServerQueues::connect(config, &addr.to_string(), Duration::from_secs(5))?;
            Ok((client, server))
        }
    }
}

struct ClientInner {
    transport: Box<dyn ClientTransport>,
    topics: BTreeSet<String>,
    policy: Option<ThresholdPolicy>,
    addr: Option<SocketAddr>,
}

/// Steering-side queue handle. Cheap to clone and safe to share between
/// agents.
#[derive(Clone)]
pub struct TaskQueues {
    inner: Arc<ClientInner>,
}

impl std::fmt::Debug for TaskQueues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskQueues")
            .field("topics", &self.inner.topics)
            .field("addr", &self.inner.addr)
            .finish()
    }
}

impl TaskQueues {
    fn from_transport(
        transport: Box<dyn ClientTransport>,
        config: &QueueConfig,
        addr: Option<SocketAddr>,
    ) -> Self {
        TaskQueues {
            inner: Arc::new(ClientInner {
                transport,
                topics: config.topics.clone(),
                policy: config.proxy_policy.clone(),
                addr,
            }),
        }
    }

    /// Binds the TCP endpoint of `config` and waits for a task server in the
    /// background. Requests sent before it connects are buffered.
    pub fn listen(config: &QueueConfig) -> Result<Self, QueueError> {
        config.validate()?;
        let endpoint = config
            .endpoint
            .as_deref()
            .filter(|_| config.kind == QueueKind::Tcp)
            .ok_or_else(|| QueueError::InvalidConfig("listen needs a tcp config".into()))?;
        let host = tcp::TcpHost::listen(endpoint, config.topics.clone(), config.frame_cap)?;
        let addr = host.local_addr();
        Ok(Self::from_transport(Box::new(host), config, Some(addr)))
    }

    /// Bound address of a TCP queue.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.inner.addr
    }

    pub fn topics(&self) -> &BTreeSet<String> {
        &self.inner.topics
    }

    pub fn policy(&self) -> Option<&ThresholdPolicy> {
        self.inner.policy.as_ref()
    }

    fn check_topic(&self, topic: &str) -> Result<(), QueueError> {
        if self.inner.topics.contains(topic) {
            Ok(())
        } else {
            Err(QueueError::UnknownTopic(topic.to_owned()))
        }
    }

    /// Builds a record from `request`, proxies large inputs, marks
    /// `input_sent` and enqueues it. Returns the task id without waiting.
    pub fn send_inputs(&self, request: TaskRequest) -> Result<String, QueueError> {
        let topic = request.topic.as_deref().unwrap_or(DEFAULT_TOPIC);
        self.check_topic(topic)?;
        if self.inner.transport.is_closed() {
            return Err(QueueError::Closed);
        }
        let mut record = new_task_request(request)?;
        if let Some(policy) = &self.inner.policy {
            policy.apply(&mut record, ProxyStage::Inputs)?;
        }
        record.mark(TimestampEvent::InputSent)?;
        self.inner.transport.send_task(&record)?;
        Ok(record.task_id)
    }

    /// Oldest completed record on `topic`, or `None` after `timeout`.
    /// `result_received` is marked on the returned record.
    pub fn get_result(
        &self,
        topic: &str,
        timeout: Duration,
    ) -> Result<Option<ResultRecord>, QueueError> {
        self.check_topic(topic)?;
        let Some(mut record) = self.inner.transport.recv_result(topic, timeout)? else {
            return Ok(None);
        };
        record.mark(TimestampEvent::ResultReceived)?;
        Ok(Some(record))
    }

    pub fn close(&self) {
        self.inner.transport.close();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.transport.is_closed()
    }
}

struct ServerInner {
    transport: Box<dyn ServerTransport>,
    policy: Option<ThresholdPolicy>,
}

/// Task-server queue handle.
#[derive(Clone)]
pub struct ServerQueues {
    inner: Arc<ServerInner>,
}

impl ServerQueues {
    fn from_transport(transport: Box<dyn ServerTransport>, config: &QueueConfig) -> Self {
        ServerQueues {
            inner: Arc::new(ServerInner {
                transport,
                policy: config.proxy_policy.clone(),
            }),
        }
    }

    /// Connects to a steering process listening at `addr`, retrying for up
    /// to `wait`. Topics in `config` must match the listener's.
    pub fn connect(config: &QueueConfig, addr: &str, wait: Duration) -> Result<Self, QueueError> {
        let peer = tcp::TcpPeer::connect(addr, config.topics.clone(), config.frame_cap, wait)?;
        Ok(Self::from_transport(Box::new(peer), config))
    }

    pub fn policy(&self) -> Option<&ThresholdPolicy> {
        self.inner.policy.as_ref()
    }

    /// Next task across all topics, with `task_received_by_server` marked.
    pub fn get_task(&self, timeout: Duration) -> Result<Option<ResultRecord>, QueueError> {
        let Some(mut record) = self.inner.transport.recv_task(timeout)? else {
            return Ok(None);
        };
        record.mark(TimestampEvent::TaskReceivedByServer)?;
        Ok(Some(record))
    }

    /// Proxies a large result value, marks `result_sent` and delivers the
    /// record to its topic.
    pub fn send_result(&self, mut record: ResultRecord) -> Result<(), QueueError> {
        if !record.is_complete() {
            return Err(QueueError::Record(RecordError::Inconsistent(
                "cannot return a pending record".into(),
            )));
        }
        if let Some(policy) = &self.inner.policy {
            policy.apply(&mut record, ProxyStage::Result)?;
        }
        record.mark(TimestampEvent::ResultSent)?;
        self.inner.transport.send_result(&record)
    }

    pub fn close(&self) {
        self.inner.transport.close();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.transport.is_closed()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::time::Instant;

    use super::*;
    use crate::datafabric::FileDirStore;
    use crate::record::{encode_record, TaskStatus, Value};

    fn complete(mut r: ResultRecord) -> ResultRecord {
        r.set_result(Value::Int(3));
        r
    }

    fn both_kinds() -> Vec<QueueConfig> {
        vec![QueueConfig::in_process(), QueueConfig::tcp("127.0.0.1:0")]
    }

    #[test]
    fn config_validation() {
        assert!(QueueConfig::in_process().validate().is_ok());
        let mut c = QueueConfig::in_process();
        c.topics.clear();
        assert!(c.validate().is_err());
        let mut c = QueueConfig::tcp("127.0.0.1:0");
        c.endpoint = None;
        assert!(c.validate().is_err());
        let mut c = QueueConfig::in_process();
        c.endpoint = Some("x:1".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn round_trip_marks_every_hop() {
        for cfg in both_kinds() {
            let (client, server) = queue_pair(&cfg).unwrap();
            let id = client
                .send_inputs(TaskRequest::new("compute_logp").arg(Value::floats(&[0.5])).info("w", 0i64))
                .unwrap();
            let task = server.get_task(Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!(task.task_id, id);
            assert_eq!(task.task_info["w"], Value::Int(0));
            assert!(task.timestamps.input_sent.is_some());
            assert!(task.timestamps.task_received_by_server.is_some());
            server.send_result(complete(task)).unwrap();
            let done = client.get_result("default", Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!(done.task_id, id);
            assert_eq!(done.success, TaskStatus::Succeeded);
            assert!(done.timestamps.result_sent.is_some());
            assert!(done.timestamps.result_received.is_some());
            assert!(done.time_costs.serialization_s > 0.0);
            assert!(done.time_costs.deserialization_s > 0.0);
            client.close();
        }
    }

    #[test]
    fn unknown_topic_is_rejected() {
        let (client, _server) = queue_pair(&QueueConfig::in_process()).unwrap();
        assert!(matches!(
            client.send_inputs(TaskRequest::new("f").topic("nope")),
            Err(QueueError::UnknownTopic(_))
        ));
        assert!(matches!(
            client.get_result("nope", Duration::ZERO),
            Err(QueueError::UnknownTopic(_))
        ));
    }

    #[test]
    fn timeout_is_not_an_error() {
        for cfg in both_kinds() {
            let (client, server) = queue_pair(&cfg).unwrap();
            let t = Instant::now();
            assert!(client.get_result("default", Duration::from_millis(50)).unwrap().is_none());
            assert!(t.elapsed() < Duration::from_millis(100));
            assert!(server.get_task(Duration::from_millis(50)).unwrap().is_none());
            client.close();
        }
    }

    #[test]
    fn close_wakes_blocked_receivers() {
        for cfg in both_kinds() {
            let (client, server) = queue_pair(&cfg).unwrap();
            let waiter = {
                let client = client.clone();
                std::thread::spawn(move || {
                    let t = Instant::now();
                    let r = client.get_result("default", Duration::from_secs(10));
                    (r.is_err(), t.elapsed())
                })
            };
            std::thread::sleep(Duration::from_millis(30));
            client.close();
            let (errored, waited) = waiter.join().unwrap();
            assert!(errored);
            assert!(waited < Duration::from_millis(200));
            let t = Instant::now();
            assert!(matches!(
                server.get_task(Duration::from_secs(10)),
                Err(QueueError::Closed)
            ));
            assert!(t.elapsed() < Duration::from_millis(500));
            assert!(matches!(client.send_inputs(TaskRequest::new("f")), Err(QueueError::Closed)));
        }
    }

    #[test]
    fn fifo_and_exactly_once() {
        for cfg in both_kinds() {
            let (client, server) = queue_pair(&cfg).unwrap();
            let a = client.send_inputs(TaskRequest::new("a")).unwrap();
            let b = client.send_inputs(TaskRequest::new("b")).unwrap();
            let first = server.get_task(Duration::from_secs(5)).unwrap().unwrap();
            let second = server.get_task(Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!((first.task_id, second.task_id), (a, b));
            assert!(server.get_task(Duration::from_millis(20)).unwrap().is_none());
            client.close();
        }
    }

    #[test]
    fn topics_are_isolated() {
        for cfg in both_kinds() {
            let cfg = cfg.with_topics(["simulate", "train"]);
            let (client, server) = queue_pair(&cfg).unwrap();
            let sim = client.send_inputs(TaskRequest::new("s").topic("simulate")).unwrap();
            let train = client.send_inputs(TaskRequest::new("t").topic("train")).unwrap();
            for _ in 0..2 {
                let t = server.get_task(Duration::from_secs(5)).unwrap().unwrap();
                server.send_result(complete(t)).unwrap();
            }
            let got = client.get_result("train", Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!(got.task_id, train);
            assert!(client.get_result("train", Duration::from_millis(20)).unwrap().is_none());
            let got = client.get_result("simulate", Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!(got.task_id, sim);
            client.close();
        }
    }

    #[test]
    fn failed_records_carry_failure_text() {
        let (client, server) = queue_pair(&QueueConfig::in_process()).unwrap();
        client.send_inputs(TaskRequest::new("f")).unwrap();
        let mut t = server.get_task(Duration::from_secs(1)).unwrap().unwrap();
        t.set_failure(crate::record::FailureCategory::TaskError, "it raised");
        server.send_result(t).unwrap();
        let r = client.get_result("default", Duration::from_secs(1)).unwrap().unwrap();
        assert_eq!(r.success, TaskStatus::Failed);
        assert!(r.failure_info.unwrap().message.contains("it raised"));
    }

    #[test]
    fn pending_record_cannot_be_returned() {
        let (client, server) = queue_pair(&QueueConfig::in_process()).unwrap();
        client.send_inputs(TaskRequest::new("f")).unwrap();
        let t = server.get_task(Duration::from_secs(1)).unwrap().unwrap();
        assert!(server.send_result(t).is_err());
    }

    #[test]
    fn large_inputs_are_proxied_below_a_kilobyte() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(FileDirStore::open(dir.path()).unwrap());
        let policy = ThresholdPolicy::new(store, 1_000_000).unwrap();
        let (client, server) = queue_pair(&QueueConfig::in_process().with_policy(policy)).unwrap();
        let big = vec![7u8; 20_000_000];
        client.send_inputs(TaskRequest::new("f").arg(big)).unwrap();
        let t = server.get_task(Duration::from_secs(5)).unwrap().unwrap();
        let proxy = t.args[0].as_proxy().expect("argument was proxied");
        assert_eq!(proxy.size_bytes, 20_000_000);
        let encoded_arg = serde_json::to_vec(&t.args[0]).unwrap();
        assert!(encoded_arg.len() < 1024);
        assert!(encode_record(&t).unwrap().len() < 2048);
    }

    #[test]
    fn oversized_records_hit_the_frame_cap() {
        for cfg in both_kinds() {
            let (client, _server) = queue_pair(&cfg.with_frame_cap(1024)).unwrap();
            let r = client.send_inputs(TaskRequest::new("f").arg(vec![0u8; 4096]));
            assert!(matches!(r, Err(QueueError::PayloadTooLarge { .. })));
            client.close();
        }
    }

    #[test]
    fn tcp_buffers_requests_until_the_server_connects() {
        let cfg = QueueConfig::tcp("127.0.0.1:0");
        let client = TaskQueues::listen(&cfg).unwrap();
        let id = client.send_inputs(TaskRequest::new("early")).unwrap();
        let addr = client.local_addr().unwrap().to_string();
        let server = ServerQueues::connect(&cfg, &addr, Duration::from_secs(5)).unwrap();
        let t = server.get_task(Duration::from_secs(5)).unwrap().unwrap();
        assert_eq!(t.task_id, id);
        client.close();
    }

    #[test]
    fn tcp_handshake_rejects_topic_mismatch() {
        let cfg = QueueConfig::tcp("127.0.0.1:0");
        let client = TaskQueues::listen(&cfg).unwrap();
        let addr = client.local_addr().unwrap().to_string();
        let other = cfg.clone().with_topics(["extra"]);
        assert!(ServerQueues::connect(&other, &addr, Duration::from_secs(1)).is_err());
        client.close();
    }
}
