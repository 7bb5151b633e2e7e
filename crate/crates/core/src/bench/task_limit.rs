use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::sleep::{SleepParams, SLEEP_TASK};
use super::{
    bench_registry, Aggregates, BenchConfig, BenchError, BenchReport, Engine, EngineOptions,
    FailureRow, LatencyRow, TraceEvent, TraceKind, REPORT_VERSION,
};
use crate::datafabric::StoreHandle;
use crate::record::{
    compute_latencies, encode_record, ResultRecord, Stamp, TaskRequest, TaskStatus, TimestampEvent,
    Value, DEFAULT_TOPIC,
};
use crate::thinker::{AgentSpec, ResourceCounter, Thinker, ThinkerContext};

/// Stream reserved for the shared input payload; task streams are their
/// indices, so this never collides in practice.
const PAYLOAD_STREAM: u64 = u64::MAX;

struct LimitState {
    config: BenchConfig,
    payload: Arc<Vec<u8>>,
    store: Option<StoreHandle>,
    origin: Stamp,
    submitted: usize,
    completed: usize,
    in_flight: usize,
    first_submit_wall: Option<f64>,
    last_result_wall: Option<f64>,
    trace: Vec<TraceEvent>,
    /// Predecessors keyed by the id of the successor submitted for them,
    /// stripped of bulk data.
    awaiting: HashMap<String, (usize, ResultRecord)>,
    rows: Vec<(usize, LatencyRow)>,
    first_result: Option<ResultRecord>,
    failures: Vec<FailureRow>,
    aborted: Option<String>,
}

impl LimitState {
    fn submit(&mut self, ctx: &ThinkerContext<LimitState>) -> Result<String, BenchError> {
        let params = SleepParams {
            mean_s: self.config.mean_sleep_s,
            std_s: self.config.std_sleep_s,
            output_bytes: self.config.payload_bytes,
            seed: self.config.seed,
            index: self.submitted as u64,
        };
        let mut request =
            TaskRequest::new(SLEEP_TASK).arg(Value::Bytes(self.payload.as_ref().clone()));
        for (k, v) in params.to_kwargs() {
            request = request.kwarg(k, v);
        }
        let id = ctx.queues().send_inputs(request)?;
        self.submitted += 1;
        self.in_flight += 1;
        self.first_submit_wall.get_or_insert_with(|| Stamp::now().wall);
        Ok(id)
    }

    fn event(&mut self, kind: TraceKind, task_id: String, completed_id: Option<String>) {
        self.trace.push(TraceEvent {
            t: Stamp::now().wall - self.origin.wall,
            kind,
            task_id,
            completed_id,
            in_flight_after: self.in_flight,
        });
    }

    /// Drops proxied bulk data once a record has been handled.
    fn evict(&self, record: &ResultRecord) {
        let Some(store) = &self.store else { return };
        let proxies = record.args.iter().chain(record.value.iter()).filter_map(Value::as_proxy);
        for p in proxies {
            if let Err(e) = store.evict(&p.key) {
                tracing::warn!("could not evict {}: {e}", p.key);
            }
        }
    }

    fn on_result(&mut self, ctx: &ThinkerContext<LimitState>, record: ResultRecord) -> Result<(), BenchError> {
        self.completed += 1;
        self.in_flight -= 1;
        self.last_result_wall = record.timestamps.get(TimestampEvent::ResultReceived).map(|s| s.wall);

        if record.success != TaskStatus::Succeeded {
            let info = record.failure_info.clone();
            let (category, message) = info
                .map(|f| (f.category.to_string(), f.message))
                .unwrap_or_else(|| ("unknown".into(), "no failure info".into()));
            self.aborted = Some(format!("task {} failed ({category}): {message}", record.task_id));
            self.failures.push(FailureRow {
                task_id: record.task_id.clone(),
                category,
                message,
            });
            self.event(TraceKind::Complete, record.task_id.clone(), None);
            self.evict(&record);
            ctx.set_done();
            return Ok(());
        }

        let seq = self.completed;
        if self.submitted < self.config.total_tasks {
            let next = self.submit(ctx)?;
            self.event(TraceKind::Resubmit, next.clone(), Some(record.task_id.clone()));
            let mut slim = record.clone();
            slim.args.clear();
            slim.value = None;
            self.awaiting.insert(next, (seq, slim));
        } else {
            self.event(TraceKind::Complete, record.task_id.clone(), None);
        }

        if let Some((prev_seq, prev)) = self.awaiting.remove(&record.task_id) {
            let latency = compute_latencies(&prev, &record)?;
            let gap_s = record.timestamps.require(TimestampEvent::ComputeStarted)?.wall
                - prev.timestamps.require(TimestampEvent::ComputeEnded)?.wall;
            self.rows.push((
                prev_seq,
                LatencyRow {
                    prev_task_id: prev.task_id,
                    next_task_id: record.task_id.clone(),
                    latency,
                    gap_s,
                },
            ));
        }

        self.evict(&record);
        if self.first_result.is_none() {
            self.first_result = Some(record);
        }
        if self.completed == self.config.total_tasks {
            ctx.set_done();
        }
        Ok(())
    }
}

fn shared_payload(config: &BenchConfig) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(PAYLOAD_STREAM);
    let mut bytes = vec![0; config.payload_bytes as usize];
    rng.fill_bytes(&mut bytes);
    bytes
}

impl BenchConfig {
    /// The engine a run with this config needs. The drain timeout leaves
    /// room for a couple of slow tasks.
    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            queue: self.queue,
            proxy_threshold: self.proxy_threshold,
            executor: self.executor.clone(),
            slots: self.workers,
            drain_timeout: Duration::from_secs_f64(
                10.0 + 2.0 * self.mean_sleep_s + 10.0 * self.std_sleep_s,
            ),
        }
    }
}

/// Runs the task-limit benchmark on a fresh engine built from `config`.
pub fn run_task_limit(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let engine = Engine::start(&config.engine_options(), bench_registry())?;
    run_task_limit_on(config, engine)
}

/// Runs the benchmark on an engine the caller already started, e.g. to
/// learn the remote worker address first. The engine is shut down before
/// returning.
pub fn run_task_limit_on(config: &BenchConfig, engine: Engine) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let state = LimitState {
        config: config.clone(),
        payload: Arc::new(shared_payload(config)),
        store: engine.store().cloned(),
        origin: Stamp::now(),
        submitted: 0,
        completed: 0,
        in_flight: 0,
        first_submit_wall: None,
        last_result_wall: None,
        trace: Vec::with_capacity(config.total_tasks * 2),
        awaiting: HashMap::new(),
        rows: Vec::new(),
        first_result: None,
        failures: Vec::new(),
        aborted: None,
    };

    let mut thinker = Thinker::new(
        engine.queues().clone(),
        Arc::new(ResourceCounter::new(std::iter::empty::<(String, u64)>())),
        state,
    );
    thinker.register_agent(AgentSpec::startup("launch", |ctx: &ThinkerContext<LimitState>| {
        let mut st = ctx.state();
        st.origin = Stamp::now();
        for _ in 0..st.config.workers {
            let id = st.submit(ctx)?;
            st.event(TraceKind::Submit, id, None);
        }
        Ok(())
    }))?;
    thinker.register_agent(AgentSpec::result_processor(
        "replace",
        DEFAULT_TOPIC,
        |ctx: &ThinkerContext<LimitState>, record| Ok(ctx.state().on_result(ctx, record)?),
    ))?;
    let outcome = thinker.run();
    let redispatches = engine.remote_stats().map_or(0, |s| s.redispatches);
    engine.shutdown()?;
    outcome?;

    let st = thinker
        .into_state()
        .map_err(|_| BenchError::Config("thinker state still shared".into()))?;
    let mut rows = st.rows;
    rows.sort_by_key(|(seq, _)| *seq);
    let latencies: Vec<LatencyRow> = rows.into_iter().map(|(_, r)| r).collect();
    let elapsed_s = match (st.first_submit_wall, st.last_result_wall) {
        (Some(a), Some(b)) if b > a => b - a,
        _ => 0.0,
    };
    let sample_result_bytes = match &st.first_result {
        Some(r) => Some(encode_record(r)?.len() as u64),
        None => None,
    };
    Ok(BenchReport {
        v: REPORT_VERSION,
        config: st.config,
        aggregates: Aggregates::of(&latencies),
        latencies,
        task_rate: if elapsed_s > 0.0 { st.completed as f64 / elapsed_s } else { 0.0 },
        elapsed_s,
        submitted: st.submitted,
        completed: st.completed,
        in_flight: st.trace,
        sample_result_bytes,
        redispatches,
        failures: st.failures,
        aborted: st.aborted,
    })
}

/// Offline check of a trace: the recorded in-flight counts must agree with
/// the event kinds, and every event from the `workers`-th submission up to
/// the `(total - workers)`-th completion must show exactly `workers`.
pub fn check_constant_in_flight(
    trace: &[TraceEvent],
    workers: usize,
    total: usize,
) -> Result<(), String> {
    let mut in_flight = 0usize;
    let mut submits = 0;
    let mut completions = 0;
    let mut steady = false;
    let mut checked = 0;
    for (i, e) in trace.iter().enumerate() {
        match e.kind {
            TraceKind::Submit => {
                in_flight += 1;
                submits += 1;
            }
            TraceKind::Resubmit => {
                submits += 1;
                completions += 1;
            }
            TraceKind::Complete => {
                in_flight = in_flight
                    .checked_sub(1)
                    .ok_or_else(|| format!("event {i}: completion with nothing in flight"))?;
                completions += 1;
            }
        }
        if e.in_flight_after != in_flight {
            return Err(format!(
                "event {i}: recorded in-flight {} but kinds imply {in_flight}",
                e.in_flight_after
            ));
        }
        if submits == workers && !steady && completions == 0 {
            steady = true;
        }
        if steady {
            if in_flight != workers {
                return Err(format!("event {i}: {in_flight} in flight during steady state"));
            }
            checked += 1;
        }
        if completions >= total - workers {
            steady = false;
        }
    }
    if submits != total {
        return Err(format!("{submits} submissions, expected {total}"));
    }
    if checked == 0 {
        return Err("no steady-state events".into());
    }
    Ok(())
}
