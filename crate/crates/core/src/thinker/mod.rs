//! Steering runtime. A [`Thinker`] owns a set of agents and runs each on
//! its own thread over a shared [`ThinkerContext`]:
//!
//! * startup and long-running agents call their body once;
//! * result processors take completed records from one topic;
//! * event processors run whenever a named event is set;
//! * task submitters run whenever they can take slots from a pool.
//!
//! Any agent error or panic sets the done flag and is reported by
//! [`Thinker::run`] once every agent has exited. When all agents that are
//! not startup agents have exited, done is set automatically.

mod resources;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};
use thiserror::Error;

use crate::queues::{QueueError, TaskQueues};
use crate::record::ResultRecord;

pub use resources::{PoolLevel, ResourceCounter, ResourceError};

/// Longest time any runtime wait blocks before re-checking the done flag.
pub const POLL_SLICE: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ThinkerError {
    #[error("agent name {0:?} is already registered")]
    DuplicateAgent(String),
    #[error("the thinker has already been run")]
    AlreadyRan,
    #[error("no agents registered")]
    NoAgents,
    #[error("invalid agent {name:?}: {reason}")]
    InvalidAgent { name: String, reason: String },
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("agent {agent:?} failed: {message}")]
    AgentFailed { agent: String, message: String },
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

type PlainBody<S> = Box<dyn Fn(&ThinkerContext<S>) -> anyhow::Result<()> + Send + Sync>;
type ResultBody<S> =
    Box<dyn Fn(&ThinkerContext<S>, ResultRecord) -> anyhow::Result<()> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentKind {
    /// Long-running agent flagged as startup: it does not keep the thinker
    /// alive.
    Startup,
    LongRunning,
    ResultProcessor { topic: String },
    EventProcessor { event: String },
    TaskSubmitter { pool: String, slots: u64 },
}

enum Body<S> {
    Plain(PlainBody<S>),
    Result(ResultBody<S>),
}

pub struct AgentSpec<S> {
    pub name: String,
    pub kind: AgentKind,
    body: Body<S>,
    exclusive: bool,
}

impl<S> std::fmt::Debug for AgentSpec<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentSpec")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("exclusive", &self.exclusive)
            .finish()
    }
}

impl<S> AgentSpec<S> {
    fn plain(
        name: impl Into<String>,
        kind: AgentKind,
        body: impl Fn(&ThinkerContext<S>) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        let exclusive = kind != AgentKind::LongRunning;
        AgentSpec {
            name: name.into(),
            kind,
            body: Body::Plain(Box::new(body)),
            exclusive,
        }
    }

    pub fn startup(
        name: impl Into<String>,
        body: impl Fn(&ThinkerContext<S>) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        Self::plain(name, AgentKind::Startup, body)
    }

    /// Runs `body` once; the body is expected to loop until
    /// [`ThinkerContext::is_done`].
    pub fn long_running(
        name: impl Into<String>,
        body: impl Fn(&ThinkerContext<S>) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        Self::plain(name, AgentKind::LongRunning, body)
    }

    pub fn result_processor(
        name: impl Into<String>,
        topic: impl Into<String>,
        body: impl Fn(&ThinkerContext<S>, ResultRecord) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        AgentSpec {
            name: name.into(),
            kind: AgentKind::ResultProcessor {
                topic: topic.into(),
            },
            body: Body::Result(Box::new(body)),
            exclusive: true,
        }
    }

    pub fn event_processor(
        name: impl Into<String>,
        event: impl Into<String>,
        body: impl Fn(&ThinkerContext<S>) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        Self::plain(
            name,
            AgentKind::EventProcessor {
                event: event.into(),
            },
            body,
        )
    }

    /// Runs `body` each time `slots` slots are taken from `pool`. The body
    /// owns those slots; returning them is up to the policy.
    pub fn task_submitter(
        name: impl Into<String>,
        pool: impl Into<String>,
        slots: u64,
        body: impl Fn(&ThinkerContext<S>) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        Self::plain(
            name,
            AgentKind::TaskSubmitter {
                pool: pool.into(),
                slots,
            },
            body,
        )
    }

    /// Lets this agent's body run at the same time as other agents'.
    /// Bodies are otherwise serialized by the runtime.
    pub fn concurrent(mut self) -> Self {
        self.exclusive = false;
        self
    }

    fn validate(&self) -> Result<(), ThinkerError> {
        let bad = |reason: &str| ThinkerError::InvalidAgent {
            name: self.name.clone(),
            reason: reason.to_owned(),
        };
        if self.name.is_empty() {
            return Err(bad("empty name"));
        }
        match &self.kind {
            AgentKind::ResultProcessor { topic } if topic.is_empty() => Err(bad("empty topic")),
            AgentKind::EventProcessor { event } if event.is_empty() => Err(bad("empty event")),
            AgentKind::TaskSubmitter { pool, slots } if pool.is_empty() || *slots == 0 => {
                Err(bad("task submitter needs a pool and at least one slot"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Default)]
struct EventState {
    generation: u64,
    set: bool,
}

#[derive(Default)]
struct Signals {
    done: bool,
    events: HashMap<String, EventState>,
}

/// Everything agents share: the queue handle, resource counter, events,
/// the done flag and user state.
pub struct ThinkerContext<S> {
    queues: TaskQueues,
    resources: Arc<ResourceCounter>,
    signals: Mutex<Signals>,
    wake: Condvar,
    done: AtomicBool,
    state: Mutex<S>,
    agent_lock: Mutex<()>,
}

impl<S> ThinkerContext<S> {
    pub fn queues(&self) -> &TaskQueues {
        &self.queues
    }

    pub fn resources(&self) -> &ResourceCounter {
        &self.resources
    }

    /// Locks the user state.
    pub fn state(&self) -> MutexGuard<'_, S> {
        self.state.lock()
    }

    pub fn is_done(&self) -> bool {
        self.done.load(Ordering::SeqCst)
    }

    /// Sets the done flag. It is never cleared; every runtime wait returns
    /// within one poll slice.
    pub fn set_done(&self) {
        if self.done.swap(true, Ordering::SeqCst) {
            return;
        }
        self.signals.lock().done = true;
        self.wake.notify_all();
        self.resources.interrupt();
    }

    /// Blocks until done is set or `timeout` passes; returns the flag.
    pub fn wait_done(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut s = self.signals.lock();
        while !s.done {
            if self.wake.wait_until(&mut s, deadline).timed_out() {
                break;
            }
        }
        s.done
    }

    /// Wakes every event processor bound to `name`. A set that arrives
    /// while such a processor is running causes exactly one more run.
    pub fn set_event(&self, name: &str) -> Result<(), ThinkerError> {
        let mut s = self.signals.lock();
        let ev = s
            .events
            .get_mut(name)
            .ok_or_else(|| ThinkerError::UnknownEvent(name.to_owned()))?;
        ev.generation += 1;
        ev.set = true;
        drop(s);
        self.wake.notify_all();
        Ok(())
    }

    pub fn is_event_set(&self, name: &str) -> Result<bool, ThinkerError> {
        self.signals
            .lock()
            .events
            .get(name)
            .map(|e| e.set)
            .ok_or_else(|| ThinkerError::UnknownEvent(name.to_owned()))
    }

    /// Waits for a generation newer than `seen`; None once done is set.
    fn wait_event(&self, name: &str, seen: u64) -> Option<u64> {
        let mut s = self.signals.lock();
        loop {
            if s.done {
                return None;
            }
            let generation = s.events.get(name).map_or(0, |e| e.generation);
            if generation > seen {
                return Some(generation);
            }
            self.wake.wait(&mut s);
        }
    }

    fn reset_event(&self, name: &str, handled: u64) {
        if let Some(ev) = self.signals.lock().events.get_mut(name) {
            if ev.generation == handled {
                ev.set = false;
            }
        }
    }
}

/// A steering process: agents plus the context they share.
pub struct Thinker<S> {
    ctx: Arc<ThinkerContext<S>>,
    agents: Vec<AgentSpec<S>>,
    ran: bool,
}

impl<S: Send + 'static> Thinker<S> {
    pub fn new(queues: TaskQueues, resources: Arc<ResourceCounter>, state: S) -> Self {
        Thinker {
            ctx: Arc::new(ThinkerContext {
                queues,
                resources,
                signals: Mutex::new(Signals::default()),
                wake: Condvar::new(),
                done: AtomicBool::new(false),
                state: Mutex::new(state),
                agent_lock: Mutex::new(()),
            }),
            agents: Vec::new(),
            ran: false,
        }
    }

    pub fn context(&self) -> &Arc<ThinkerContext<S>> {
        &self.ctx
    }

    /// Declares an event that no processor is bound to, so that
    /// [`ThinkerContext::set_event`] accepts it.
    pub fn declare_event(&mut self, name: impl Into<String>) {
        self.ctx
            .signals
            .lock()
            .events
            .entry(name.into())
            .or_default();
    }

    pub fn register_agent(&mut self, spec: AgentSpec<S>) -> Result<(), ThinkerError> {
        if self.ran {
            return Err(ThinkerError::AlreadyRan);
        }
        spec.validate()?;
        if self.agents.iter().any(|a| a.name == spec.name) {
            return Err(ThinkerError::DuplicateAgent(spec.name));
        }
        match &spec.kind {
            AgentKind::ResultProcessor { topic } if !self.ctx.queues.topics().contains(topic) => {
                return Err(QueueError::UnknownTopic(topic.clone()).into());
            }
            AgentKind::TaskSubmitter { pool, .. } => {
                self.ctx.resources.level(pool)?;
            }
            AgentKind::EventProcessor { event } => self.declare_event(event.clone()),
            _ => {}
        }
        self.agents.push(spec);
        Ok(())
    }

    pub fn agent_names(&self) -> BTreeSet<&str> {
        self.agents.iter().map(|a| a.name.as_str()).collect()
    }

    /// Runs every agent until done is set and all have exited. Returns the
    /// first agent failure, if any.
    pub fn run(&mut self) -> Result<(), ThinkerError> {
        if self.ran {
            return Err(ThinkerError::AlreadyRan);
        }
        if self.agents.is_empty() {
            return Err(ThinkerError::NoAgents);
        }
        self.ran = true;
        let agents = std::mem::take(&mut self.agents);
        let keepers = agents.iter().filter(|a| a.kind != AgentKind::Startup).count();
        let remaining = AtomicUsize::new(if keepers == 0 { agents.len() } else { keepers });
        let failure: Mutex<Option<ThinkerError>> = Mutex::new(None);
        let ctx = &*self.ctx;

        thread::scope(|scope| {
            for agent in &agents {
                let remaining = &remaining;
                let failure = &failure;
                let counts = keepers == 0 || agent.kind != AgentKind::Startup;
                thread::Builder::new()
                    .name(format!("agent-{}", agent.name))
                    .spawn_scoped(scope, move || {
                        let outcome = catch_unwind(AssertUnwindSafe(|| run_agent(ctx, agent)));
                        let message = match outcome {
                            Ok(Ok(())) => None,
                            Ok(Err(e)) => Some(format!("{e:#}")),
                            Err(panic) => Some(panic_message(panic.as_ref())),
                        };
                        if let Some(message) = message {
                            tracing::error!(agent = %agent.name, "agent failed: {message}");
                            failure.lock().get_or_insert(ThinkerError::AgentFailed {
                                agent: agent.name.clone(),
                                message,
                            });
                            ctx.set_done();
                        }
                        if counts && remaining.fetch_sub(1, Ordering::SeqCst) == 1 {
                            ctx.set_done();
                        }
                    })
                    .expect("spawn agent thread");
            }
        });

        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl<S> Thinker<S> {
    /// Consumes the thinker and returns the user state. Fails if a clone of
    /// the context is still alive elsewhere.
    pub fn into_state(self) -> Result<S, Self> {
        match Arc::try_unwrap(self.ctx) {
            Ok(ctx) => Ok(ctx.state.into_inner()),
            Err(ctx) => Err(Thinker {
                ctx,
                agents: self.agents,
                ran: self.ran,
            }),
        }
    }
}

pub(crate) fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_owned()
    }
}

fn guarded<S, T>(ctx: &ThinkerContext<S>, agent: &AgentSpec<S>, f: impl FnOnce() -> T) -> T {
    let _guard = agent.exclusive.then(|| ctx.agent_lock.lock());
    f()
}

fn run_agent<S>(ctx: &ThinkerContext<S>, agent: &AgentSpec<S>) -> anyhow::Result<()> {
    match (&agent.kind, &agent.body) {
        (AgentKind::Startup | AgentKind::LongRunning, Body::Plain(body)) => {
            guarded(ctx, agent, || body(ctx))
        }
        (AgentKind::ResultProcessor { topic }, Body::Result(body)) => {
            while !ctx.is_done() {
                match ctx.queues.get_result(topic, POLL_SLICE) {
                    Ok(Some(record)) => guarded(ctx, agent, || body(ctx, record))?,
                    Ok(None) => {}
                    Err(QueueError::Closed) => break,
                    Err(e) => return Err(e.into()),
                }
            }
            Ok(())
        }
        (AgentKind::EventProcessor { event }, Body::Plain(body)) => {
            let mut seen = 0;
            while let Some(generation) = ctx.wait_event(event, seen) {
                seen = generation;
                guarded(ctx, agent, || body(ctx))?;
                ctx.reset_event(event, generation);
            }
            Ok(())
        }
        (AgentKind::TaskSubmitter { pool, slots }, Body::Plain(body)) => {
            while !ctx.is_done() {
                if !ctx.resources.allocate(pool, *slots, Some(POLL_SLICE))? {
                    continue;
                }
                if ctx.is_done() {
                    ctx.resources.release(pool, *slots)?;
                    break;
                }
                guarded(ctx, agent, || body(ctx))?;
            }
            Ok(())
        }
        _ => unreachable!("constructors pair kinds with bodies"),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::AtomicU32;

    use super::*;
    use crate::queues::{queue_pair, QueueConfig};

    fn thinker<S: Send + 'static>(state: S) -> Thinker<S> {
        let (client, _server) = queue_pair(&QueueConfig::in_process()).unwrap();
        Thinker::new(client, Arc::new(ResourceCounter::new([("default", 4)])), state)
    }

    #[test]
    fn registration_rules() {
        let mut t = thinker(());
        t.register_agent(AgentSpec::startup("startup", |_| Ok(()))).unwrap();
        t.register_agent(AgentSpec::result_processor("step", "default", |_, _| Ok(())))
            .unwrap();
        assert!(matches!(
            t.register_agent(AgentSpec::startup("step", |_| Ok(()))),
            Err(ThinkerError::DuplicateAgent(_))
        ));
        assert!(t
            .register_agent(AgentSpec::result_processor("x", "nope", |_, _| Ok(())))
            .is_err());
        assert!(t
            .register_agent(AgentSpec::task_submitter("y", "gpu", 1, |_| Ok(())))
            .is_err());
        t.context().set_done();
        t.run().unwrap();
        assert!(matches!(
            t.register_agent(AgentSpec::long_running("late", |_| Ok(()))),
            Err(ThinkerError::AlreadyRan)
        ));
    }

    #[test]
    fn empty_thinker_refuses_to_run() {
        assert!(matches!(thinker(()).run(), Err(ThinkerError::NoAgents)));
    }

    #[test]
    fn returning_long_running_agent_sets_done() {
        let mut t = thinker(());
        t.register_agent(AgentSpec::long_running("only", |_| Ok(()))).unwrap();
        let start = Instant::now();
        t.run().unwrap();
        assert!(t.context().is_done());
        assert!(start.elapsed() < Duration::from_millis(500));
    }

    #[test]
    fn failing_agent_is_named() {
        let mut t = thinker(());
        t.register_agent(AgentSpec::long_running("boom", |_| anyhow::bail!("broken policy")))
            .unwrap();
        t.register_agent(AgentSpec::result_processor("idle", "default", |_, _| Ok(())))
            .unwrap();
        match t.run() {
            Err(ThinkerError::AgentFailed { agent, message }) => {
                assert_eq!(agent, "boom");
                assert!(message.contains("broken policy"));
            }
            other => panic!("expected agent failure, got {other:?}"),
        }
    }

    #[test]
    fn panicking_agent_is_reported() {
        let mut t = thinker(());
        t.register_agent(AgentSpec::long_running("p", |_| panic!("oops"))).unwrap();
        assert!(matches!(t.run(), Err(ThinkerError::AgentFailed { .. })));
    }

    #[test]
    fn set_done_stops_blocked_agents_quickly() {
        let mut t = thinker(());
        t.register_agent(AgentSpec::result_processor("r", "default", |_, _| Ok(())))
            .unwrap();
        t.register_agent(AgentSpec::event_processor("e", "retrain", |_| Ok(())))
            .unwrap();
        t.register_agent(AgentSpec::task_submitter("s", "default", 5, |_| Ok(())))
            .unwrap();
        t.register_agent(AgentSpec::long_running("stopper", |ctx| {
            thread::sleep(Duration::from_millis(50));
            ctx.set_done();
            Ok(())
        }))
        .unwrap();
        let start = Instant::now();
        t.run().unwrap();
        assert!(start.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn events_run_once_per_set_and_coalesce() {
        let mut t = thinker(AtomicU32::new(0));
        t.register_agent(AgentSpec::event_processor("retrain", "retrain", |ctx: &ThinkerContext<AtomicU32>| {
            ctx.state().fetch_add(1, Ordering::SeqCst);
            Ok(())
        }))
        .unwrap();
        t.register_agent(AgentSpec::long_running("driver", |ctx: &ThinkerContext<AtomicU32>| {
            ctx.set_event("retrain")?;
            let deadline = Instant::now() + Duration::from_secs(2);
            while ctx.state().load(Ordering::SeqCst) < 1 && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(5));
            }
            thread::sleep(Duration::from_millis(20));
            assert!(!ctx.is_event_set("retrain")?);
            ctx.set_event("retrain")?;
            ctx.set_event("retrain")?;
            thread::sleep(Duration::from_millis(100));
            assert!(ctx.set_event("unknown").is_err());
            ctx.set_done();
            Ok(())
        }))
        .unwrap();
        t.run().unwrap();
        let runs = t.into_state().ok().unwrap().into_inner();
        assert!((2..=3).contains(&runs), "ran {runs} times");
    }

    #[test]
    fn task_submitter_runs_while_slots_last() {
        let mut t = thinker(0u32);
        t.register_agent(AgentSpec::task_submitter("sub", "default", 2, |ctx| {
            *ctx.state() += 1;
            Ok(())
        }))
        .unwrap();
        t.register_agent(AgentSpec::long_running("stop", |ctx| {
            thread::sleep(Duration::from_millis(150));
            ctx.set_done();
            Ok(())
        }))
        .unwrap();
        t.run().unwrap();
        assert_eq!(*t.context().state(), 2);
        assert_eq!(t.context().resources().available("default").unwrap(), 0);
    }

    #[test]
    fn exclusive_bodies_do_not_overlap() {
        let mut t = thinker((0u32, 0u32));
        for name in ["a", "b", "c"] {
            t.register_agent(AgentSpec::startup(name, |ctx: &ThinkerContext<(u32, u32)>| {
                for _ in 0..20 {
                    {
                        let mut s = ctx.state();
                        s.0 += 1;
                        s.1 = s.1.max(s.0);
                    }
                    thread::sleep(Duration::from_millis(1));
                    ctx.state().0 -= 1;
                }
                Ok(())
            }))
            .unwrap();
        }
        t.run().unwrap();
        assert_eq!(t.context().state().1, 1);
    }
}
