//! Function-as-a-Service engine.
//!
//! Lambdas are registered callables with a descriptor. Each gets its own
//! worker pool that grows with queue depth up to `max_instances` and shrinks
//! back to `min_instances` after `idle_ttl` without work. Every invocation is
//! appended to a log used for benchmarking.

mod bench;
mod consumer;
mod pool;
mod system;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::broker::{Broker, BrokerError, TopicFilter, TopicName};
use crate::clock::{SharedClock, SystemClock};

pub use bench::{nearest_rank, BenchmarkRecord, Window};
pub use consumer::{FaasConsumer, ReplyStatus, TriggerReply, DEAD_FAAS_TOPIC, TRIGGER_PREFIX};
pub use pool::{QueueDepthPolicy, ScalePolicy};
pub use system::{
    answering_logic, http_rest, AnswerEvent, HttpRestBinding, HttpRestEvent, HttpResponseRecord, ResponseSink,
    SessionChannels, ANSWERING_LOGIC, HTTP_REST,
};

use pool::{Job, Pool};

pub const DEFAULT_INVOCATION_TIMEOUT: Duration = Duration::from_secs(5);

/// Upper bound on what queueing and thread hand-off add to a measured
/// latency on an unloaded machine. A lambda doing `d` of work reports
/// latencies in `[d, d + SCHEDULER_SLACK]`.
pub const SCHEDULER_SLACK: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum FaasError {
    #[error("{name} {version} is already registered")]
    DuplicateRegistration { name: String, version: String },
    #[error("unknown lambda {name} {version}")]
    UnknownLambda { name: String, version: String },
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("no invocations of {0} in the window")]
    EmptyWindow(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

/// Failure reported by a lambda body.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct LambdaFailure(pub String);

pub type LambdaBody = Arc<dyn Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaDescriptor {
    pub name: String,
    pub version: String,
    pub trigger_pattern: String,
    pub min_instances: usize,
    pub max_instances: usize,
    pub invocation_timeout: Duration,
    pub idle_ttl: Duration,
}

impl LambdaDescriptor {
    /// Triggered by `faas/trigger/<name>`; 0..=4 instances, 5 s timeout,
    /// 30 s idle ttl.
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            trigger_pattern: format!("{TRIGGER_PREFIX}{name}"),
            name,
            version: version.into(),
            min_instances: 0,
            max_instances: 4,
            invocation_timeout: DEFAULT_INVOCATION_TIMEOUT,
            idle_ttl: Duration::from_secs(30),
        }
    }

    pub fn trigger(mut self, pattern: impl Into<String>) -> Self {
        self.trigger_pattern = pattern.into();
        self
    }

    pub fn instances(mut self, min: usize, max: usize) -> Self {
        self.min_instances = min;
        self.max_instances = max;
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.invocation_timeout = timeout;
        self
    }

    pub fn idle_ttl(mut self, ttl: Duration) -> Self {
        self.idle_ttl = ttl;
        self
    }

    fn validate(&self) -> Result<TopicFilter, FaasError> {
        if self.name.is_empty() || self.version.is_empty() {
            return Err(FaasError::InvalidDescriptor("empty name or version".into()));
        }
        if self.max_instances == 0 || self.min_instances > self.max_instances {
            return Err(FaasError::InvalidDescriptor(format!(
                "instances {}..={} invalid",
                self.min_instances, self.max_instances
            )));
        }
        if self.invocation_timeout.is_zero() {
            return Err(FaasError::InvalidDescriptor("zero invocation timeout".into()));
        }
        TopicFilter::parse(&self.trigger_pattern)
            .map_err(|e| FaasError::InvalidDescriptor(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub topic: String,
    pub payload: Value,
}

impl Event {
    pub fn new(topic: impl Into<String>, payload: Value) -> Self {
        Self {
            topic: topic.into(),
            payload,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub invocation_id: String,
    pub lambda: String,
    pub version: String,
    pub event_topic: String,
    pub start_ts: Duration,
    pub end_ts: Duration,
    pub latency: Duration,
    pub outcome: Outcome,
    pub result: Option<Value>,
    pub error: Option<String>,
}

/// A queued invocation. Dropping it does not cancel anything.
#[derive(Debug)]
pub struct InvocationHandle {
    pub invocation_id: String,
    rx: mpsc::Receiver<Invocation>,
    limit: Duration,
}

impl InvocationHandle {
    /// Blocks until the invocation reaches a terminal outcome.
    pub fn wait(self) -> Option<Invocation> {
        self.rx.recv_timeout(self.limit).ok()
    }

    pub fn wait_timeout(self, timeout: Duration) -> Option<Invocation> {
        self.rx.recv_timeout(timeout).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub name: String,
    pub version: String,
    pub workers: usize,
    pub busy: usize,
    pub queued: usize,
    pub peak_workers: usize,
    pub peak_busy: usize,
    pub recycled: u64,
}

pub(crate) struct Shared {
    clock: SharedClock,
    scale: Box<dyn ScalePolicy>,
    log: RwLock<Vec<Invocation>>,
}

impl Shared {
    fn record(&self, invocation: Invocation) {
        self.log.write().push(invocation);
    }
}

struct Registered {
    filter: TopicFilter,
    pool: Arc<Pool>,
}

/// Cheap to clone; clones share the registry, pools and log.
#[derive(Clone)]
pub struct FaasEngine {
    shared: Arc<Shared>,
    lambdas: Arc<RwLock<Vec<Registered>>>,
    next_invocation: Arc<AtomicU64>,
    dead_letters: Arc<RwLock<Option<Broker>>>,
}

impl fmt::Debug for FaasEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .lambdas
            .read()
            .iter()
            .map(|r| format!("{}@{}", r.pool.descriptor.name, r.pool.descriptor.version))
            .collect();
        f.debug_struct("FaasEngine").field("lambdas", &names).finish_non_exhaustive()
    }
}

impl Default for FaasEngine {
    fn default() -> Self {
        Self::new(SystemClock::shared())
    }
}

impl FaasEngine {
    pub fn new(clock: SharedClock) -> Self {
        Self::with_policy(clock, Box::new(QueueDepthPolicy))
    }

    pub fn with_policy(clock: SharedClock, scale: Box<dyn ScalePolicy>) -> Self {
        Self {
            shared: Arc::new(Shared {
                clock,
                scale,
                log: RwLock::new(Vec::new()),
            }),
            lambdas: Arc::new(RwLock::new(Vec::new())),
            next_invocation: Arc::new(AtomicU64::new(0)),
            dead_letters: Arc::new(RwLock::new(None)),
        }
    }

    /// Unmatched events get published to `$dead/faas` on this broker.
    pub fn set_dead_letter_broker(&self, broker: Broker) {
        *self.dead_letters.write() = Some(broker);
    }

    pub fn register<F>(&self, descriptor: LambdaDescriptor, body: F) -> Result<(), FaasError>
    where
        F: Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static,
    {
        self.register_body(descriptor, Arc::new(body))
    }

    pub fn register_body(&self, descriptor: LambdaDescriptor, body: LambdaBody) -> Result<(), FaasError> {
        let filter = descriptor.validate()?;
        let mut lambdas = self.lambdas.write();
        if lambdas
            .iter()
            .any(|r| r.pool.descriptor.name == descriptor.name && r.pool.descriptor.version == descriptor.version)
        {
            return Err(FaasError::DuplicateRegistration {
                name: descriptor.name,
                version: descriptor.version,
            });
        }
        let pool = Pool::new(descriptor, body);
        pool.start(&self.shared);
        lambdas.push(Registered { filter, pool });
        Ok(())
    }

    /// The most recently registered lambda whose trigger pattern matches.
    fn matching(&self, topic: &str) -> Option<Arc<Pool>> {
        let topic = TopicName::parse(topic).ok()?;
        self.lambdas
            .read()
            .iter()
            .rev()
            .find(|r| r.filter.matches(&topic))
            .map(|r| Arc::clone(&r.pool))
    }

    /// Enqueues the event on the matching lambda; `None` means no match.
    pub fn trigger(&self, event: Event) -> Option<InvocationHandle> {
        let (tx, rx) = mpsc::channel();
        let pool = self.matching(&event.topic);
        let limit = pool.as_ref().map(|p| p.wait_timeout()).unwrap_or_default();
        let id = self.trigger_with(event, Box::new(move |inv: &Invocation| {
            let _ = tx.send(inv.clone());
        }))?;
        Some(InvocationHandle {
            invocation_id: id,
            rx,
            limit,
        })
    }

    /// Like [`trigger`](Self::trigger) with a completion callback run on the
    /// worker thread.
    pub(crate) fn trigger_with(&self, event: Event, done: pool::Completion) -> Option<String> {
        let Some(pool) = self.matching(&event.topic) else {
            self.dead_letter(&event);
            return None;
        };
        let id = format!("inv-{:08}", self.next_invocation.fetch_add(1, Ordering::Relaxed) + 1);
        let job = Job {
            id: id.clone(),
            event,
            done,
        };
        match pool.enqueue(job, &self.shared) {
            Ok(()) => Some(id),
            // Terminated between lookup and enqueue: treat as unmatched.
            Err(job) => {
                self.dead_letter(&job.event);
                None
            }
        }
    }

    fn dead_letter(&self, event: &Event) {
        tracing::debug!(topic = %event.topic, "no lambda matches");
        if let Some(broker) = self.dead_letters.read().as_ref() {
            let payload = serde_json::to_vec(event).expect("event serializes");
            if let Err(e) = broker.publish(DEAD_FAAS_TOPIC, payload) {
                tracing::warn!(error = %e, "could not dead-letter unmatched event");
            }
        }
    }

    /// Stops a lambda. Queued invocations end with outcome error, in-flight
    /// ones run to completion (or time out) before this returns.
    pub fn terminate(&self, name: &str, version: &str) -> Result<(), FaasError> {
        let pool = {
            let mut lambdas = self.lambdas.write();
            let idx = lambdas
                .iter()
                .position(|r| r.pool.descriptor.name == name && r.pool.descriptor.version == version)
                .ok_or_else(|| FaasError::UnknownLambda {
                    name: name.to_string(),
                    version: version.to_string(),
                })?;
            lambdas.remove(idx).pool
        };
        for job in pool.shutdown() {
            let now = self.shared.clock.now();
            let invocation = Invocation {
                invocation_id: job.id,
                lambda: name.to_string(),
                version: version.to_string(),
                event_topic: job.event.topic,
                start_ts: now,
                end_ts: now,
                latency: Duration::ZERO,
                outcome: Outcome::Error,
                result: None,
                error: Some("lambda terminated before start".into()),
            };
            self.shared.record(invocation.clone());
            (job.done)(&invocation);
        }
        Ok(())
    }

    pub fn stats(&self, name: &str, version: &str) -> Result<LambdaStats, FaasError> {
        let lambdas = self.lambdas.read();
        let r = lambdas
            .iter()
            .find(|r| r.pool.descriptor.name == name && r.pool.descriptor.version == version)
            .ok_or_else(|| FaasError::UnknownLambda {
                name: name.to_string(),
                version: version.to_string(),
            })?;
        let s = r.pool.state.lock();
        Ok(LambdaStats {
            name: name.to_string(),
            version: version.to_string(),
            workers: s.workers,
            busy: s.busy,
            queued: s.queue.len(),
            peak_workers: s.peak_workers,
            peak_busy: s.peak_busy,
            recycled: s.recycled,
        })
    }

    pub fn descriptors(&self) -> Vec<LambdaDescriptor> {
        self.lambdas.read().iter().map(|r| r.pool.descriptor.clone()).collect()
    }

    /// Snapshot of the append-only invocation log.
    pub fn invocations(&self) -> Vec<Invocation> {
        self.shared.log.read().clone()
    }

    pub fn benchmark(&self, lambda: &str, window: Window) -> Result<BenchmarkRecord, FaasError> {
        bench::compute(lambda, window, &self.shared.log.read())
    }

    /// One record per lambda over its whole history.
    pub fn benchmark_all(&self) -> Vec<BenchmarkRecord> {
        let log = self.shared.log.read();
        let mut names: Vec<&str> = log.iter().map(|i| i.lambda.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
            .into_iter()
            .filter_map(|name| {
                let mine = log.iter().filter(|i| i.lambda == name);
                let start = mine.clone().map(|i| i.start_ts).min()?;
                let end = mine.map(|i| i.end_ts).max()? + Duration::from_nanos(1);
                bench::compute(name, Window::new(start, end), &log).ok()
            })
            .collect()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.shared.clock
    }
}
