use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::auth::AuthEngine;
use super::context::ContextManager;
use super::imdg::{Imdg, ImdgError};
use super::interpreter::{interpret, InterpretError, TurnScope};
use super::lambdas::JOURNAL_TOPIC;
use super::ops::{MicroOp, MicroOpError, RESULT_PLACEHOLDER};
use super::reasoning::{Decision, ReasoningEngine, ReasoningError, TurnContext};
use super::session::{SessionError, SessionManager};
use crate::blockstore::{Journal, JournalRecord};
use crate::broker::{Broker, BrokerError, SubscribeOptions, Subscription, SubscriptionId};
use crate::faas::{AnswerEvent, HttpRestEvent, ReplyStatus, TriggerReply, HTTP_REST, TRIGGER_PREFIX};
use crate::mdie::MetaDatagram;
use crate::nlu::{ContextFrame, DeadlineResolver, Intent, IntentResult, Router};

pub const CORE_GROUP: &str = "core";
pub const INGEST_FILTER: &str = "ingest/#";
pub const JOURNAL_GROUP: &str = "journal";
pub const DEFAULT_DEDUP_WINDOW: Duration = Duration::from_secs(10 * 60);

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Imdg(#[from] ImdgError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    MicroOp(#[from] MicroOpError),
    #[error("triggering {function} failed: {source}")]
    Trigger {
        function: String,
        #[source]
        source: BrokerError,
    },
    #[error("bad reply from {function}: {reason}")]
    BadReply { function: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct CoreConfig {
    /// Device addressed when a turn names none.
    pub default_device: String,
    pub dedup_window: Duration,
    /// Real time to wait for one lambda reply.
    pub request_timeout: Duration,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            default_device: "press01".into(),
            dedup_window: DEFAULT_DEDUP_WINDOW,
            request_timeout: Duration::from_secs(10),
        }
    }
}

/// Per-trace bookkeeping written once, so retries reuse the same session,
/// turn number and extraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceState {
    session_id: String,
    room_id: String,
    turn: u64,
    engine: String,
    result: IntentResult,
    frame: ContextFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectOutcome {
    pub seq: usize,
    pub function: String,
    pub status: ReplyStatus,
    pub text: Option<String>,
    pub result: Option<Value>,
}

/// Everything that happened for one user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub trace_id: String,
    pub session_id: String,
    pub room_id: String,
    pub channel_id: String,
    pub turn: u64,
    pub engine: String,
    pub request: String,
    pub result: IntentResult,
    pub frame: ContextFrame,
    pub decisions: Vec<Decision>,
    pub outcomes: Vec<EffectOutcome>,
    pub reply: Option<String>,
    pub ts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TurnStatus {
    Processed(Box<TurnRecord>),
    /// Already handled within the dedup window.
    Duplicate,
    /// Another worker holds the trace; leave it for redelivery.
    InProgress,
}

pub fn turn_key(trace_id: &str) -> String {
    format!("turn/{trace_id}")
}

fn done_key(trace_id: &str) -> String {
    format!("done/{trace_id}")
}

fn claim_key(trace_id: &str) -> String {
    format!("claim/{trace_id}")
}

fn trace_key(trace_id: &str) -> String {
    format!("trace/{trace_id}")
}

fn effect_key(trace_id: &str, seq: usize) -> String {
    format!("effect/{trace_id}/{seq:02}")
}

#[derive(Debug, Default)]
pub struct CoreMetrics {
    pub processed: AtomicU64,
    pub duplicates: AtomicU64,
    pub in_progress: AtomicU64,
    pub errors: AtomicU64,
    pub effects: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreMetricsSnapshot {
    pub processed: u64,
    pub duplicates: u64,
    pub in_progress: u64,
    pub errors: u64,
    pub effects: u64,
}

/// The conversational core: session and context handling, interpretation,
/// reasoning and sequential execution of the resulting lambda events.
#[derive(Debug)]
pub struct CoreServices {
    broker: Broker,
    imdg: Arc<Imdg>,
    sessions: SessionManager,
    contexts: ContextManager,
    auth: Arc<AuthEngine>,
    reasoning: ReasoningEngine,
    router: Arc<Router>,
    deadlines: DeadlineResolver,
    config: CoreConfig,
    metrics: CoreMetrics,
}

impl CoreServices {
    pub fn new(
        broker: Broker,
        imdg: Arc<Imdg>,
        sessions: SessionManager,
        auth: Arc<AuthEngine>,
        router: Arc<Router>,
        deadlines: DeadlineResolver,
        config: CoreConfig,
    ) -> Self {
        Self {
            contexts: ContextManager::new(imdg.clone()),
            reasoning: ReasoningEngine::new(imdg.clone()),
            broker,
            imdg,
            sessions,
            auth,
            router,
            deadlines,
            config,
            metrics: CoreMetrics::default(),
        }
    }

    pub fn imdg(&self) -> &Arc<Imdg> {
        &self.imdg
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }

    pub fn contexts(&self) -> &ContextManager {
        &self.contexts
    }

    pub fn auth(&self) -> &Arc<AuthEngine> {
        &self.auth
    }

    pub fn reasoning(&self) -> &ReasoningEngine {
        &self.reasoning
    }

    pub fn router(&self) -> &Arc<Router> {
        &self.router
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn metrics(&self) -> CoreMetricsSnapshot {
        let m = &self.metrics;
        CoreMetricsSnapshot {
            processed: m.processed.load(Ordering::Relaxed),
            duplicates: m.duplicates.load(Ordering::Relaxed),
            in_progress: m.in_progress.load(Ordering::Relaxed),
            errors: m.errors.load(Ordering::Relaxed),
            effects: m.effects.load(Ordering::Relaxed),
        }
    }

    pub fn turn(&self, trace_id: &str) -> Option<TurnRecord> {
        self.imdg.get_as(&turn_key(trace_id)).ok().flatten()
    }

    /// Handles one datagram end to end, at most once per trace id within
    /// the dedup window.
    pub fn process(&self, datagram: &MetaDatagram, worker: &str) -> Result<TurnStatus, CoreError> {
        let trace = &datagram.trace_id;
        let window = Some(self.config.dedup_window);
        if self.imdg.contains(&done_key(trace)) {
            self.metrics.duplicates.fetch_add(1, Ordering::Relaxed);
            return Ok(TurnStatus::Duplicate);
        }
        if !self.imdg.put_if_absent(&claim_key(trace), json!(worker), window)? {
            if self.imdg.contains(&done_key(trace)) {
                self.metrics.duplicates.fetch_add(1, Ordering::Relaxed);
                return Ok(TurnStatus::Duplicate);
            }
            self.metrics.in_progress.fetch_add(1, Ordering::Relaxed);
            return Ok(TurnStatus::InProgress);
        }
        match self.run_turn(datagram) {
            Ok(record) => {
                self.imdg.put_as(&turn_key(trace), &record, None)?;
                self.imdg.put(&done_key(trace), json!(record.session_id), window)?;
                self.metrics.processed.fetch_add(1, Ordering::Relaxed);
                Ok(TurnStatus::Processed(Box::new(record)))
            }
            Err(e) => {
                self.imdg.remove(&claim_key(trace));
                self.metrics.errors.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }

    fn trace_state(&self, datagram: &MetaDatagram) -> Result<TraceState, CoreError> {
        let key = trace_key(&datagram.trace_id);
        if let Some(state) = self.imdg.get_as::<TraceState>(&key)? {
            return Ok(state);
        }
        self.sessions.park_idle();
        let room = self.sessions.get_or_create_room(&datagram.channel_id)?;
        let session = self
            .sessions
            .get_or_create_session(&room, datagram.session_hint.as_deref())?;
        let before = self.contexts.frame(&session.session_id)?;
        let (engine, result) = self.router.extract(datagram, Some(&before));
        let frame = self.contexts.apply(&session.session_id, &result)?;
        let turn = self
            .imdg
            .update(&format!("turns/{}", session.session_id), None, |n| {
                Some(json!(n.and_then(Value::as_u64).unwrap_or(0) + 1))
            })?
            .and_then(|v| v.as_u64())
            .unwrap_or(1);
        let state = TraceState {
            session_id: session.session_id,
            room_id: room.room_id,
            turn,
            engine,
            result,
            frame,
        };
        self.imdg.put_as(&key, &state, Some(self.config.dedup_window))?;
        Ok(state)
    }

    fn run_turn(&self, datagram: &MetaDatagram) -> Result<TurnRecord, CoreError> {
        let state = self.trace_state(datagram)?;
        let session = self.sessions.get(&state.session_id)?;
        let scope = TurnScope {
            session: &session,
            frame: &state.frame,
            default_device: &self.config.default_device,
            deadlines: &self.deadlines,
            now: self.imdg.clock().now(),
        };
        let ops = match interpret(datagram, &state.result, &scope) {
            Ok(ops) => ops,
            Err(e) => vec![
                MicroOp::respond(&e.user_text())?,
                MicroOp::journal(&datagram.text, state.result.intent.as_str(), state.result.entity.as_str())?,
            ],
        };
        if state.result.intent == Intent::Logout {
            self.auth.revoke(&state.session_id);
            self.sessions.attach_principal(&state.session_id, None)?;
        }
        let turn = TurnContext {
            session_id: state.session_id.clone(),
            trace_id: datagram.trace_id.clone(),
            turn: state.turn,
            token: self.auth.valid_token(&state.session_id),
        };
        let decisions = self.reasoning.reason(&ops, &turn)?;
        let mut outcomes = Vec::new();
        let mut last_text: Option<String> = None;
        let mut reply: Option<String> = None;
        for decision in &decisions {
            let Some(function) = decision.function.clone() else {
                continue;
            };
            let payload = match &decision.effective {
                MicroOp::Authenticate { secret, entity } => {
                    json!({ "session": state.session_id, "secret": secret, "entity": entity })
                }
                MicroOp::QueryVar { device, variable } => json!({ "device": device, "variable": variable }),
                MicroOp::Actuate { device, order_units, deadline_hours } => json!({
                    "device": device,
                    "order_units": order_units,
                    "deadline_hours": deadline_hours,
                }),
                MicroOp::Respond { text } => {
                    let text = text.replace(RESULT_PLACEHOLDER, last_text.as_deref().unwrap_or_default());
                    reply = Some(text.clone());
                    serde_json::to_value(AnswerEvent {
                        session: state.session_id.clone(),
                        text,
                        trace_id: Some(datagram.trace_id.clone()),
                    })
                    .expect("answer serializes")
                }
                MicroOp::Journal { record } => serde_json::to_value(JournalRecord {
                    session_id: state.session_id.clone(),
                    request: record.request.clone(),
                    response: reply.clone().filter(|r| !r.is_empty()).unwrap_or_else(|| "-".into()),
                    intent: record.intent.clone(),
                    entity: record.entity.clone(),
                    trace_id: datagram.trace_id.clone(),
                    ts: self.imdg.clock().now_ms(),
                })
                .expect("record serializes"),
            };
            let answer = self.effect(&datagram.trace_id, decision.seq, &function, payload)?;
            let text = reply_text(&function, &answer);
            if answer.status == ReplyStatus::Ok {
                self.remember(&state.session_id, &decision.effective, &answer)?;
                for binding in &decision.http_bindings {
                    let event = HttpRestEvent {
                        binding: binding.clone(),
                        op: Some(decision.effective.kind().as_str().to_string()),
                        decision_key: Some(decision.key.clone()),
                    };
                    let payload = serde_json::to_value(event).expect("event serializes");
                    if let Err(e) = self.effect(&datagram.trace_id, 50 + decision.seq, HTTP_REST, payload) {
                        tracing::warn!(error = %e, decision = %decision.key, "http-rest binding failed");
                    }
                }
            }
            outcomes.push(EffectOutcome {
                seq: decision.seq,
                function,
                status: answer.status,
                text: text.clone(),
                result: answer.result.clone(),
            });
            last_text = text;
        }
        self.sessions.touch(&state.session_id)?;
        Ok(TurnRecord {
            trace_id: datagram.trace_id.clone(),
            session_id: state.session_id,
            room_id: state.room_id,
            channel_id: datagram.channel_id.clone(),
            turn: state.turn,
            engine: state.engine,
            request: datagram.text.clone(),
            result: state.result,
            frame: state.frame,
            decisions,
            outcomes,
            reply,
            ts: self.imdg.clock().now_ms(),
        })
    }

    /// Triggers a lambda once per (trace, seq); retries reuse the stored reply.
    fn effect(&self, trace: &str, seq: usize, function: &str, payload: Value) -> Result<TriggerReply, CoreError> {
        let key = effect_key(trace, seq);
        if let Some(reply) = self.imdg.get_as::<TriggerReply>(&key)? {
            return Ok(reply);
        }
        let topic = format!("{TRIGGER_PREFIX}{function}");
        let bytes = self
            .broker
            .request(&topic, serde_json::to_vec(&payload).expect("payload serializes"), self.config.request_timeout)
            .map_err(|source| CoreError::Trigger {
                function: function.to_string(),
                source,
            })?;
        let reply: TriggerReply = serde_json::from_slice(&bytes).map_err(|e| CoreError::BadReply {
            function: function.to_string(),
            reason: e.to_string(),
        })?;
        self.metrics.effects.fetch_add(1, Ordering::Relaxed);
        self.imdg.put_as(&key, &reply, Some(self.config.dedup_window))?;
        Ok(reply)
    }

    fn remember(&self, session_id: &str, op: &MicroOp, answer: &TriggerReply) -> Result<(), CoreError> {
        let result = answer.result.as_ref();
        match op {
            MicroOp::QueryVar { device, variable } => {
                self.sessions.set_state_var(session_id, "device", json!(device))?;
                if let Some(v) = result.and_then(|r| r.get("value")) {
                    self.sessions.set_state_var(session_id, &format!("last_{}", variable.to_lowercase()), v.clone())?;
                }
            }
            MicroOp::Actuate { device, .. } => {
                self.sessions.set_state_var(session_id, "device", json!(device))?;
                if let Some(order) = result.and_then(|r| r.get("order")) {
                    self.sessions.set_state_var(session_id, "last_order", order.clone())?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn reply_text(function: &str, reply: &TriggerReply) -> Option<String> {
    match reply.status {
        ReplyStatus::Ok => reply.result.as_ref().map(|r| match r.get("text").and_then(Value::as_str) {
            Some(t) => t.to_string(),
            None => r.to_string(),
        }),
        ReplyStatus::NoMatch => Some(format!("Sorry, {function} is not available right now.")),
        ReplyStatus::Error | ReplyStatus::Timeout => {
            let error = reply.error.as_deref().unwrap_or("unknown error");
            if error.starts_with("directory-unavailable") {
                Some("Sorry, the directory is unavailable right now. Please try again later.".into())
            } else {
                Some(format!("Sorry, I could not complete that: {error}."))
            }
        }
    }
}

struct Worker {
    member: SubscriptionId,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

/// Competing consumers of `ingest/#` in group `core`.
pub struct CoreWorkers {
    broker: Broker,
    workers: Vec<Worker>,
}

impl std::fmt::Debug for CoreWorkers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoreWorkers").field("members", &self.members()).finish()
    }
}

const POLL: Duration = Duration::from_millis(20);

fn run_worker(core: Arc<CoreServices>, sub: Subscription, stop: Arc<AtomicBool>) {
    let name = format!("core-{}", sub.id().0);
    while !stop.load(Ordering::SeqCst) {
        let envelope = match sub.recv_timeout(POLL) {
            Ok(Some(e)) => e,
            Ok(None) => continue,
            Err(_) => break,
        };
        let datagram = match envelope.payload_str().map(MetaDatagram::from_json) {
            Some(Ok(d)) => d,
            _ => {
                tracing::warn!(message = %envelope.message_id.0, "undecodable datagram left for dead-lettering");
                continue;
            }
        };
        match core.process(&datagram, &name) {
            Ok(TurnStatus::Processed(_)) | Ok(TurnStatus::Duplicate) => {
                let _ = sub.ack(envelope.message_id);
            }
            Ok(TurnStatus::InProgress) => {}
            Err(e) => tracing::warn!(trace = %datagram.trace_id, error = %e, "turn failed, awaiting redelivery"),
        }
    }
}

impl CoreWorkers {
    pub fn start(core: Arc<CoreServices>, count: usize, options: SubscribeOptions) -> Result<Self, BrokerError> {
        let broker = core.broker().clone();
        let options = options.group(CORE_GROUP);
        let mut workers = Vec::with_capacity(count);
        for _ in 0..count {
            let sub = broker.subscribe(INGEST_FILTER, options.clone())?;
            let member = sub.id();
            let stop = Arc::new(AtomicBool::new(false));
            let core = core.clone();
            let flag = stop.clone();
            let handle = thread::Builder::new()
                .name(format!("core-{}", member.0))
                .spawn(move || run_worker(core, sub, flag))
                .expect("spawn core worker");
            workers.push(Worker {
                member,
                stop,
                handle: Some(handle),
            });
        }
        Ok(Self { broker, workers })
    }

    pub fn members(&self) -> Vec<SubscriptionId> {
        self.workers
            .iter()
            .filter(|w| !w.stop.load(Ordering::SeqCst))
            .map(|w| w.member)
            .collect()
    }

    /// Removes a member abruptly: the broker hands its outstanding
    /// messages to the survivors right away.
    pub fn kill(&mut self, member: SubscriptionId) -> bool {
        let Some(worker) = self.workers.iter_mut().find(|w| w.member == member) else {
            return false;
        };
        if worker.stop.swap(true, Ordering::SeqCst) {
            return false;
        }
        let _ = self.broker.remove_member(CORE_GROUP, member);
        true
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        for w in &self.workers {
            w.stop.store(true, Ordering::SeqCst);
        }
        for w in &mut self.workers {
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for CoreWorkers {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Writes published journal records to the block store, once per trace.
pub struct JournalSink {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for JournalSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JournalSink").finish_non_exhaustive()
    }
}

impl JournalSink {
    pub fn start(broker: &Broker, imdg: Arc<Imdg>, journal: Journal, options: SubscribeOptions) -> Result<Self, BrokerError> {
        let sub = broker.subscribe(JOURNAL_TOPIC, options.group(JOURNAL_GROUP))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("journal-sink".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    let envelope = match sub.recv_timeout(POLL) {
                        Ok(Some(e)) => e,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let Ok(record) = envelope.decode::<JournalRecord>() else {
                        tracing::warn!(message = %envelope.message_id.0, "undecodable journal record");
                        continue;
                    };
                    let key = format!("journaled/{}", record.trace_id);
                    if !imdg.contains(&key) {
                        if let Err(e) = journal.journal_session(&record) {
                            tracing::warn!(trace = %record.trace_id, error = %e, "journal append failed");
                            continue;
                        }
                        let _ = imdg.put(&key, json!(record.session_id), None);
                    }
                    let _ = sub.ack(envelope.message_id);
                }
            })
            .expect("spawn journal sink");
        Ok(Self {
            stop,
            handle: Some(handle),
        })
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for JournalSink {
    fn drop(&mut self) {
        self.shutdown();
    }
}
