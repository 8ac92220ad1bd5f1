//! Embedded pub/sub broker with at-least-once delivery.
//!
//! Every matching non-group subscription gets its own copy of a message. A
//! consumer group (same group name and filter) receives each message once,
//! handed to one member picked by a [`GroupPolicy`]. A delivery stays pending
//! until the holder acks it; if the ack does not arrive within the
//! subscription's ack timeout the message is handed out again, and after
//! `max_redeliveries + 1` attempts it is parked on `$dead/<topic>`.
//!
//! Consumers may see duplicates. [`Envelope::message_id`] and
//! [`Envelope::redelivery_count`] are there to let them deduplicate.

mod topic;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, SystemClock};

pub use topic::{TopicFilter, TopicName};

pub const DEAD_LETTER_PREFIX: &str = "$dead/";
pub const DEFAULT_ACK_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_MAX_REDELIVERIES: u32 = 5;

const TRACE_CAPACITY: usize = 512;
const TERMINAL_RETENTION: usize = 65_536;
const MAX_WAIT_SLICE: Duration = Duration::from_millis(20);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("message {0} is not pending for this subscription")]
    UnknownMessage(MessageId),
    #[error("{member} is not a member of group {group:?}")]
    UnknownMember { group: String, member: SubscriptionId },
    #[error("subscription {0} is closed")]
    Closed(SubscriptionId),
    #[error("request timed out")]
    Timeout,
    #[error("broker refused the publish")]
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "msg-{:08}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubscriptionId(pub u64);

impl fmt::Display for SubscriptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sub-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Envelope {
    pub message_id: MessageId,
    pub topic: String,
    pub payload: Vec<u8>,
    pub correlation_id: Option<String>,
    pub reply_to: Option<String>,
    /// Broker clock reading at publish time.
    pub publish_ts: Duration,
    pub redelivery_count: u32,
}

impl Envelope {
    pub fn payload_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.payload).ok()
    }

    pub fn decode<T: serde::de::DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.payload)
    }
}

/// Optional request/response metadata attached to a publish.
#[derive(Debug, Clone, Default)]
pub struct Headers {
    pub reply_to: Option<String>,
    pub correlation_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SubscribeOptions {
    pub group: Option<String>,
    pub ack_timeout: Duration,
    pub max_redeliveries: u32,
}

impl Default for SubscribeOptions {
    fn default() -> Self {
        Self {
            group: None,
            ack_timeout: DEFAULT_ACK_TIMEOUT,
            max_redeliveries: DEFAULT_MAX_REDELIVERIES,
        }
    }
}

impl SubscribeOptions {
    pub fn group(mut self, group: impl Into<String>) -> Self {
        let group = group.into();
        self.group = (!group.is_empty()).then_some(group);
        self
    }

    pub fn ack_timeout(mut self, timeout: Duration) -> Self {
        self.ack_timeout = timeout;
        self
    }

    pub fn max_redeliveries(mut self, n: u32) -> Self {
        self.max_redeliveries = n.max(1);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Pending,
    Acked,
    Dead,
}

/// Snapshot of one message's delivery to one subscription or group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryState {
    pub message_id: MessageId,
    /// Group name, or the subscription id for non-group subscriptions.
    pub target: String,
    pub status: DeliveryStatus,
    pub attempts: u32,
    pub next_attempt_ts: Option<Duration>,
}

/// Chooses which live member of a consumer group receives a message.
pub trait GroupPolicy: Send + Sync + fmt::Debug {
    /// Returns an index in `0..members`. `cursor` is per-group state owned by
    /// the broker. `members` is never zero.
    fn select(&self, members: usize, cursor: &mut usize) -> usize;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RoundRobin;

impl GroupPolicy for RoundRobin {
    fn select(&self, members: usize, cursor: &mut usize) -> usize {
        let pick = *cursor % members;
        *cursor = (pick + 1) % members;
        pick
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub published: u64,
    pub delivered: u64,
    pub redelivered: u64,
    pub acked: u64,
    pub dead_lettered: u64,
    pub unknown_acks: u64,
    pub dropped_acks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Published,
    Delivered,
    Acked,
    DeadLettered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub kind: TraceKind,
    pub message_id: MessageId,
    pub topic: String,
    pub redelivery_count: u32,
    pub at_ms: u64,
}

type TargetId = u64;

#[derive(Debug)]
struct Delivery {
    envelope: Option<Arc<Envelope>>,
    status: DeliveryStatus,
    attempts: u32,
    holder: Option<SubscriptionId>,
    deadline: Option<Duration>,
}

#[derive(Debug)]
struct Target {
    filter: TopicFilter,
    group: Option<String>,
    ack_timeout: Duration,
    max_redeliveries: u32,
    members: Vec<SubscriptionId>,
    cursor: usize,
    orphaned: VecDeque<MessageId>,
    deliveries: HashMap<MessageId, Delivery>,
    terminal: VecDeque<MessageId>,
}

impl Target {
    fn label(&self) -> String {
        match &self.group {
            Some(group) => group.clone(),
            None => self
                .members
                .first()
                .map(ToString::to_string)
                .unwrap_or_default(),
        }
    }

    fn retire(&mut self, id: MessageId) {
        self.terminal.push_back(id);
        while self.terminal.len() > TERMINAL_RETENTION {
            if let Some(old) = self.terminal.pop_front() {
                self.deliveries.remove(&old);
            }
        }
    }
}

#[derive(Debug)]
struct Member {
    target: TargetId,
    inbox: VecDeque<MessageId>,
    in_flight: HashSet<MessageId>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Timer {
    deadline: Duration,
    target: TargetId,
    message: MessageId,
    attempt: u32,
}

#[derive(Debug)]
struct AckDrop {
    probability: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Default)]
struct State {
    next_message: u64,
    next_subscription: u64,
    next_target: TargetId,
    next_reply: u64,
    targets: BTreeMap<TargetId, Target>,
    groups: HashMap<(String, String), TargetId>,
    members: HashMap<SubscriptionId, Member>,
    timers: BinaryHeap<Reverse<Timer>>,
    stats: BrokerStats,
    trace: VecDeque<TraceEvent>,
    refuse_publishes: u32,
    ack_drop: Option<AckDrop>,
}

struct Shared {
    state: Mutex<State>,
    wake: Condvar,
    clock: SharedClock,
    policy: Box<dyn GroupPolicy>,
}

/// Cheap to clone; all clones share one broker instance.
#[derive(Clone)]
pub struct Broker {
    shared: Arc<Shared>,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker")
            .field("policy", &self.shared.policy)
            .finish_non_exhaustive()
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        Self::with_clock(SystemClock::shared())
    }

    pub fn with_clock(clock: SharedClock) -> Self {
        Self::with_policy(clock, Box::new(RoundRobin))
    }

    pub fn with_policy(clock: SharedClock, policy: Box<dyn GroupPolicy>) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State::default()),
                wake: Condvar::new(),
                clock,
                policy,
            }),
        }
    }

    pub fn publish(&self, topic: &str, payload: impl Into<Vec<u8>>) -> Result<MessageId, BrokerError> {
        self.publish_with(topic, payload, Headers::default())
    }

    pub fn publish_with(
        &self,
        topic: &str,
        payload: impl Into<Vec<u8>>,
        headers: Headers,
    ) -> Result<MessageId, BrokerError> {
        let topic = TopicName::parse(topic)?;
        let mut state = self.shared.state.lock();
        if state.refuse_publishes > 0 {
            state.refuse_publishes -= 1;
            return Err(BrokerError::Unavailable);
        }
        let id = self.publish_locked(&mut state, topic, payload.into(), headers);
        drop(state);
        self.shared.wake.notify_all();
        Ok(id)
    }

    /// Publishes `payload` to the request's `reply_to` topic with its
    /// correlation id. Returns `None` when the request carried no reply topic.
    pub fn reply(
        &self,
        request: &Envelope,
        payload: impl Into<Vec<u8>>,
    ) -> Result<Option<MessageId>, BrokerError> {
        let Some(reply_to) = &request.reply_to else {
            return Ok(None);
        };
        let headers = Headers {
            reply_to: None,
            correlation_id: request.correlation_id.clone(),
        };
        self.publish_with(reply_to, payload, headers).map(Some)
    }

    pub fn subscribe(&self, filter: &str, options: SubscribeOptions) -> Result<Subscription, BrokerError> {
        let filter = TopicFilter::parse(filter)?;
        let mut guard = self.shared.state.lock();
        let state = &mut *guard;
        state.next_subscription += 1;
        let id = SubscriptionId(state.next_subscription);

        let existing = options
            .group
            .as_ref()
            .and_then(|g| state.groups.get(&(g.clone(), filter.as_str().to_string())).copied());
        let target_id = match existing {
            Some(target_id) => target_id,
            None => {
                state.next_target += 1;
                let target_id = state.next_target;
                if let Some(group) = &options.group {
                    state
                        .groups
                        .insert((group.clone(), filter.as_str().to_string()), target_id);
                }
                state.targets.insert(
                    target_id,
                    Target {
                        filter: filter.clone(),
                        group: options.group.clone(),
                        ack_timeout: options.ack_timeout,
                        max_redeliveries: options.max_redeliveries,
                        members: Vec::new(),
                        cursor: 0,
                        orphaned: VecDeque::new(),
                        deliveries: HashMap::new(),
                        terminal: VecDeque::new(),
                    },
                );
                target_id
            }
        };
        state.members.insert(
            id,
            Member {
                target: target_id,
                inbox: VecDeque::new(),
                in_flight: HashSet::new(),
            },
        );
        let target = state.targets.get_mut(&target_id).expect("target just resolved");
        target.members.push(id);
        // Messages that waited for a member go out now.
        let orphaned: Vec<MessageId> = target.orphaned.drain(..).collect();
        for message in orphaned {
            assign(&*self.shared.policy, target, &mut state.members, message);
        }
        drop(guard);
        self.shared.wake.notify_all();

        Ok(Subscription {
            broker: self.clone(),
            id,
            filter: filter.as_str().to_string(),
            group: options.group,
        })
    }

    /// Acks `message_id` on behalf of subscription `holder`.
    pub fn ack(&self, holder: SubscriptionId, message_id: MessageId) -> Result<(), BrokerError> {
        let now = self.shared.clock.now();
        let mut state = self.shared.state.lock();
        let state = &mut *state;
        if let Some(drop_rule) = state.ack_drop.as_mut() {
            if drop_rule.rng.random::<f64>() < drop_rule.probability {
                state.stats.dropped_acks += 1;
                return Ok(());
            }
        }
        let member = state
            .members
            .get_mut(&holder)
            .ok_or(BrokerError::Closed(holder))?;
        if !member.in_flight.remove(&message_id) {
            state.stats.unknown_acks += 1;
            tracing::warn!(%holder, %message_id, "ack for a message that is not pending here");
            return Err(BrokerError::UnknownMessage(message_id));
        }
        let target = state
            .targets
            .get_mut(&member.target)
            .expect("member without target");
        let delivery = target
            .deliveries
            .get_mut(&message_id)
            .expect("in-flight message without delivery record");
        delivery.status = DeliveryStatus::Acked;
        delivery.deadline = None;
        let topic = delivery
            .envelope
            .take()
            .map(|e| e.topic.clone())
            .unwrap_or_default();
        target.retire(message_id);
        state.stats.acked += 1;
        push_trace(
            &mut state.trace,
            TraceKind::Acked,
            message_id,
            topic,
            0,
            now,
        );
        Ok(())
    }

    /// Removes `member` from `group`. Everything it held, delivered or
    /// queued, is rescheduled onto the surviving members, or parked until a
    /// member joins.
    pub fn remove_member(&self, group: &str, member: SubscriptionId) -> Result<(), BrokerError> {
        let mut state = self.shared.state.lock();
        let unknown = || BrokerError::UnknownMember {
            group: group.to_string(),
            member,
        };
        let target_id = state.members.get(&member).ok_or_else(unknown)?.target;
        let in_group = state
            .targets
            .get(&target_id)
            .is_some_and(|t| t.group.as_deref() == Some(group));
        if !in_group {
            return Err(unknown());
        }
        self.detach_locked(&mut state, member);
        drop(state);
        self.shared.wake.notify_all();
        Ok(())
    }

    /// Issues a request and waits for the first reply carrying the same
    /// correlation id. The reply subscription is removed on return.
    pub fn request(
        &self,
        topic: &str,
        payload: impl Into<Vec<u8>>,
        timeout: Duration,
    ) -> Result<Vec<u8>, BrokerError> {
        TopicName::parse(topic)?;
        let (reply_topic, correlation_id) = {
            let mut state = self.shared.state.lock();
            state.next_reply += 1;
            (
                format!("$reply/{}", state.next_reply),
                format!("corr-{}", state.next_reply),
            )
        };
        let inbox = self.subscribe(&reply_topic, SubscribeOptions::default())?;
        self.publish_with(
            topic,
            payload,
            Headers {
                reply_to: Some(reply_topic),
                correlation_id: Some(correlation_id.clone()),
            },
        )?;
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(BrokerError::Timeout);
            }
            let Some(envelope) = inbox.recv_timeout(remaining)? else {
                return Err(BrokerError::Timeout);
            };
            let _ = inbox.ack(envelope.message_id);
            if envelope.correlation_id.as_deref() == Some(correlation_id.as_str()) {
                return Ok(envelope.payload);
            }
        }
    }

    /// Processes expired ack deadlines. Consumers waiting in
    /// [`Subscription::recv_timeout`] do this on their own; call it when
    /// driving the broker with a manual clock and non-blocking receives.
    pub fn tick(&self) {
        let mut state = self.shared.state.lock();
        let moved = self.expire_due(&mut state);
        drop(state);
        if moved {
            self.shared.wake.notify_all();
        }
    }

    pub fn stats(&self) -> BrokerStats {
        self.shared.state.lock().stats.clone()
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.shared.state.lock().trace.iter().cloned().collect()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.shared.clock
    }

    /// Delivery record of `message_id` as seen by `subscription`'s target.
    pub fn delivery_state(
        &self,
        subscription: SubscriptionId,
        message_id: MessageId,
    ) -> Option<DeliveryState> {
        let state = self.shared.state.lock();
        let target = state.targets.get(&state.members.get(&subscription)?.target)?;
        let delivery = target.deliveries.get(&message_id)?;
        Some(DeliveryState {
            message_id,
            target: target.label(),
            status: delivery.status,
            attempts: delivery.attempts,
            next_attempt_ts: delivery.deadline,
        })
    }

    /// Messages delivered to or queued for `subscription` and not yet acked.
    pub fn outstanding(&self, subscription: SubscriptionId) -> usize {
        let state = self.shared.state.lock();
        state
            .members
            .get(&subscription)
            .map_or(0, |m| m.inbox.len() + m.in_flight.len())
    }

    /// Members of the group on `filter`, in join order.
    pub fn group_members(&self, group: &str, filter: &str) -> Vec<SubscriptionId> {
        let state = self.shared.state.lock();
        state
            .groups
            .get(&(group.to_string(), filter.to_string()))
            .and_then(|t| state.targets.get(t))
            .map(|t| t.members.clone())
            .unwrap_or_default()
    }

    /// Fault hook: the next `n` publishes fail with [`BrokerError::Unavailable`].
    pub fn refuse_next_publishes(&self, n: u32) {
        self.shared.state.lock().refuse_publishes = n;
    }

    /// Fault hook: each ack is silently lost with `probability`.
    pub fn set_ack_drop(&self, probability: f64, seed: u64) {
        let probability = probability.clamp(0.0, 1.0);
        self.shared.state.lock().ack_drop = (probability > 0.0).then(|| AckDrop {
            probability,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
    }

    fn publish_locked(
        &self,
        state: &mut State,
        topic: TopicName,
        payload: Vec<u8>,
        headers: Headers,
    ) -> MessageId {
        let now = self.shared.clock.now();
        state.next_message += 1;
        let id = MessageId(state.next_message);
        let envelope = Arc::new(Envelope {
            message_id: id,
            topic: topic.as_str().to_string(),
            payload,
            correlation_id: headers.correlation_id,
            reply_to: headers.reply_to,
            publish_ts: now,
            redelivery_count: 0,
        });
        state.stats.published += 1;
        push_trace(
            &mut state.trace,
            TraceKind::Published,
            id,
            envelope.topic.clone(),
            0,
            now,
        );
        let State {
            targets, members, ..
        } = state;
        for target in targets.values_mut() {
            if !target.filter.matches(&topic) {
                continue;
            }
            target.deliveries.insert(
                id,
                Delivery {
                    envelope: Some(Arc::clone(&envelope)),
                    status: DeliveryStatus::Pending,
                    attempts: 0,
                    holder: None,
                    deadline: None,
                },
            );
            assign(&*self.shared.policy, target, members, id);
        }
        id
    }

    fn detach_locked(&self, state: &mut State, id: SubscriptionId) {
        let Some(member) = state.members.remove(&id) else {
            return;
        };
        let Some(target) = state.targets.get_mut(&member.target) else {
            return;
        };
        if let Some(pos) = target.members.iter().position(|m| *m == id) {
            target.members.remove(pos);
            if pos < target.cursor {
                target.cursor -= 1;
            }
            if target.members.is_empty() {
                target.cursor = 0;
            } else {
                target.cursor %= target.members.len();
            }
        }
        if target.group.is_none() {
            let target_id = member.target;
            state.targets.remove(&target_id);
            return;
        }
        let mut held: Vec<MessageId> = member.in_flight.into_iter().collect();
        held.sort();
        held.extend(member.inbox);
        for message in held {
            if let Some(delivery) = target.deliveries.get_mut(&message) {
                delivery.holder = None;
                delivery.deadline = None;
            }
            assign(&*self.shared.policy, target, &mut state.members, message);
        }
    }

    fn take_locked(&self, state: &mut State, id: SubscriptionId) -> Result<Option<Envelope>, BrokerError> {
        self.expire_due(state);
        let now = self.shared.clock.now();
        let State {
            targets,
            members,
            timers,
            stats,
            trace,
            ..
        } = state;
        let member = members.get_mut(&id).ok_or(BrokerError::Closed(id))?;
        let target_id = member.target;
        let target = targets.get_mut(&target_id).ok_or(BrokerError::Closed(id))?;
        while let Some(message) = member.inbox.pop_front() {
            let Some(delivery) = target.deliveries.get_mut(&message) else {
                continue;
            };
            if delivery.status != DeliveryStatus::Pending {
                continue;
            }
            let Some(envelope) = delivery.envelope.as_ref() else {
                continue;
            };
            delivery.attempts += 1;
            let deadline = now + target.ack_timeout;
            delivery.deadline = Some(deadline);
            delivery.holder = Some(id);
            member.in_flight.insert(message);
            timers.push(Reverse(Timer {
                deadline,
                target: target_id,
                message,
                attempt: delivery.attempts,
            }));
            stats.delivered += 1;
            if delivery.attempts > 1 {
                stats.redelivered += 1;
            }
            let mut out = Envelope::clone(envelope);
            out.redelivery_count = delivery.attempts - 1;
            push_trace(
                trace,
                TraceKind::Delivered,
                message,
                out.topic.clone(),
                out.redelivery_count,
                now,
            );
            return Ok(Some(out));
        }
        Ok(None)
    }

    /// Returns true when any message changed hands.
    fn expire_due(&self, state: &mut State) -> bool {
        let now = self.shared.clock.now();
        let mut moved = false;
        let mut dead_letters = Vec::new();
        while state
            .timers
            .peek()
            .is_some_and(|Reverse(t)| t.deadline <= now)
        {
            let Reverse(timer) = state.timers.pop().expect("peeked");
            let State {
                targets,
                members,
                stats,
                trace,
                ..
            } = &mut *state;
            let Some(target) = targets.get_mut(&timer.target) else {
                continue;
            };
            let max_attempts = target.max_redeliveries + 1;
            let Some(delivery) = target.deliveries.get_mut(&timer.message) else {
                continue;
            };
            let live = delivery.status == DeliveryStatus::Pending
                && delivery.attempts == timer.attempt
                && delivery.deadline == Some(timer.deadline);
            if !live {
                continue;
            }
            if let Some(holder) = delivery.holder.take() {
                if let Some(member) = members.get_mut(&holder) {
                    member.in_flight.remove(&timer.message);
                }
            }
            delivery.deadline = None;
            moved = true;
            if delivery.attempts >= max_attempts {
                delivery.status = DeliveryStatus::Dead;
                if let Some(envelope) = delivery.envelope.take() {
                    stats.dead_lettered += 1;
                    push_trace(
                        trace,
                        TraceKind::DeadLettered,
                        timer.message,
                        envelope.topic.clone(),
                        delivery.attempts - 1,
                        now,
                    );
                    dead_letters.push(envelope);
                }
                target.retire(timer.message);
            } else {
                assign(&*self.shared.policy, target, members, timer.message);
            }
        }
        for envelope in dead_letters {
            let topic = format!("{DEAD_LETTER_PREFIX}{}", envelope.topic);
            if let Ok(topic) = TopicName::parse(&topic) {
                let headers = Headers {
                    reply_to: envelope.reply_to.clone(),
                    correlation_id: envelope.correlation_id.clone(),
                };
                self.publish_locked(state, topic, envelope.payload.clone(), headers);
            }
        }
        moved
    }

    fn recv_timeout(&self, id: SubscriptionId, timeout: Duration) -> Result<Option<Envelope>, BrokerError> {
        let give_up = Instant::now() + timeout;
        let mut state = self.shared.state.lock();
        loop {
            if let Some(envelope) = self.take_locked(&mut state, id)? {
                return Ok(Some(envelope));
            }
            let now = Instant::now();
            if now >= give_up {
                return Ok(None);
            }
            let mut wait = (give_up - now).min(MAX_WAIT_SLICE);
            if let Some(Reverse(timer)) = state.timers.peek() {
                let until = timer.deadline.saturating_sub(self.shared.clock.now());
                wait = wait.min(until.max(Duration::from_millis(1)));
            }
            self.wait(&mut state, wait);
        }
    }

    fn wait(&self, state: &mut MutexGuard<'_, State>, wait: Duration) {
        let _ = self.shared.wake.wait_for(state, wait);
    }
}

fn assign(
    policy: &dyn GroupPolicy,
    target: &mut Target,
    members: &mut HashMap<SubscriptionId, Member>,
    message: MessageId,
) {
    if target.members.is_empty() {
        target.orphaned.push_back(message);
        return;
    }
    let pick = policy.select(target.members.len(), &mut target.cursor);
    let holder = target.members[pick.min(target.members.len() - 1)];
    if let Some(delivery) = target.deliveries.get_mut(&message) {
        delivery.holder = Some(holder);
    }
    if let Some(member) = members.get_mut(&holder) {
        member.inbox.push_back(message);
    }
}

fn push_trace(
    trace: &mut VecDeque<TraceEvent>,
    kind: TraceKind,
    message_id: MessageId,
    topic: String,
    redelivery_count: u32,
    now: Duration,
) {
    if trace.len() == TRACE_CAPACITY {
        trace.pop_front();
    }
    trace.push_back(TraceEvent {
        kind,
        message_id,
        topic,
        redelivery_count,
        at_ms: now.as_millis() as u64,
    });
}

/// A subscription handle. Dropping it unsubscribes; for a group member that
/// hands its outstanding messages to the rest of the group.
pub struct Subscription {
    broker: Broker,
    id: SubscriptionId,
    filter: String,
    group: Option<String>,
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscription")
            .field("id", &self.id)
            .field("filter", &self.filter)
            .field("group", &self.group)
            .finish()
    }
}

impl Subscription {
    pub fn id(&self) -> SubscriptionId {
        self.id
    }

    pub fn filter(&self) -> &str {
        &self.filter
    }

    pub fn group(&self) -> Option<&str> {
        self.group.as_deref()
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    /// Next deliverable envelope, if any, without blocking.
    pub fn try_recv(&self) -> Result<Option<Envelope>, BrokerError> {
        let mut state = self.broker.shared.state.lock();
        self.broker.take_locked(&mut state, self.id)
    }

    /// Waits up to `timeout` of real time for the next envelope.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Envelope>, BrokerError> {
        self.broker.recv_timeout(self.id, timeout)
    }

    pub fn ack(&self, message_id: MessageId) -> Result<(), BrokerError> {
        self.broker.ack(self.id, message_id)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        let mut state = self.broker.shared.state.lock();
        self.broker.detach_locked(&mut state, self.id);
        drop(state);
        self.broker.shared.wake.notify_all();
    }
}
