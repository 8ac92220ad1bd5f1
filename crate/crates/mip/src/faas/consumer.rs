use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Event, FaasEngine, FaasError, Invocation, Outcome};
use crate::broker::{Broker, Envelope, MessageId, SubscribeOptions, SubscriptionId};

pub const TRIGGER_PREFIX: &str = "faas/trigger/";
pub const DEAD_FAAS_TOPIC: &str = "$dead/faas";
const DEDUP_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplyStatus {
    Ok,
    Error,
    Timeout,
    NoMatch,
}

/// Reply sent to the `reply_to` topic of a trigger message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerReply {
    pub status: ReplyStatus,
    pub invocation_id: Option<String>,
    pub result: Option<Value>,
    pub error: Option<String>,
}

impl TriggerReply {
    fn from_invocation(inv: &Invocation) -> Self {
        Self {
            status: match inv.outcome {
                Outcome::Ok => ReplyStatus::Ok,
                Outcome::Error => ReplyStatus::Error,
                Outcome::Timeout => ReplyStatus::Timeout,
            },
            invocation_id: Some(inv.invocation_id.clone()),
            result: inv.result.clone(),
            error: inv.error.clone(),
        }
    }

    fn no_match() -> Self {
        Self {
            status: ReplyStatus::NoMatch,
            invocation_id: None,
            result: None,
            error: None,
        }
    }
}

enum Seen {
    Pending,
    Done(Vec<u8>),
}

#[derive(Default)]
struct Dedup {
    seen: HashMap<MessageId, Seen>,
    order: VecDeque<MessageId>,
}

impl Dedup {
    fn insert(&mut self, id: MessageId, state: Seen) {
        if self.seen.insert(id, state).is_none() {
            self.order.push_back(id);
            if self.order.len() > DEDUP_CAPACITY {
                if let Some(old) = self.order.pop_front() {
                    self.seen.remove(&old);
                }
            }
        }
    }
}

/// A broker consumer feeding `faas/trigger/#` into the engine. Stops on drop.
pub struct FaasConsumer {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    member: SubscriptionId,
}

impl std::fmt::Debug for FaasConsumer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FaasConsumer").field("member", &self.member).finish()
    }
}

impl FaasConsumer {
    pub fn member(&self) -> SubscriptionId {
        self.member
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for FaasConsumer {
    fn drop(&mut self) {
        self.halt();
    }
}

impl FaasEngine {
    /// Subscribes to `faas/trigger/#` in group "faas" and triggers lambdas
    /// for incoming messages. Each reply goes to the message's `reply_to`.
    /// Redelivered messages (same message id) are not invoked twice; a
    /// finished one gets its cached reply again.
    pub fn attach(&self, broker: &Broker, options: SubscribeOptions) -> Result<FaasConsumer, FaasError> {
        self.set_dead_letter_broker(broker.clone());
        let options = if options.group.is_none() { options.group("faas") } else { options };
        let sub = broker.subscribe(&format!("{TRIGGER_PREFIX}#"), options)?;
        let member = sub.id();
        let stop = Arc::new(AtomicBool::new(false));
        let dedup = Arc::new(Mutex::new(Dedup::default()));
        let engine = self.clone();
        let broker = broker.clone();
        let flag = Arc::clone(&stop);
        let handle = thread::Builder::new()
            .name("faas-consumer".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    match sub.recv_timeout(Duration::from_millis(20)) {
                        Ok(Some(envelope)) => engine.handle(&broker, member, &dedup, envelope),
                        Ok(None) => {}
                        Err(e) => {
                            tracing::warn!(error = %e, "faas consumer stopped");
                            break;
                        }
                    }
                }
            })
            .expect("spawn faas consumer");
        Ok(FaasConsumer {
            stop,
            handle: Some(handle),
            member,
        })
    }

    fn handle(&self, broker: &Broker, member: SubscriptionId, dedup: &Arc<Mutex<Dedup>>, envelope: Envelope) {
        let id = envelope.message_id;
        {
            let mut d = dedup.lock();
            match d.seen.get(&id) {
                Some(Seen::Done(reply)) => {
                    let reply = reply.clone();
                    drop(d);
                    send_reply(broker, &envelope, reply);
                    let _ = broker.ack(member, id);
                    return;
                }
                Some(Seen::Pending) => return,
                None => d.insert(id, Seen::Pending),
            }
        }
        let payload = serde_json::from_slice(&envelope.payload)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&envelope.payload).into_owned()));
        let event = Event::new(envelope.topic.clone(), payload);
        let finish = {
            let broker = broker.clone();
            let dedup = Arc::clone(dedup);
            let envelope = envelope.clone();
            move |reply: TriggerReply| {
                let bytes = serde_json::to_vec(&reply).expect("reply serializes");
                dedup.lock().insert(envelope.message_id, Seen::Done(bytes.clone()));
                send_reply(&broker, &envelope, bytes);
                let _ = broker.ack(member, envelope.message_id);
            }
        };
        let finish = Arc::new(Mutex::new(Some(finish)));
        let on_done = {
            let finish = Arc::clone(&finish);
            Box::new(move |inv: &Invocation| {
                if let Some(f) = finish.lock().take() {
                    f(TriggerReply::from_invocation(inv));
                }
            })
        };
        if self.trigger_with(event, on_done).is_none() {
            if let Some(f) = finish.lock().take() {
                f(TriggerReply::no_match());
            }
        }
    }
}

fn send_reply(broker: &Broker, request: &Envelope, reply: Vec<u8>) {
    if let Err(e) = broker.reply(request, reply) {
        tracing::warn!(error = %e, topic = %request.topic, "could not send trigger reply");
    }
}
