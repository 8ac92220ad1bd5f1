//! Multi-channel data ingestion.
//!
//! The outer layer admits raw channel input through a per-channel token
//! bucket and turns it into text. The inner layer wraps that text in a
//! version-stamped [`MetaDatagram`], picks the ingest topic for it and
//! publishes it. Answers travel back the same way through
//! [`Mdie::render_answer`].
//!
//! Speech is simulated: a voice body carries `simulated-transcript:"<text>"`
//! and spoken answers are emitted as `simulated-speech:"<text>"`.

mod rate_limit;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, MessageId};
use crate::clock::SharedClock;
use crate::ids::IdGen;

pub use rate_limit::{RateDecision, TokenBucket};

pub const META_VERSION: u32 = 1;
pub const TRANSCRIPT_TAG: &str = "simulated-transcript:";
pub const SPEECH_TAG: &str = "simulated-speech:";

#[derive(Debug, Error)]
pub enum MdieError {
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("channel {0:?} is already registered")]
    DuplicateChannel(String),
    #[error("invalid channel descriptor: {0}")]
    InvalidChannel(String),
    #[error("datagram text is empty")]
    EmptyText,
    #[error("malformed datagram: {0}")]
    Malformed(String),
    #[error("publish rejected: {0}")]
    PublishRejected(#[from] BrokerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Voice,
    Text,
    Api,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Voice => "voice",
            Modality::Text => "text",
            Modality::Api => "api",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub channel_id: String,
    pub modality: Modality,
    pub ingress_topic: String,
    pub egress_topic: String,
    /// Tokens per second.
    pub rate: f64,
    pub burst: u32,
}

impl ChannelDescriptor {
    /// Descriptor with the standard topics and a 5/s, burst 5 limit.
    pub fn new(channel_id: impl Into<String>, modality: Modality) -> Self {
        let channel_id = channel_id.into();
        Self {
            ingress_topic: ingest_topic(modality, &channel_id),
            egress_topic: egress_topic(&channel_id),
            channel_id,
            modality,
            rate: 5.0,
            burst: 5,
        }
    }

    pub fn with_rate(mut self, rate: f64, burst: u32) -> Self {
        self.rate = rate;
        self.burst = burst;
        self
    }

    fn validate(&self) -> Result<(), MdieError> {
        let id = &self.channel_id;
        if id.is_empty() || id.contains(['/', '+', '#']) || id.starts_with('$') {
            return Err(MdieError::InvalidChannel(format!("bad channel id {id:?}")));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(MdieError::InvalidChannel(format!("rate must be > 0, got {}", self.rate)));
        }
        if self.burst < 1 {
            return Err(MdieError::InvalidChannel("burst must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn ingest_topic(modality: Modality, channel_id: &str) -> String {
    format!("ingest/{modality}/{channel_id}")
}

pub fn egress_topic(channel_id: &str) -> String {
    format!("egress/{channel_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInput {
    pub channel_id: String,
    pub body: String,
    pub received_ts: Duration,
    pub principal_hint: Option<String>,
}

impl RawInput {
    pub fn new(channel_id: impl Into<String>, body: impl Into<String>, received_ts: Duration) -> Self {
        Self {
            channel_id: channel_id.into(),
            body: body.into(),
            received_ts,
            principal_hint: None,
        }
    }

    /// Voice input carrying an already-recognised transcript.
    pub fn voice(channel_id: impl Into<String>, transcript: &str, received_ts: Duration) -> Self {
        Self::new(channel_id, tag(TRANSCRIPT_TAG, transcript), received_ts)
    }
}

fn tag(marker: &str, text: &str) -> String {
    let quoted = serde_json::to_string(text).expect("strings always serialize");
    format!("{marker}{quoted}")
}

fn untag(marker: &str, body: &str) -> Option<String> {
    let quoted = body.strip_prefix(marker)?;
    serde_json::from_str::<String>(quoted).ok().or_else(|| Some(quoted.to_string()))
}

/// Channel protocol to text. Voice bodies yield their embedded transcript;
/// everything else passes through untouched.
pub fn transcribe(raw: &RawInput, modality: Modality) -> String {
    match modality {
        Modality::Voice => untag(TRANSCRIPT_TAG, &raw.body).unwrap_or_else(|| raw.body.clone()),
        Modality::Text | Modality::Api => raw.body.clone(),
    }
}

/// The channel-independent record every input is converted to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaDatagram {
    pub version: u32,
    pub trace_id: String,
    pub channel_id: String,
    pub modality: Modality,
    pub text: String,
    pub session_hint: Option<String>,
    pub tenant: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl MetaDatagram {
    /// Canonical serialization: fields in declaration order, no whitespace.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("datagram serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, MdieError> {
        let datagram: Self =
            serde_json::from_str(json).map_err(|e| MdieError::Malformed(e.to_string()))?;
        if datagram.version != META_VERSION {
            return Err(MdieError::Malformed(format!(
                "unsupported version {}",
                datagram.version
            )));
        }
        if datagram.text.is_empty() {
            return Err(MdieError::EmptyText);
        }
        Ok(datagram)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchPlan {
    pub topic: String,
    pub record: String,
}

/// Decides where a datagram goes and in what form.
pub fn journalist_dispatch(datagram: &MetaDatagram) -> DispatchPlan {
    DispatchPlan {
        topic: ingest_topic(datagram.modality, &datagram.channel_id),
        record: datagram.to_json(),
    }
}

/// An answer as published on a channel's egress topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundRecord {
    pub channel_id: String,
    pub modality: Modality,
    /// Rendered for the channel: tagged speech for voice, plain text otherwise.
    pub body: String,
    pub session_id: Option<String>,
    pub trace_id: Option<String>,
}

impl OutboundRecord {
    /// The answer text with any speech tag removed.
    pub fn plain_text(&self) -> String {
        untag(SPEECH_TAG, &self.body).unwrap_or_else(|| self.body.clone())
    }
}

pub fn render_for(modality: Modality, text: &str) -> String {
    match modality {
        Modality::Voice => tag(SPEECH_TAG, text),
        Modality::Text | Modality::Api => text.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestOutcome {
    Dispatched { trace_id: String, message_id: MessageId },
    RateLimited,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 50,
            backoff: Duration::from_millis(5),
        }
    }
}

#[derive(Debug)]
struct ChannelState {
    descriptor: ChannelDescriptor,
    bucket: Mutex<TokenBucket>,
    session: Mutex<Option<String>>,
}

pub struct Mdie {
    broker: Broker,
    clock: SharedClock,
    ids: IdGen,
    tenant: String,
    retry: RetryPolicy,
    channels: RwLock<HashMap<String, Arc<ChannelState>>>,
}

impl fmt::Debug for Mdie {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mdie")
            .field("tenant", &self.tenant)
            .field("channels", &self.channels.read().len())
            .finish()
    }
}

impl Mdie {
    pub fn new(broker: Broker, clock: SharedClock, ids: IdGen, tenant: impl Into<String>) -> Self {
        Self {
            broker,
            clock,
            ids,
            tenant: tenant.into(),
            retry: RetryPolicy::default(),
            channels: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn register_channel(&self, descriptor: ChannelDescriptor) -> Result<(), MdieError> {
        descriptor.validate()?;
        let mut channels = self.channels.write();
        if channels.contains_key(&descriptor.channel_id) {
            return Err(MdieError::DuplicateChannel(descriptor.channel_id));
        }
        let bucket = TokenBucket::new(descriptor.rate, descriptor.burst);
        channels.insert(
            descriptor.channel_id.clone(),
            Arc::new(ChannelState {
                descriptor,
                bucket: Mutex::new(bucket),
                session: Mutex::new(None),
            }),
        );
        Ok(())
    }

    pub fn channel(&self, channel_id: &str) -> Option<ChannelDescriptor> {
        self.state(channel_id).ok().map(|s| s.descriptor.clone())
    }

    fn state(&self, channel_id: &str) -> Result<Arc<ChannelState>, MdieError> {
        self.channels
            .read()
            .get(channel_id)
            .cloned()
            .ok_or_else(|| MdieError::UnknownChannel(channel_id.to_string()))
    }

    pub fn rate_limit_check(&self, channel_id: &str, now: Duration) -> Result<RateDecision, MdieError> {
        Ok(self.state(channel_id)?.bucket.lock().check(now))
    }

    pub fn transcribe(&self, raw: &RawInput) -> Result<String, MdieError> {
        let state = self.state(&raw.channel_id)?;
        Ok(transcribe(raw, state.descriptor.modality))
    }

    pub fn to_meta(&self, text: &str, channel_id: &str, now: Duration) -> Result<MetaDatagram, MdieError> {
        if text.trim().is_empty() {
            return Err(MdieError::EmptyText);
        }
        let state = self.state(channel_id)?;
        let session_hint = state.session.lock().clone();
        Ok(MetaDatagram {
            version: META_VERSION,
            trace_id: self.ids.next("trace"),
            channel_id: channel_id.to_string(),
            modality: state.descriptor.modality,
            text: text.to_string(),
            session_hint,
            tenant: self.tenant.clone(),
            timestamp: now.as_millis() as u64,
        })
    }

    /// Publishes the plan, retrying while the broker refuses transiently.
    pub fn dispatch(&self, plan: &DispatchPlan) -> Result<MessageId, MdieError> {
        let mut attempt = 0;
        loop {
            match self.broker.publish(&plan.topic, plan.record.as_bytes().to_vec()) {
                Ok(id) => return Ok(id),
                Err(BrokerError::Unavailable) if attempt + 1 < self.retry.attempts => {
                    attempt += 1;
                    tracing::debug!(topic = %plan.topic, attempt, "broker refused publish, retrying");
                    thread::sleep(self.retry.backoff * attempt.min(10));
                }
                Err(e) => return Err(MdieError::PublishRejected(e)),
            }
        }
    }

    /// Full ingress path for one raw input.
    pub fn ingest(&self, raw: &RawInput) -> Result<IngestOutcome, MdieError> {
        if self.rate_limit_check(&raw.channel_id, raw.received_ts)? == RateDecision::Deny {
            return Ok(IngestOutcome::RateLimited);
        }
        let text = self.transcribe(raw)?;
        let datagram = self.to_meta(&text, &raw.channel_id, raw.received_ts)?;
        let plan = journalist_dispatch(&datagram);
        let message_id = self.dispatch(&plan)?;
        Ok(IngestOutcome::Dispatched {
            trace_id: datagram.trace_id,
            message_id,
        })
    }

    /// Convenience for callers without their own timestamps.
    pub fn ingest_now(&self, channel_id: &str, body: &str) -> Result<IngestOutcome, MdieError> {
        let state = self.state(channel_id)?;
        let now = self.clock.now();
        let raw = match state.descriptor.modality {
            Modality::Voice => RawInput::voice(channel_id, body, now),
            Modality::Text | Modality::Api => RawInput::new(channel_id, body, now),
        };
        self.ingest(&raw)
    }

    /// Renders `text` for the channel's modality and publishes it on the
    /// channel's egress topic. A session id binds the channel to that
    /// session for subsequent input.
    pub fn render_answer(
        &self,
        text: &str,
        channel_id: &str,
        session_id: Option<&str>,
        trace_id: Option<&str>,
    ) -> Result<OutboundRecord, MdieError> {
        let state = self.state(channel_id)?;
        if let Some(session) = session_id {
            *state.session.lock() = Some(session.to_string());
        }
        let record = OutboundRecord {
            channel_id: channel_id.to_string(),
            modality: state.descriptor.modality,
            body: render_for(state.descriptor.modality, text),
            session_id: session_id.map(str::to_string),
            trace_id: trace_id.map(str::to_string),
        };
        let payload = serde_json::to_vec(&record).expect("record serializes");
        self.broker.publish(&state.descriptor.egress_topic, payload)?;
        Ok(record)
    }

    pub fn bound_session(&self, channel_id: &str) -> Option<String> {
        self.state(channel_id).ok()?.session.lock().clone()
    }

    pub fn bind_session(&self, channel_id: &str, session_id: Option<String>) -> Result<(), MdieError> {
        *self.state(channel_id)?.session.lock() = session_id;
        Ok(())
    }
}
