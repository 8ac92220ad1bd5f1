use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Event, LambdaFailure};
use crate::broker::Broker;
use crate::mdie::Mdie;

pub const ANSWERING_LOGIC: &str = "answering-logic";
pub const HTTP_REST: &str = "http-rest";
const DEAD_EGRESS: &str = "$dead/egress";

/// Resolves the channel a session was opened on.
pub trait SessionChannels: Send + Sync {
    fn channel_of(&self, session_id: &str) -> Option<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEvent {
    pub session: String,
    pub text: String,
    #[serde(default)]
    pub trace_id: Option<String>,
}

fn parse<T: serde::de::DeserializeOwned>(event: &Event) -> Result<T, LambdaFailure> {
    serde_json::from_value(event.payload.clone()).map_err(|e| LambdaFailure(format!("bad event: {e}")))
}

/// Returns answers to the channel the session came from, rendered for that
/// channel's modality. Answers for unknown sessions go to `$dead/egress`.
pub fn answering_logic(
    mdie: Arc<Mdie>,
    sessions: Arc<dyn SessionChannels>,
    broker: Broker,
) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    move |event| {
        let answer: AnswerEvent = parse(event)?;
        let Some(channel) = sessions.channel_of(&answer.session) else {
            let _ = broker.publish(DEAD_EGRESS, serde_json::to_vec(&answer).expect("answer serializes"));
            return Err(LambdaFailure(format!("unknown session {}", answer.session)));
        };
        let record = mdie
            .render_answer(&answer.text, &channel, Some(&answer.session), answer.trace_id.as_deref())
            .map_err(|e| LambdaFailure(e.to_string()))?;
        Ok(serde_json::to_value(record).expect("record serializes"))
    }
}

/// A programmed HTTP request bound to one micro-operation kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRestBinding {
    /// Micro-operation kind, e.g. `ACTUATE`.
    pub bind: String,
    pub method: String,
    pub url: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    2_000
}

impl HttpRestBinding {
    pub fn applies_to(&self, op_kind: &str) -> bool {
        self.bind.eq_ignore_ascii_case(op_kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRestEvent {
    #[serde(flatten)]
    pub binding: HttpRestBinding,
    /// Kind of the decision that fired this event.
    #[serde(default)]
    pub op: Option<String>,
    /// Where the response gets attached.
    #[serde(default)]
    pub decision_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponseRecord {
    pub status: u16,
    pub body: String,
}

/// Receives responses for the decisions that triggered them.
pub trait ResponseSink: Send + Sync {
    fn attach(&self, decision_key: &str, response: &HttpResponseRecord);
}

/// Generic programmable HTTP request. Network failures and timeouts fail
/// the invocation; any HTTP status counts as a response.
pub fn http_rest(
    sink: Option<Arc<dyn ResponseSink>>,
) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    move |event| {
        let request: HttpRestEvent = parse(event)?;
        let binding = &request.binding;
        if let Some(op) = &request.op {
            if !binding.applies_to(op) {
                return Err(LambdaFailure(format!("binding is for {}, not {op}", binding.bind)));
            }
        }
        let response = perform(binding)?;
        if let (Some(sink), Some(key)) = (&sink, &request.decision_key) {
            sink.attach(key, &response);
        }
        Ok(serde_json::to_value(response).expect("record serializes"))
    }
}

fn perform(binding: &HttpRestBinding) -> Result<HttpResponseRecord, LambdaFailure> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(binding.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut builder = ureq::http::Request::builder()
        .method(binding.method.to_ascii_uppercase().as_str())
        .uri(binding.url.as_str());
    for (k, v) in &binding.headers {
        builder = builder.header(k.as_str(), v.as_str());
    }
    let request = builder
        .body(binding.body.clone().unwrap_or_default())
        .map_err(|e| LambdaFailure(format!("invalid request: {e}")))?;
    let mut response = agent.run(request).map_err(|e| match e {
        ureq::Error::Timeout(_) => LambdaFailure(format!("timeout: {e}")),
        other => LambdaFailure(format!("network-error: {other}")),
    })?;
    let status = response.status().as_u16();
    let body = response
        .body_mut()
        .read_to_string()
        .map_err(|e| LambdaFailure(format!("network-error: {e}")))?;
    Ok(HttpResponseRecord { status, body })
}
