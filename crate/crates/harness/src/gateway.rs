//! WebSocket/HTTP front door used by external channels and the console.
//!
//! - `GET /channel/{id}` upgrades to a WebSocket. Client frames are
//!   `{"text": "..."}`; server frames are
//!   `{"reply": "...", "session": "...", "modality": "...", "trace_id": "...", "turn": n}`
//!   or `{"error": "..."}`.
//! - `GET /metrics`, `GET /sessions/{id}`, `POST /chaos`.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mip::broker::SubscriptionId;
use mip::mdie::{ChannelDescriptor, Modality};
use mip::platform::{Exchange, Platform, PlatformError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub struct GatewayState {
    platform: Arc<Platform>,
    /// Core consumers in start order; `core-1` is the first.
    core_members: Vec<SubscriptionId>,
    reply_timeout: Duration,
}

impl GatewayState {
    pub fn new(platform: Arc<Platform>) -> Self {
        let mut core_members = platform.core_members();
        core_members.sort();
        Self {
            platform,
            core_members,
            reply_timeout: Duration::from_secs(10),
        }
    }

    pub fn with_reply_timeout(mut self, timeout: Duration) -> Self {
        self.reply_timeout = timeout;
        self
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    fn consumer_names(&self) -> Vec<String> {
        let live = self.platform.core_members();
        self.core_members
            .iter()
            .enumerate()
            .filter(|(_, m)| live.contains(m))
            .map(|(i, _)| format!("core-{}", i + 1))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct ClientFrame {
    text: String,
}

#[derive(Debug, Serialize)]
struct ReplyFrame {
    reply: String,
    session: String,
    modality: String,
    trace_id: String,
    turn: u64,
}

impl From<&Exchange> for ReplyFrame {
    fn from(x: &Exchange) -> Self {
        Self {
            reply: x.reply.plain_text(),
            session: x.turn.session_id.clone(),
            modality: x.reply.modality.as_str().to_string(),
            trace_id: x.trace_id.clone(),
            turn: x.turn.turn,
        }
    }
}

pub fn router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/channel/{id}", get(channel))
        .route("/metrics", get(metrics))
        .route("/sessions/{id}", get(session))
        .route("/chaos", post(chaos))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<GatewayState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn channel(ws: WebSocketUpgrade, Path(id): Path<String>, State(state): State<Arc<GatewayState>>) -> Response {
    let mdie = state.platform.mdie();
    if mdie.channel(&id).is_none() {
        if let Err(e) = mdie.register_channel(ChannelDescriptor::new(id.clone(), Modality::Text)) {
            return error(StatusCode::BAD_REQUEST, e.to_string());
        }
    }
    ws.on_upgrade(move |socket| converse(socket, id, state))
}

async fn converse(mut socket: WebSocket, channel: String, state: Arc<GatewayState>) {
    while let Some(Ok(message)) = socket.recv().await {
        let text = match message {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let frame = match serde_json::from_str::<ClientFrame>(&text) {
            Ok(f) => {
                let (platform, channel, timeout) = (state.platform.clone(), channel.clone(), state.reply_timeout);
                let said = tokio::task::spawn_blocking(move || platform.say(&channel, &f.text, timeout)).await;
                match said {
                    Ok(Ok(x)) => serde_json::to_value(ReplyFrame::from(&x)).expect("frame serializes"),
                    Ok(Err(PlatformError::Timeout(what))) => json!({ "error": format!("no reply: {what}") }),
                    Ok(Err(e)) => json!({ "error": e.to_string() }),
                    Err(e) => json!({ "error": e.to_string() }),
                }
            }
            Err(e) => json!({ "error": format!("expected {{\"text\": ...}}: {e}") }),
        };
        if socket.send(Message::Text(frame.to_string().into())).await.is_err() {
            break;
        }
    }
}

async fn metrics(State(state): State<Arc<GatewayState>>) -> Json<Value> {
    let p = &state.platform;
    let broker = p.broker().stats();
    Json(json!({
        "broker": broker,
        "redelivered": broker.redelivered,
        "dead_letters": broker.dead_lettered,
        "core": p.core().metrics(),
        "core_consumers": state.consumer_names(),
        "lambdas": p.faas().benchmark_all(),
        "journal_lines": p.journal().len().unwrap_or(0),
    }))
}

async fn session(Path(id): Path<String>, State(state): State<Arc<GatewayState>>) -> Response {
    let core = state.platform.core();
    match core.sessions().get(&id) {
        Ok(s) => {
            let token = core.auth().valid_token(&id);
            let mut body = serde_json::to_value(&s).expect("session serializes");
            body["authenticated"] = json!(token.is_some());
            body["context"] = serde_json::to_value(core.contexts().frame(&id).unwrap_or_default())
                .expect("frame serializes");
            Json(body).into_response()
        }
        Err(e) => error(StatusCode::NOT_FOUND, e.to_string()),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosRequest {
    /// `core-N`, 1-based in start order.
    #[serde(default)]
    pub kill_consumer: Option<String>,
    #[serde(default)]
    pub ack_drop: Option<f64>,
    #[serde(default)]
    pub kill_datanode: Option<String>,
    #[serde(default)]
    pub revive_datanode: Option<String>,
    #[serde(default)]
    pub directory_down: Option<bool>,
}

async fn chaos(State(state): State<Arc<GatewayState>>, Json(req): Json<ChaosRequest>) -> Response {
    let p = &state.platform;
    let mut applied = Vec::new();
    if let Some(prob) = req.ack_drop {
        if !(0.0..=1.0).contains(&prob) {
            return error(StatusCode::BAD_REQUEST, format!("ack_drop {prob} outside [0, 1]"));
        }
        p.broker().set_ack_drop(prob, 0);
        applied.push(format!("ack_drop={prob}"));
    }
    if let Some(name) = &req.kill_consumer {
        let member = name
            .strip_prefix("core-")
            .and_then(|n| n.parse::<usize>().ok())
            .and_then(|n| n.checked_sub(1))
            .and_then(|i| state.core_members.get(i));
        match member {
            Some(&m) if p.kill_core_worker(m) => applied.push(format!("killed {name}")),
            _ => return error(StatusCode::BAD_REQUEST, format!("no live consumer {name}")),
        }
    }
    for (node, alive) in [(&req.kill_datanode, false), (&req.revive_datanode, true)] {
        if let Some(node) = node {
            if let Err(e) = p.blockstore().set_node_alive(node, alive) {
                return error(StatusCode::BAD_REQUEST, e.to_string());
            }
            applied.push(format!("{node} alive={alive}"));
        }
    }
    if let Some(down) = req.directory_down {
        p.core().auth().set_directory_down(down);
        applied.push(format!("directory_down={down}"));
    }
    Json(json!({ "applied": applied, "core_consumers": state.consumer_names() })).into_response()
}
