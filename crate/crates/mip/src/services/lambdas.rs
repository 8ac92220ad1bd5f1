//! Platform lambdas the reasoning ruleset points at.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::auth::{welcome_text, AuthEngine, AuthError, FAILURE_TEXT};
use super::session::SessionManager;
use crate::blockstore::JournalRecord;
use crate::broker::Broker;
use crate::connectivity::{
    AddressSpaceNode, ConnectivityError, ConnectivityService, DeviceSession, NodeValue, OrderStatus, WorkOrder, OEE_NODE,
};
use crate::faas::{Event, LambdaFailure};

pub const AUTHENTICATOR: &str = "authenticator";
pub const OEE_READER: &str = "oee-reader";
pub const VARIABLE_READER: &str = "variable-reader";
pub const WORK_ORDER_DISPATCHER: &str = "work-order-dispatcher";
pub const JOURNAL_WRITER: &str = "journal-writer";
pub const JOURNAL_TOPIC: &str = "journal/session";

fn parse<T: DeserializeOwned>(event: &Event) -> Result<T, LambdaFailure> {
    serde_json::from_value(event.payload.clone()).map_err(|e| LambdaFailure(format!("bad event: {e}")))
}

/// Up to five decimals, trailing zeros trimmed.
pub fn format_number(x: f64) -> String {
    let s = format!("{x:.5}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthenticateEvent {
    pub session: String,
    pub secret: String,
    pub entity: String,
}

pub fn authenticator(
    auth: Arc<AuthEngine>,
    sessions: SessionManager,
) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    move |event| {
        let req: AuthenticateEvent = parse(event)?;
        match auth.authenticate(&req.secret, &req.entity, &req.session) {
            Ok(token) => {
                sessions
                    .attach_principal(&req.session, Some(token.principal.clone()))
                    .map_err(|e| LambdaFailure(e.to_string()))?;
                Ok(json!({
                    "authenticated": true,
                    "principal": token.principal,
                    "token_id": token.token_id,
                    "text": welcome_text(&token.principal),
                }))
            }
            Err(AuthError::Failure) => Ok(json!({ "authenticated": false, "text": FAILURE_TEXT })),
            Err(e) => Err(LambdaFailure(format!("directory-unavailable: {e}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryEvent {
    pub device: String,
    pub variable: String,
}

/// Keeps one device session per device and reopens it when it goes stale.
#[derive(Clone)]
struct Sessions {
    service: Arc<ConnectivityService>,
    open: Arc<Mutex<HashMap<String, DeviceSession>>>,
}

impl Sessions {
    fn new(service: Arc<ConnectivityService>) -> Self {
        Self {
            service,
            open: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    fn with<T>(&self, device: &str, f: impl Fn(&DeviceSession) -> Result<T, ConnectivityError>) -> Result<T, LambdaFailure> {
        let fail = |e: ConnectivityError| LambdaFailure(e.to_string());
        let mut open = self.open.lock();
        let session = match open.get(device) {
            Some(s) => s.clone(),
            None => {
                let s = self.service.connect(device).map_err(fail)?;
                open.insert(device.to_string(), s.clone());
                s
            }
        };
        match f(&session) {
            Err(ConnectivityError::SessionDown(_)) => {
                let s = self.service.connect(device).map_err(fail)?;
                open.insert(device.to_string(), s.clone());
                f(&s).map_err(fail)
            }
            other => other.map_err(fail),
        }
    }
}

pub fn oee_reader(service: Arc<ConnectivityService>) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    let sessions = Sessions::new(service);
    move |event| {
        let req: QueryEvent = parse(event)?;
        let value = sessions.with(&req.device, |s| sessions.service.read_variable(s, OEE_NODE))?;
        let oee = value
            .as_f64()
            .ok_or_else(|| LambdaFailure(format!("{OEE_NODE} is not numeric")))?;
        Ok(json!({
            "device": req.device,
            "variable": "oee",
            "value": oee,
            "text": format!("The OEE of {} is {}.", req.device, format_number(oee)),
        }))
    }
}

pub fn variable_reader(
    service: Arc<ConnectivityService>,
) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    let sessions = Sessions::new(service);
    move |event| {
        let req: QueryEvent = parse(event)?;
        let nodes = sessions.with(&req.device, |s| sessions.service.browse(s))?;
        let node = nodes
            .iter()
            .find(|n| AddressSpaceNode::short_name(&n.node_id).eq_ignore_ascii_case(&req.variable) || n.node_id == req.variable)
            .ok_or_else(|| LambdaFailure(format!("{} has no variable {}", req.device, req.variable)))?;
        let text = match &node.value {
            NodeValue::Number(x) => format_number(*x),
            NodeValue::Text(t) => t.clone(),
        };
        Ok(json!({
            "device": req.device,
            "variable": req.variable,
            "value": node.value,
            "text": format!("The {} of {} is {}.", AddressSpaceNode::short_name(&node.node_id), req.device, text),
        }))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActuateEvent {
    pub device: String,
    pub order_units: u64,
    pub deadline_hours: f64,
}

pub fn order_text(device: &str, order: &WorkOrder) -> String {
    let hours = format_number(order.deadline_hours);
    match order.status {
        OrderStatus::Rejected => format!(
            "Work order rejected ({}): {} units do not fit the capacity of {} units on {device} within {hours} h.",
            order.reject_reason.map(|r| r.to_string()).unwrap_or_default(),
            order.units,
            order.capacity,
        ),
        _ => format!(
            "Work order {} accepted: {} units on {device} within {hours} h (capacity {} units).",
            order.order_id, order.units, order.capacity,
        ),
    }
}

pub fn work_order_dispatcher(
    service: Arc<ConnectivityService>,
) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    let sessions = Sessions::new(service);
    move |event| {
        let req: ActuateEvent = parse(event)?;
        let order = sessions.with(&req.device, |s| {
            sessions
                .service
                .dispatch_work_order(s, req.order_units, req.deadline_hours)
        })?;
        Ok(json!({
            "device": req.device,
            "order": order,
            "text": order_text(&req.device, &order),
        }))
    }
}

/// Hands finished turns to the journal topic.
pub fn journal_writer(broker: Broker) -> impl Fn(&Event) -> Result<Value, LambdaFailure> + Send + Sync + 'static {
    move |event| {
        let record: JournalRecord = parse(event)?;
        record.validate().map_err(|e| LambdaFailure(e.to_string()))?;
        let id = broker
            .publish(JOURNAL_TOPIC, serde_json::to_vec(&record).expect("record serializes"))
            .map_err(|e| LambdaFailure(format!("publish failed: {e}")))?;
        Ok(json!({ "message_id": id.0, "trace_id": record.trace_id }))
    }
}
