//! Connectivity Service: protocol mediation towards persistent-connection
//! devices and a simulated machine with an OPC-UA shaped address space.

mod machine;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError};
use crate::clock::SharedClock;
use crate::ids::IdGen;

pub use machine::{
    Access, AddressSpaceNode, CapacityModel, ExactCapacity, MachineConfig, MachineSim, NodeValue,
    OrderStatus, PlanningCapacity, RejectReason, WorkOrder, AVAILABILITY_NODE, COMMITTED_UNITS_NODE,
    IDEAL_RATE_NODE, OEE_NODE, ORDER_QUEUE_NODE, PERFORMANCE_NODE, QUALITY_NODE,
};

#[derive(Debug, Error)]
pub enum ConnectivityError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {0} already registered")]
    DuplicateDevice(String),
    #[error("connection to {0} refused")]
    ConnectRefused(String),
    #[error("session to {0} is down")]
    SessionDown(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is read-only")]
    ReadOnly(String),
    #[error("unknown open order {0}")]
    UnknownOrder(String),
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("invalid machine configuration: {0}")]
    Config(String),
    #[error("export publish failed: {0}")]
    Publish(#[from] BrokerError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    SimulatedOpcua,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectionModel {
    #[default]
    Persistent,
    EventDriven,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEndpoint {
    pub device_id: String,
    pub protocol: Protocol,
    pub connection_model: ConnectionModel,
    pub address: String,
}

/// Reconnect attempts after a dropped link; the delay doubles each try.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub attempts: u32,
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            attempts: 5,
            initial: Duration::from_millis(5),
            max: Duration::from_millis(100),
        }
    }
}

impl Backoff {
    /// Worst-case time spent sleeping before giving up.
    pub fn bound(&self) -> Duration {
        (0..self.attempts).map(|i| self.delay(i)).sum()
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.initial.saturating_mul(1 << attempt.min(16)).min(self.max)
    }
}

/// Value-change event published for exported nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub device_id: String,
    pub node_id: String,
    pub value: NodeValue,
    pub ts_ms: u64,
}

pub fn export_topic(device_id: &str, node_id: &str) -> String {
    format!("device/{device_id}/{}", AddressSpaceNode::short_name(node_id))
}

#[derive(Debug, Default)]
struct Link {
    up: bool,
    epoch: u64,
    sessions: HashSet<u64>,
    refuse_connects: u32,
    reconnects: u64,
    /// node id -> sessions exporting it
    exports: HashMap<String, BTreeSet<u64>>,
}

#[derive(Debug)]
struct Device {
    endpoint: DeviceEndpoint,
    // Lock order: link before machine.
    link: Mutex<Link>,
    machine: Mutex<MachineSim>,
}

/// Handle to a live device session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSession {
    id: u64,
    device_id: String,
}

impl DeviceSession {
    pub fn device_id(&self) -> &str {
        &self.device_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkStatus {
    pub up: bool,
    pub epoch: u64,
    pub sessions: usize,
    pub reconnects: u64,
}

pub struct ConnectivityService {
    devices: RwLock<HashMap<String, Arc<Device>>>,
    broker: Broker,
    clock: SharedClock,
    ids: IdGen,
    model: Box<dyn CapacityModel>,
    backoff: Backoff,
    next_session: AtomicU64,
}

impl fmt::Debug for ConnectivityService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConnectivityService")
            .field("devices", &self.devices.read().keys().collect::<Vec<_>>())
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl ConnectivityService {
    pub fn new(broker: Broker, clock: SharedClock, ids: IdGen) -> Self {
        Self {
            devices: RwLock::new(HashMap::new()),
            broker,
            clock,
            ids,
            model: Box::new(PlanningCapacity::default()),
            backoff: Backoff::default(),
            next_session: AtomicU64::new(0),
        }
    }

    pub fn with_capacity_model(mut self, model: Box<dyn CapacityModel>) -> Self {
        self.model = model;
        self
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn register(&self, config: &MachineConfig) -> Result<DeviceEndpoint, ConnectivityError> {
        config.validate()?;
        let mut devices = self.devices.write();
        if devices.contains_key(&config.device_id) {
            return Err(ConnectivityError::DuplicateDevice(config.device_id.clone()));
        }
        let endpoint = DeviceEndpoint {
            device_id: config.device_id.clone(),
            protocol: Protocol::SimulatedOpcua,
            connection_model: config.connection_model,
            address: config.address.clone(),
        };
        devices.insert(
            config.device_id.clone(),
            Arc::new(Device {
                endpoint: endpoint.clone(),
                link: Mutex::new(Link::default()),
                machine: Mutex::new(MachineSim::new(config)),
            }),
        );
        Ok(endpoint)
    }

    pub fn devices(&self) -> Vec<DeviceEndpoint> {
        let mut out: Vec<_> = self.devices.read().values().map(|d| d.endpoint.clone()).collect();
        out.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        out
    }

    fn device(&self, device_id: &str) -> Result<Arc<Device>, ConnectivityError> {
        self.devices
            .read()
            .get(device_id)
            .cloned()
            .ok_or_else(|| ConnectivityError::UnknownDevice(device_id.to_string()))
    }

    pub fn connect(&self, device_id: &str) -> Result<DeviceSession, ConnectivityError> {
        let device = self.device(device_id)?;
        let mut link = device.link.lock();
        if !link.up {
            if link.refuse_connects > 0 {
                link.refuse_connects -= 1;
                return Err(ConnectivityError::ConnectRefused(device_id.to_string()));
            }
            link.up = true;
            link.epoch += 1;
        }
        let id = self.next_session.fetch_add(1, Ordering::Relaxed) + 1;
        link.sessions.insert(id);
        Ok(DeviceSession {
            id,
            device_id: device_id.to_string(),
        })
    }

    pub fn disconnect(&self, session: &DeviceSession) -> Result<(), ConnectivityError> {
        let device = self.device(&session.device_id)?;
        let mut link = device.link.lock();
        link.sessions.remove(&session.id);
        for holders in link.exports.values_mut() {
            holders.remove(&session.id);
        }
        link.exports.retain(|_, h| !h.is_empty());
        if link.sessions.is_empty() {
            link.up = false;
        }
        Ok(())
    }

    /// Checks the session and re-establishes a dropped link with backoff.
    /// Holding the link lock for the whole command serializes commands per
    /// device.
    fn with_session<T>(
        &self,
        session: &DeviceSession,
        f: impl FnOnce(&mut Link, &mut MachineSim) -> Result<T, ConnectivityError>,
    ) -> Result<T, ConnectivityError> {
        let device = self.device(&session.device_id)?;
        let mut link = device.link.lock();
        if !link.sessions.contains(&session.id) {
            return Err(ConnectivityError::SessionDown(session.device_id.clone()));
        }
        let mut attempt = 0;
        while !link.up {
            if link.refuse_connects == 0 {
                link.up = true;
                link.epoch += 1;
                link.reconnects += 1;
                tracing::debug!(device = %session.device_id, epoch = link.epoch, "link re-established");
                break;
            }
            link.refuse_connects -= 1;
            if attempt + 1 >= self.backoff.attempts {
                return Err(ConnectivityError::SessionDown(session.device_id.clone()));
            }
            let delay = self.backoff.delay(attempt);
            attempt += 1;
            parking_lot::MutexGuard::unlocked(&mut link, || thread::sleep(delay));
        }
        let mut machine = device.machine.lock();
        f(&mut link, &mut machine)
    }

    pub fn read_variable(&self, session: &DeviceSession, node_id: &str) -> Result<NodeValue, ConnectivityError> {
        self.with_session(session, |_, m| m.node(node_id).map(|n| n.value))
    }

    pub fn browse(&self, session: &DeviceSession) -> Result<Vec<AddressSpaceNode>, ConnectivityError> {
        self.with_session(session, |_, m| m.node_ids().iter().map(|id| m.node(id)).collect())
    }

    pub fn write_variable(
        &self,
        session: &DeviceSession,
        node_id: &str,
        value: NodeValue,
    ) -> Result<(), ConnectivityError> {
        let events = self.with_session(session, |link, m| mutate(link, m, |m| m.write(node_id, value)))?;
        self.publish_changes(&session.device_id, events)
    }

    /// Simulator-side mutation (the machine itself changing), bypassing
    /// sessions. Exported nodes still emit change events while the link is up.
    pub fn set_node(&self, device_id: &str, node_id: &str, value: NodeValue) -> Result<(), ConnectivityError> {
        let device = self.device(device_id)?;
        let events = {
            let mut link = device.link.lock();
            let mut machine = device.machine.lock();
            mutate(&mut link, &mut machine, |m| m.write(node_id, value))?
        };
        self.publish_changes(device_id, events)
    }

    pub fn dispatch_work_order(
        &self,
        session: &DeviceSession,
        units: u64,
        deadline_hours: f64,
    ) -> Result<WorkOrder, ConnectivityError> {
        let now = self.clock.now();
        let order_id = self.ids.next("wo");
        let model = self.model.as_ref();
        let (order, events) = self.with_session(session, |link, m| {
            let mut order = None;
            let events = mutate(link, m, |m| {
                order = Some(m.dispatch(model, order_id, units, deadline_hours, now)?);
                Ok(())
            })?;
            Ok((order.expect("dispatch ran"), events))
        })?;
        self.publish_changes(&session.device_id, events)?;
        Ok(order)
    }

    pub fn complete_order(&self, session: &DeviceSession, order_id: &str) -> Result<WorkOrder, ConnectivityError> {
        let mut done = None;
        let events = self.with_session(session, |link, m| {
            mutate(link, m, |m| {
                done = Some(m.complete(order_id)?);
                Ok(())
            })
        })?;
        self.publish_changes(&session.device_id, events)?;
        Ok(done.expect("completion ran"))
    }

    pub fn orders(&self, device_id: &str) -> Result<Vec<WorkOrder>, ConnectivityError> {
        Ok(self.device(device_id)?.machine.lock().orders().to_vec())
    }

    /// Starts exporting value changes of `node_id` on
    /// `device/<device_id>/<name>` for as long as the session lives.
    pub fn export_event(&self, session: &DeviceSession, node_id: &str) -> Result<String, ConnectivityError> {
        self.with_session(session, |link, m| {
            m.node(node_id)?;
            link.exports.entry(node_id.to_string()).or_default().insert(session.id);
            Ok(export_topic(&session.device_id, node_id))
        })
    }

    fn publish_changes(&self, device_id: &str, events: Vec<(String, NodeValue)>) -> Result<(), ConnectivityError> {
        let ts_ms = self.clock.now_ms();
        for (node_id, value) in events {
            let topic = export_topic(device_id, &node_id);
            let event = ChangeEvent {
                device_id: device_id.to_string(),
                node_id,
                value,
                ts_ms,
            };
            self.broker
                .publish(&topic, serde_json::to_vec(&event).expect("event serializes"))?;
        }
        Ok(())
    }

    pub fn link_status(&self, device_id: &str) -> Result<LinkStatus, ConnectivityError> {
        let device = self.device(device_id)?;
        let link = device.link.lock();
        Ok(LinkStatus {
            up: link.up,
            epoch: link.epoch,
            sessions: link.sessions.len(),
            reconnects: link.reconnects,
        })
    }

    /// Fault hook: the next `n` connection attempts are refused.
    pub fn refuse_connects(&self, device_id: &str, n: u32) -> Result<(), ConnectivityError> {
        self.device(device_id)?.link.lock().refuse_connects = n;
        Ok(())
    }

    /// Fault hook: drops the link; sessions reconnect on their next command.
    pub fn drop_link(&self, device_id: &str) -> Result<(), ConnectivityError> {
        self.device(device_id)?.link.lock().up = false;
        Ok(())
    }

    pub fn backoff(&self) -> Backoff {
        self.backoff
    }
}

/// Applies `f` and returns (node id, value) pairs for exported nodes whose
/// value changed.
fn mutate(
    link: &mut Link,
    machine: &mut MachineSim,
    f: impl FnOnce(&mut MachineSim) -> Result<(), ConnectivityError>,
) -> Result<Vec<(String, NodeValue)>, ConnectivityError> {
    let watched: Vec<String> = link.exports.keys().cloned().collect();
    let before: Vec<Option<NodeValue>> = watched.iter().map(|id| machine.node(id).ok().map(|n| n.value)).collect();
    f(machine)?;
    if !link.up {
        return Ok(Vec::new());
    }
    Ok(watched
        .iter()
        .zip(before)
        .filter_map(|(id, old)| {
            let new = machine.node(id).ok()?.value;
            (old.as_ref() != Some(&new)).then(|| (id.clone(), new))
        })
        .collect())
}
