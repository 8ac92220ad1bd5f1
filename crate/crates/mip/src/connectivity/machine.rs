use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ConnectivityError;

pub const OEE_NODE: &str = "ns=1;s=OEE";
pub const AVAILABILITY_NODE: &str = "ns=1;s=Availability";
pub const PERFORMANCE_NODE: &str = "ns=1;s=Performance";
pub const QUALITY_NODE: &str = "ns=1;s=Quality";
pub const IDEAL_RATE_NODE: &str = "ns=1;s=IdealRate";
pub const COMMITTED_UNITS_NODE: &str = "ns=1;s=CommittedUnits";
pub const ORDER_QUEUE_NODE: &str = "ns=1;s=OrderQueueLength";

/// Tolerance absorbing representation error before flooring a capacity.
const FLOOR_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeValue {
    Number(f64),
    Text(String),
}

impl NodeValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            NodeValue::Number(n) => Some(*n),
            NodeValue::Text(_) => None,
        }
    }
}

impl fmt::Display for NodeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeValue::Number(n) => write!(f, "{n}"),
            NodeValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Access {
    Read,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressSpaceNode {
    pub node_id: String,
    pub name: String,
    pub value: NodeValue,
    pub access: Access,
}

impl AddressSpaceNode {
    /// `ns=1;s=OEE` -> `OEE`; other shapes are returned unchanged.
    pub fn short_name(node_id: &str) -> &str {
        node_id.rsplit_once(";s=").map_or(node_id, |(_, s)| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderStatus {
    Accepted,
    Rejected,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    NonDispatchable,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NON_DISPATCHABLE")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkOrder {
    pub order_id: String,
    pub units: u64,
    pub deadline_hours: f64,
    pub status: OrderStatus,
    pub reject_reason: Option<RejectReason>,
    /// Units still available in the horizon when the order was evaluated.
    pub capacity: i64,
    /// Business time of the decision, milliseconds since the epoch.
    pub decided_at_ms: u64,
    /// Absolute deadline, milliseconds since the epoch.
    pub due_at_ms: u64,
}

/// Estimated production in a horizon, before commitments are subtracted.
pub trait CapacityModel: Send + Sync + fmt::Debug {
    fn supply(&self, ideal_rate: f64, horizon_hours: f64, oee: f64) -> i64;
}

/// Plans with the OEE rounded to whole percent, as a scheduler would read it
/// off a dashboard.
#[derive(Debug, Clone, Copy)]
pub struct PlanningCapacity {
    pub decimals: u32,
}

impl Default for PlanningCapacity {
    fn default() -> Self {
        Self { decimals: 2 }
    }
}

impl CapacityModel for PlanningCapacity {
    fn supply(&self, ideal_rate: f64, horizon_hours: f64, oee: f64) -> i64 {
        let scale = 10f64.powi(self.decimals as i32);
        let points = (oee * scale).round();
        floor_units(ideal_rate * horizon_hours * points / scale)
    }
}

/// Uses the OEE value as measured.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactCapacity;

impl CapacityModel for ExactCapacity {
    fn supply(&self, ideal_rate: f64, horizon_hours: f64, oee: f64) -> i64 {
        floor_units(ideal_rate * horizon_hours * oee)
    }
}

fn floor_units(x: f64) -> i64 {
    (x + FLOOR_EPSILON).floor() as i64
}

fn default_ideal_rate() -> f64 {
    20.0
}

fn default_address() -> String {
    "opc.tcp://localhost:4840".into()
}

/// Machine configuration as loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub device_id: String,
    #[serde(default)]
    pub name: Option<String>,
    pub availability: f64,
    pub performance: f64,
    pub quality: f64,
    #[serde(default = "default_ideal_rate")]
    pub ideal_rate: f64,
    #[serde(default)]
    pub connection_model: super::ConnectionModel,
    #[serde(default = "default_address")]
    pub address: String,
    /// Additional nodes beyond the built-in ones.
    #[serde(default)]
    pub nodes: Vec<AddressSpaceNode>,
}

impl MachineConfig {
    pub fn new(device_id: impl Into<String>, availability: f64, performance: f64, quality: f64) -> Self {
        Self {
            device_id: device_id.into(),
            name: None,
            availability,
            performance,
            quality,
            ideal_rate: default_ideal_rate(),
            connection_model: super::ConnectionModel::default(),
            address: default_address(),
            nodes: Vec::new(),
        }
    }

    pub fn with_ideal_rate(mut self, rate: f64) -> Self {
        self.ideal_rate = rate;
        self
    }

    pub fn from_json(json: &str) -> Result<Self, ConnectivityError> {
        let config: Self = serde_json::from_str(json).map_err(|e| ConnectivityError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConnectivityError> {
        if self.device_id.is_empty() {
            return Err(ConnectivityError::Config("empty device_id".into()));
        }
        for (name, v) in [
            ("availability", self.availability),
            ("performance", self.performance),
            ("quality", self.quality),
        ] {
            check_factor(name, v).map_err(|e| ConnectivityError::Config(e.to_string()))?;
        }
        if !(self.ideal_rate.is_finite() && self.ideal_rate > 0.0) {
            return Err(ConnectivityError::Config(format!("ideal_rate {} must be > 0", self.ideal_rate)));
        }
        Ok(())
    }
}

fn check_factor(name: &str, v: f64) -> Result<(), ConnectivityError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConnectivityError::InvalidArgs(format!("{name} {v} outside [0, 1]")))
    }
}

/// Simulated machine state behind the address space.
#[derive(Debug)]
pub struct MachineSim {
    pub availability: f64,
    pub performance: f64,
    pub quality: f64,
    pub ideal_rate: f64,
    custom: BTreeMap<String, AddressSpaceNode>,
    orders: Vec<WorkOrder>,
}

impl MachineSim {
    pub fn new(config: &MachineConfig) -> Self {
        let mut custom = BTreeMap::new();
        if let Some(name) = &config.name {
            custom.insert(
                "ns=1;s=Name".to_string(),
                AddressSpaceNode {
                    node_id: "ns=1;s=Name".into(),
                    name: "Name".into(),
                    value: NodeValue::Text(name.clone()),
                    access: Access::Read,
                },
            );
        }
        for node in &config.nodes {
            custom.insert(node.node_id.clone(), node.clone());
        }
        Self {
            availability: config.availability,
            performance: config.performance,
            quality: config.quality,
            ideal_rate: config.ideal_rate,
            custom,
            orders: Vec::new(),
        }
    }

    pub fn oee(&self) -> f64 {
        self.availability * self.performance * self.quality
    }

    pub fn orders(&self) -> &[WorkOrder] {
        &self.orders
    }

    fn open_orders(&self) -> impl Iterator<Item = &WorkOrder> {
        self.orders.iter().filter(|o| o.status == OrderStatus::Accepted)
    }

    pub fn committed_units(&self) -> u64 {
        self.open_orders().map(|o| o.units).sum()
    }

    pub fn node_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = [
            OEE_NODE,
            AVAILABILITY_NODE,
            PERFORMANCE_NODE,
            QUALITY_NODE,
            IDEAL_RATE_NODE,
            COMMITTED_UNITS_NODE,
            ORDER_QUEUE_NODE,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        ids.extend(self.custom.keys().cloned());
        ids
    }

    pub fn node(&self, node_id: &str) -> Result<AddressSpaceNode, ConnectivityError> {
        let builtin = |value: f64, access| AddressSpaceNode {
            node_id: node_id.to_string(),
            name: AddressSpaceNode::short_name(node_id).to_string(),
            value: NodeValue::Number(value),
            access,
        };
        Ok(match node_id {
            OEE_NODE => builtin(self.oee(), Access::Read),
            AVAILABILITY_NODE => builtin(self.availability, Access::ReadWrite),
            PERFORMANCE_NODE => builtin(self.performance, Access::ReadWrite),
            QUALITY_NODE => builtin(self.quality, Access::ReadWrite),
            IDEAL_RATE_NODE => builtin(self.ideal_rate, Access::Read),
            COMMITTED_UNITS_NODE => builtin(self.committed_units() as f64, Access::Read),
            ORDER_QUEUE_NODE => builtin(self.open_orders().count() as f64, Access::Read),
            other => self
                .custom
                .get(other)
                .cloned()
                .ok_or_else(|| ConnectivityError::UnknownNode(other.to_string()))?,
        })
    }

    pub fn write(&mut self, node_id: &str, value: NodeValue) -> Result<(), ConnectivityError> {
        let node = self.node(node_id)?;
        if node.access != Access::ReadWrite {
            return Err(ConnectivityError::ReadOnly(node_id.to_string()));
        }
        let factor = match node_id {
            AVAILABILITY_NODE => Some(&mut self.availability),
            PERFORMANCE_NODE => Some(&mut self.performance),
            QUALITY_NODE => Some(&mut self.quality),
            _ => None,
        };
        match factor {
            Some(slot) => {
                let v = value
                    .as_f64()
                    .ok_or_else(|| ConnectivityError::InvalidArgs(format!("{node_id} expects a number")))?;
                check_factor(node_id, v)?;
                *slot = v;
            }
            None => {
                let node = self.custom.get_mut(node_id).expect("node resolved above");
                node.value = value;
            }
        }
        Ok(())
    }

    /// Earliest-deadline-first feasibility: for every deadline at or after
    /// the new one, demand due by then must fit the supply up to then.
    pub fn dispatch(
        &mut self,
        model: &dyn CapacityModel,
        order_id: String,
        units: u64,
        deadline_hours: f64,
        now: Duration,
    ) -> Result<WorkOrder, ConnectivityError> {
        if units == 0 {
            return Err(ConnectivityError::InvalidArgs("units must be >= 1".into()));
        }
        if !(deadline_hours.is_finite() && deadline_hours > 0.0) {
            return Err(ConnectivityError::InvalidArgs(format!(
                "deadline_hours {deadline_hours} must be > 0"
            )));
        }
        let now_ms = now.as_millis() as u64;
        let due_at_ms = now_ms + (deadline_hours * 3_600_000.0).round() as u64;
        let oee = self.oee();
        let supply_until = |due: u64| {
            let hours = due.saturating_sub(now_ms) as f64 / 3_600_000.0;
            model.supply(self.ideal_rate, hours, oee)
        };
        let demand_until = |due: u64| -> i64 {
            self.open_orders()
                .filter(|o| o.due_at_ms <= due)
                .map(|o| o.units as i64)
                .sum()
        };
        let capacity = model.supply(self.ideal_rate, deadline_hours, oee) - demand_until(due_at_ms);
        let later_fit = self
            .open_orders()
            .filter(|o| o.due_at_ms > due_at_ms)
            .all(|o| demand_until(o.due_at_ms) + units as i64 <= supply_until(o.due_at_ms));
        let accepted = units as i64 <= capacity && later_fit;
        let order = WorkOrder {
            order_id,
            units,
            deadline_hours,
            status: if accepted { OrderStatus::Accepted } else { OrderStatus::Rejected },
            reject_reason: (!accepted).then_some(RejectReason::NonDispatchable),
            capacity,
            decided_at_ms: now_ms,
            due_at_ms,
        };
        self.orders.push(order.clone());
        Ok(order)
    }

    pub fn complete(&mut self, order_id: &str) -> Result<WorkOrder, ConnectivityError> {
        let order = self
            .orders
            .iter_mut()
            .find(|o| o.order_id == order_id && o.status == OrderStatus::Accepted)
            .ok_or_else(|| ConnectivityError::UnknownOrder(order_id.to_string()))?;
        order.status = OrderStatus::Completed;
        Ok(order.clone())
    }
}
