use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, Utc};
use mip::connectivity::MachineConfig;
use mip::mdie::{ChannelDescriptor, Modality};
use mip::services::Directory;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub channel_id: String,
    pub modality: Modality,
}

/// One scripted user turn. Exactly one of `utterance` and `api_body` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub channel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<String>,
    /// Sent as its compact JSON text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_body: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_intent: Option<String>,
    /// Regular expression the reply must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_reply: Option<String>,
}

impl Step {
    pub fn text(&self) -> String {
        match (&self.utterance, &self.api_body) {
            (Some(u), _) => u.clone(),
            (None, Some(body)) => body.to_string(),
            (None, None) => String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Chaos {
    #[serde(default)]
    pub ack_drop_prob: f64,
    /// 1-based step before which one core consumer is removed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kill_consumer_at_step: Option<usize>,
    /// 1-based step before which one data node is killed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kill_datanode_at_step: Option<usize>,
}

impl Chaos {
    pub fn is_quiet(&self) -> bool {
        self.ack_drop_prob == 0.0 && self.kill_consumer_at_step.is_none() && self.kill_datanode_at_step.is_none()
    }
}

fn default_seed() -> u64 {
    7
}

fn default_advance_ms() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// RFC 3339 start of the business clock.
    pub fixed_clock_start: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub machine: MachineConfig,
    /// Builtin directory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<Directory>,
    /// Extra channels; web01 (text), voice01 (voice) and api01 (api) always exist.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelSpec>,
    /// Business time added before every step after the first.
    #[serde(default = "default_advance_ms")]
    pub step_advance_ms: u64,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub chaos: Chaos,
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Self, HarnessError> {
        let scenario: Self = serde_json::from_str(json).map_err(|e| HarnessError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn clock_start(&self) -> Result<Duration, HarnessError> {
        let t: DateTime<Utc> = DateTime::parse_from_rfc3339(&self.fixed_clock_start)
            .map_err(|e| HarnessError::Scenario(format!("fixed_clock_start: {e}")))?
            .with_timezone(&Utc);
        let ms = u64::try_from(t.timestamp_millis())
            .map_err(|_| HarnessError::Scenario("fixed_clock_start before 1970".into()))?;
        Ok(Duration::from_millis(ms))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Scenario(m));
        if self.steps.is_empty() {
            return bad("steps must not be empty".into());
        }
        let p = self.chaos.ack_drop_prob;
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("ack_drop_prob {p} outside [0, 1]"));
        }
        for (name, at) in [
            ("kill_consumer_at_step", self.chaos.kill_consumer_at_step),
            ("kill_datanode_at_step", self.chaos.kill_datanode_at_step),
        ] {
            if let Some(k) = at {
                if k == 0 || k > self.steps.len() {
                    return bad(format!("{name} {k} outside 1..={}", self.steps.len()));
                }
            }
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.utterance.is_some() == step.api_body.is_some() {
                return bad(format!("step {} needs exactly one of utterance and api_body", i + 1));
            }
            if let Some(re) = &step.expect_reply {
                regex::Regex::new(re).map_err(|e| HarnessError::Scenario(format!("step {}: {e}", i + 1)))?;
            }
        }
        self.machine
            .validate()
            .map_err(|e| HarnessError::Scenario(format!("machine: {e}")))?;
        self.clock_start()?;
        Ok(())
    }

    pub fn channel_descriptors(&self) -> Vec<ChannelDescriptor> {
        let mut out = vec![
            ChannelDescriptor::new("web01", Modality::Text),
            ChannelDescriptor::new("voice01", Modality::Voice),
            ChannelDescriptor::new("api01", Modality::Api),
        ];
        let extra = self
            .channels
            .iter()
            .map(|c| (c.channel_id.clone(), c.modality))
            .chain(self.steps.iter().map(|s| (s.channel.clone(), Modality::Text)));
        for (id, modality) in extra {
            if !out.iter().any(|c| c.channel_id == id) {
                out.push(ChannelDescriptor::new(id, modality));
            }
        }
        out
    }
}
