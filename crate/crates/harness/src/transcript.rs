use mip::broker::BrokerStats;
use mip::faas::BenchmarkRecord;
use mip::services::{CoreMetricsSnapshot, Decision, Gate, OpKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub seq: usize,
    pub kind: OpKind,
    pub function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<Gate>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub suppressed: bool,
}

impl From<&Decision> for DecisionSummary {
    fn from(d: &Decision) -> Self {
        Self {
            seq: d.seq,
            kind: d.op.kind(),
            function: d.function.clone(),
            gate: d.gate,
            suppressed: d.suppressed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latencies {
    /// Ingest to answered and completed turn, real time.
    pub turn_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub channel: String,
    pub request: String,
    pub trace_id: String,
    pub session_id: String,
    pub turn: u64,
    pub engine: String,
    pub intent: String,
    pub entity: String,
    pub decisions: Vec<DecisionSummary>,
    pub reply: String,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latencies: Option<Latencies>,
    /// `None` when the step states no expectation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_ok: Option<bool>,
}

impl StepRecord {
    pub fn passed(&self) -> bool {
        self.intent_ok != Some(false) && self.reply_ok != Some(false)
    }
}

/// User turns, journal lines and answers on the originating channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub turns: usize,
    pub journal_lines: usize,
    pub replies: usize,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.turns == self.journal_lines && self.turns == self.replies
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub broker: BrokerStats,
    pub core: CoreMetricsSnapshot,
    pub dead_letters: u64,
    pub lambdas: Vec<BenchmarkRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub conservation: Conservation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<FinalMetrics>,
    pub passed: bool,
}

impl Transcript {
    /// The run-independent part: no latencies and no metrics.
    pub fn canonical(&self) -> Transcript {
        let mut t = self.clone();
        for s in &mut t.steps {
            s.latencies = None;
        }
        t.metrics = None;
        t
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}
