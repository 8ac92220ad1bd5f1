use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::auth::AccessToken;
use super::imdg::{Imdg, ImdgError};
use super::ops::{MicroOp, OpKind};
use crate::faas::{HttpResponseRecord, HttpRestBinding, TRIGGER_PREFIX};

pub const RULESET_KEY: &str = "reasoning/ruleset";
pub const AUTH_REQUIRED_TEXT: &str = "authentication required";

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("no reasoning ruleset at {RULESET_KEY}")]
    MissingRuleset,
    #[error("invalid reasoning ruleset: {0}")]
    InvalidRuleset(String),
    #[error("no rule matches {0}")]
    NoRule(OpKind),
    #[error(transparent)]
    Imdg(#[from] ImdgError),
}

/// What a rule matches: the op kind plus optional argument and session
/// predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPattern {
    pub kind: OpKind,
    /// Only for `QUERY_VAR`: the variable name.
    #[serde(default)]
    pub variable: Option<String>,
    /// The session must hold a valid token.
    #[serde(default)]
    pub requires_auth: bool,
    /// ACL action the token must grant.
    #[serde(default)]
    pub permission: Option<String>,
}

impl EventPattern {
    fn matches(&self, op: &MicroOp) -> bool {
        if self.kind != op.kind() {
            return false;
        }
        match (&self.variable, op) {
            (None, _) => true,
            (Some(want), MicroOp::QueryVar { variable, .. }) => want.eq_ignore_ascii_case(variable),
            (Some(_), _) => false,
        }
    }

    fn is_catch_all(&self) -> bool {
        self.variable.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningRule {
    pub rule_id: String,
    pub event_pattern: EventPattern,
    /// FaaS function fired by this rule.
    pub action: String,
    /// Higher wins.
    pub priority: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningRuleset {
    pub rules: Vec<ReasoningRule>,
    /// Extra HTTP requests fired alongside decisions of the bound kind.
    #[serde(default)]
    pub http_bindings: Vec<HttpRestBinding>,
}

impl ReasoningRuleset {
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../config/reasoning.json")).expect("builtin ruleset is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, ReasoningError> {
        let set: Self = serde_json::from_str(json).map_err(|e| ReasoningError::InvalidRuleset(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    /// Rule ids and per-kind priorities are unique and every kind has a
    /// rule without argument predicates.
    pub fn validate(&self) -> Result<(), ReasoningError> {
        let mut ids = HashSet::new();
        let mut priorities = HashSet::new();
        for r in &self.rules {
            if r.action.is_empty() {
                return Err(ReasoningError::InvalidRuleset(format!("rule {} has no action", r.rule_id)));
            }
            if !ids.insert(r.rule_id.as_str()) {
                return Err(ReasoningError::InvalidRuleset(format!("duplicate rule id {}", r.rule_id)));
            }
            if !priorities.insert((r.event_pattern.kind, r.priority)) {
                return Err(ReasoningError::InvalidRuleset(format!(
                    "duplicate priority {} for {}",
                    r.priority, r.event_pattern.kind
                )));
            }
        }
        for kind in OpKind::ALL {
            if !self
                .rules
                .iter()
                .any(|r| r.event_pattern.kind == kind && r.event_pattern.is_catch_all())
            {
                return Err(ReasoningError::InvalidRuleset(format!("no catch-all rule for {kind}")));
            }
        }
        Ok(())
    }

    pub fn select(&self, op: &MicroOp) -> Option<&ReasoningRule> {
        self.rules
            .iter()
            .filter(|r| r.event_pattern.matches(op))
            .max_by_key(|r| r.priority)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    AuthenticationRequired,
    Forbidden,
}

/// One reasoned micro-operation, as stored in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub key: String,
    pub session_id: String,
    pub trace_id: String,
    pub turn: u64,
    pub seq: usize,
    pub op: MicroOp,
    /// What actually runs; differs from `op` when gated.
    pub effective: MicroOp,
    pub rule_id: Option<String>,
    /// Function to trigger; `None` when suppressed.
    pub function: Option<String>,
    pub gate: Option<Gate>,
    /// A respond that depended on a gated op's result.
    pub suppressed: bool,
    /// Token that authorised a gated kind.
    pub authorized_by: Option<String>,
    pub ts: u64,
    #[serde(default)]
    pub http_bindings: Vec<HttpRestBinding>,
    /// Attached by http-rest once a bound request completes.
    #[serde(default)]
    pub http_response: Option<HttpResponseRecord>,
}

impl Decision {
    pub fn topic(&self) -> Option<String> {
        self.function.as_ref().map(|f| format!("{TRIGGER_PREFIX}{f}"))
    }
}

pub fn decision_key(session_id: &str, turn: u64, seq: usize) -> String {
    format!("decision/{session_id}/{turn:04}-{seq:02}")
}

pub fn decision_prefix(session_id: &str) -> String {
    format!("decision/{session_id}/")
}

/// Identity of the turn being reasoned.
#[derive(Debug, Clone)]
pub struct TurnContext {
    pub session_id: String,
    pub trace_id: String,
    pub turn: u64,
    pub token: Option<AccessToken>,
}

/// Turns micro-operations into FaaS decisions using the ruleset kept in
/// the grid.
#[derive(Debug, Clone)]
pub struct ReasoningEngine {
    imdg: Arc<Imdg>,
}

impl ReasoningEngine {
    pub fn new(imdg: Arc<Imdg>) -> Self {
        Self { imdg }
    }

    pub fn install(&self, ruleset: &ReasoningRuleset) -> Result<(), ReasoningError> {
        ruleset.validate()?;
        self.imdg.put_as(RULESET_KEY, ruleset, None)?;
        Ok(())
    }

    pub fn ruleset(&self) -> Result<ReasoningRuleset, ReasoningError> {
        self.imdg.get_as(RULESET_KEY)?.ok_or(ReasoningError::MissingRuleset)
    }

    /// Reasons `ops` in order and records one decision per op.
    pub fn reason(&self, ops: &[MicroOp], turn: &TurnContext) -> Result<Vec<Decision>, ReasoningError> {
        let ruleset = self.ruleset()?;
        let now = self.imdg.clock().now_ms();
        let token = turn.token.as_ref().filter(|t| t.is_valid(now));
        let mut decisions: Vec<Decision> = Vec::with_capacity(ops.len());
        for (seq, op) in ops.iter().enumerate() {
            let rule = ruleset.select(op).ok_or(ReasoningError::NoRule(op.kind()))?;
            let pattern = &rule.event_pattern;
            let needs_token = pattern.requires_auth || pattern.permission.is_some();
            let gate = match token {
                None if needs_token => Some((Gate::AuthenticationRequired, AUTH_REQUIRED_TEXT.to_string())),
                Some(t) => pattern
                    .permission
                    .as_ref()
                    .filter(|p| !t.allows(p))
                    .map(|p| (Gate::Forbidden, format!("not authorized to {p}"))),
                None => None,
            };
            let prev_gated = decisions.last().is_some_and(|d| d.gate.is_some());
            let key = decision_key(&turn.session_id, turn.turn, seq);
            let mut decision = Decision {
                key: key.clone(),
                session_id: turn.session_id.clone(),
                trace_id: turn.trace_id.clone(),
                turn: turn.turn,
                seq,
                op: op.clone(),
                effective: op.clone(),
                rule_id: Some(rule.rule_id.clone()),
                function: Some(rule.action.clone()),
                gate: None,
                suppressed: false,
                authorized_by: None,
                ts: now,
                http_bindings: Vec::new(),
                http_response: None,
            };
            if let Some((gate, text)) = gate {
                let replacement = MicroOp::Respond { text };
                let respond_rule = ruleset.select(&replacement).ok_or(ReasoningError::NoRule(OpKind::Respond))?;
                decision.effective = replacement;
                decision.rule_id = Some(respond_rule.rule_id.clone());
                decision.function = Some(respond_rule.action.clone());
                decision.gate = Some(gate);
            } else if op.depends_on_previous() && prev_gated {
                decision.rule_id = None;
                decision.function = None;
                decision.suppressed = true;
            } else {
                if needs_token {
                    decision.authorized_by = token.map(|t| t.token_id.clone());
                }
                decision.http_bindings = ruleset
                    .http_bindings
                    .iter()
                    .filter(|b| b.applies_to(op.kind().as_str()))
                    .cloned()
                    .collect();
            }
            self.imdg.put_as(&key, &decision, None)?;
            decisions.push(decision);
        }
        Ok(decisions)
    }

    pub fn decisions(&self, session_id: &str) -> Vec<Decision> {
        self.imdg
            .scan_prefix(&decision_prefix(session_id))
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value(v).ok())
            .collect()
    }
}
