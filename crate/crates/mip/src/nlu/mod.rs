//! Intent and entity extraction plus engine routing.
//!
//! The internal engine is a keyword/pattern grammar loaded from JSON (see
//! `config/grammar.json`). [`Router`] picks which registered engine handles
//! a datagram using a priority-ordered ruleset.

mod deadline;
mod grammar;
mod routing;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use deadline::{CalendarRule, DeadlineResolver, HorizonMode};
pub use grammar::{Grammar, GrammarConfig, InternalEngine, NluConfig};
pub use routing::{Router, RoutingRule, RoutingRuleConfig, Ruleset, INTERNAL_ENGINE};

#[derive(Debug, Error)]
pub enum NluError {
    #[error("invalid pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("routing ruleset has no default rule")]
    MissingDefault,
    #[error("duplicate routing priority {0}")]
    DuplicatePriority(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intent {
    #[serde(rename = "#LOGIN")]
    Login,
    #[serde(rename = "#READ_OEE")]
    ReadOee,
    #[serde(rename = "#WORK_ORDER")]
    WorkOrder,
    #[serde(rename = "#LOGOUT")]
    Logout,
    #[serde(rename = "#UNKNOWN")]
    Unknown,
}

impl Intent {
    pub fn as_str(self) -> &'static str {
        match self {
            Intent::Login => "#LOGIN",
            Intent::ReadOee => "#READ_OEE",
            Intent::WorkOrder => "#WORK_ORDER",
            Intent::Logout => "#LOGOUT",
            Intent::Unknown => "#UNKNOWN",
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    #[serde(rename = "#MACHINE")]
    Machine,
    #[serde(rename = "#NONE")]
    None,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Machine => "#MACHINE",
            EntityKind::None => "#NONE",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An addressed entity, optionally naming a concrete device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub device: Option<String>,
}

/// Where the intent of a result came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentSource {
    /// An intent keyword appeared in the text.
    Explicit,
    /// No keyword; the text only supplied slots or an entity and the active
    /// intent of the conversation was kept.
    Inherited,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentResult {
    pub intent: Intent,
    pub entity: EntityKind,
    /// Every value is a verbatim substring of the input text.
    pub slots: BTreeMap<String, String>,
    pub confidence: f64,
    pub source: IntentSource,
}

impl IntentResult {
    pub fn unknown() -> Self {
        Self {
            intent: Intent::Unknown,
            entity: EntityKind::None,
            slots: BTreeMap::new(),
            confidence: 0.0,
            source: IntentSource::None,
        }
    }

    pub fn slot(&self, name: &str) -> Option<&str> {
        self.slots.get(name).map(String::as_str)
    }

    /// True when the text carried no intent of its own but named an entity.
    pub fn is_entity_only(&self) -> bool {
        self.source == IntentSource::Inherited
    }
}

/// Intra-conversational memory handed to extraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextFrame {
    pub active_intent: Option<Intent>,
    pub active_entity: Option<EntityRef>,
    pub slot_memory: BTreeMap<String, String>,
}

/// Anything that can turn an utterance into an [`IntentResult`].
pub trait NluEngine: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    fn extract(&self, text: &str, context: Option<&ContextFrame>) -> IntentResult;
}
