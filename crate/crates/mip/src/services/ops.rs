use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MicroOpError {
    #[error("{kind} needs a non-empty {arg}")]
    MissingArg { kind: OpKind, arg: &'static str },
    #[error("{kind} argument {arg} is out of range")]
    OutOfRange { kind: OpKind, arg: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Authenticate,
    QueryVar,
    Actuate,
    Respond,
    Journal,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Authenticate,
        OpKind::QueryVar,
        OpKind::Actuate,
        OpKind::Respond,
        OpKind::Journal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Authenticate => "AUTHENTICATE",
            OpKind::QueryVar => "QUERY_VAR",
            OpKind::Actuate => "ACTUATE",
            OpKind::Respond => "RESPOND",
            OpKind::Journal => "JOURNAL",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a turn is about, for the journal. The response is filled in once
/// the turn has been answered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalDraft {
    pub request: String,
    pub intent: String,
    pub entity: String,
}

/// `{result}` in a respond text stands for the text result of the
/// preceding operation.
pub const RESULT_PLACEHOLDER: &str = "{result}";

/// One step of decoded meaning. Build through the constructors, which
/// reject incomplete arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MicroOp {
    Authenticate { secret: String, entity: String },
    QueryVar { device: String, variable: String },
    Actuate { device: String, order_units: u64, deadline_hours: f64 },
    Respond { text: String },
    Journal { record: JournalDraft },
}

fn non_empty(kind: OpKind, arg: &'static str, value: &str) -> Result<(), MicroOpError> {
    if value.trim().is_empty() {
        Err(MicroOpError::MissingArg { kind, arg })
    } else {
        Ok(())
    }
}

impl MicroOp {
    pub fn authenticate(secret: &str, entity: &str) -> Result<Self, MicroOpError> {
        non_empty(OpKind::Authenticate, "secret", secret)?;
        non_empty(OpKind::Authenticate, "entity", entity)?;
        Ok(MicroOp::Authenticate {
            secret: secret.to_string(),
            entity: entity.to_string(),
        })
    }

    pub fn query_var(device: &str, variable: &str) -> Result<Self, MicroOpError> {
        non_empty(OpKind::QueryVar, "device", device)?;
        non_empty(OpKind::QueryVar, "variable", variable)?;
        Ok(MicroOp::QueryVar {
            device: device.to_string(),
            variable: variable.to_string(),
        })
    }

    pub fn actuate(device: &str, order_units: u64, deadline_hours: f64) -> Result<Self, MicroOpError> {
        non_empty(OpKind::Actuate, "device", device)?;
        if order_units == 0 {
            return Err(MicroOpError::OutOfRange { kind: OpKind::Actuate, arg: "order_units" });
        }
        if !(deadline_hours.is_finite() && deadline_hours > 0.0) {
            return Err(MicroOpError::OutOfRange { kind: OpKind::Actuate, arg: "deadline_hours" });
        }
        Ok(MicroOp::Actuate {
            device: device.to_string(),
            order_units,
            deadline_hours,
        })
    }

    pub fn respond(text: &str) -> Result<Self, MicroOpError> {
        non_empty(OpKind::Respond, "text", text)?;
        Ok(MicroOp::Respond { text: text.to_string() })
    }

    pub fn journal(request: &str, intent: &str, entity: &str) -> Result<Self, MicroOpError> {
        non_empty(OpKind::Journal, "request", request)?;
        non_empty(OpKind::Journal, "intent", intent)?;
        non_empty(OpKind::Journal, "entity", entity)?;
        Ok(MicroOp::Journal {
            record: JournalDraft {
                request: request.to_string(),
                intent: intent.to_string(),
                entity: entity.to_string(),
            },
        })
    }

    /// Re-runs construction checks, for ops that arrived deserialized.
    pub fn validate(&self) -> Result<(), MicroOpError> {
        match self {
            MicroOp::Authenticate { secret, entity } => Self::authenticate(secret, entity).map(drop),
            MicroOp::QueryVar { device, variable } => Self::query_var(device, variable).map(drop),
            MicroOp::Actuate { device, order_units, deadline_hours } => {
                Self::actuate(device, *order_units, *deadline_hours).map(drop)
            }
            MicroOp::Respond { text } => Self::respond(text).map(drop),
            MicroOp::Journal { record } => Self::journal(&record.request, &record.intent, &record.entity).map(drop),
        }
    }

    pub fn kind(&self) -> OpKind {
        match self {
            MicroOp::Authenticate { .. } => OpKind::Authenticate,
            MicroOp::QueryVar { .. } => OpKind::QueryVar,
            MicroOp::Actuate { .. } => OpKind::Actuate,
            MicroOp::Respond { .. } => OpKind::Respond,
            MicroOp::Journal { .. } => OpKind::Journal,
        }
    }

    /// Whether a respond text refers to the previous op's result.
    pub fn depends_on_previous(&self) -> bool {
        matches!(self, MicroOp::Respond { text } if text.contains(RESULT_PLACEHOLDER))
    }
}
