use std::time::Duration;

use thiserror::Error;

use super::ops::{MicroOp, MicroOpError, RESULT_PLACEHOLDER};
use super::session::Session;
use crate::mdie::MetaDatagram;
use crate::nlu::{ContextFrame, DeadlineResolver, Intent, IntentResult};

pub const HELP_TEXT: &str = "Sorry, I did not understand that. You can log in with your secret, \
ask for the OEE of a machine, place a work order with a number of units and a deadline, or log out.";
pub const LOGOUT_TEXT: &str = "You are now logged out. Goodbye.";

#[derive(Debug, Error, PartialEq)]
pub enum InterpretError {
    #[error("malformed {intent} slots: {reason}")]
    MalformedSlots { intent: Intent, reason: String },
    #[error(transparent)]
    Op(#[from] MicroOpError),
}

impl InterpretError {
    /// What to tell the user instead.
    pub fn user_text(&self) -> String {
        match self {
            InterpretError::MalformedSlots { reason, .. } => format!("I could not process that request: {reason}."),
            InterpretError::Op(e) => format!("I could not process that request: {e}."),
        }
    }
}

/// Everything interpretation may consult besides the datagram and result.
#[derive(Debug, Clone, Copy)]
pub struct TurnScope<'a> {
    pub session: &'a Session,
    pub frame: &'a ContextFrame,
    /// Device used when neither the text nor the conversation names one.
    pub default_device: &'a str,
    pub deadlines: &'a DeadlineResolver,
    /// Business time, for calendar deadlines.
    pub now: Duration,
}

impl TurnScope<'_> {
    fn device(&self, result: &IntentResult) -> String {
        result
            .slot("device")
            .map(str::to_string)
            .or_else(|| self.frame.active_entity.as_ref().and_then(|e| e.device.clone()))
            .or_else(|| {
                self.session
                    .state_vars
                    .get("device")
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
            })
            .unwrap_or_else(|| self.default_device.to_string())
    }
}

fn malformed(intent: Intent, reason: impl Into<String>) -> InterpretError {
    InterpretError::MalformedSlots {
        intent,
        reason: reason.into(),
    }
}

/// Breaks a datagram plus its extracted meaning into micro-operations.
pub fn interpret(
    datagram: &MetaDatagram,
    result: &IntentResult,
    scope: &TurnScope<'_>,
) -> Result<Vec<MicroOp>, InterpretError> {
    let entity = result.entity.as_str();
    let journal = MicroOp::journal(&datagram.text, result.intent.as_str(), entity)?;
    let answer = MicroOp::respond(RESULT_PLACEHOLDER)?;
    let ops = match result.intent {
        Intent::Login => {
            let secret = result
                .slot("secret")
                .ok_or_else(|| malformed(Intent::Login, "no secret given"))?;
            vec![MicroOp::authenticate(secret, entity)?, answer, journal]
        }
        Intent::ReadOee => {
            let device = scope.device(result);
            vec![MicroOp::query_var(&device, "oee")?, answer, journal]
        }
        Intent::WorkOrder => {
            let units = result
                .slot("units")
                .ok_or_else(|| malformed(Intent::WorkOrder, "no number of units given"))?;
            let units: u64 = units
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| malformed(Intent::WorkOrder, format!("units {units:?} is not a positive integer")))?;
            let phrase = result
                .slot("deadline")
                .ok_or_else(|| malformed(Intent::WorkOrder, "no deadline given"))?;
            let hours = scope
                .deadlines
                .resolve(phrase, scope.now)
                .filter(|h| *h > 0.0)
                .ok_or_else(|| malformed(Intent::WorkOrder, format!("deadline {phrase:?} is not understood")))?;
            let device = scope.device(result);
            vec![MicroOp::actuate(&device, units, hours)?, answer, journal]
        }
        Intent::Logout => vec![MicroOp::respond(LOGOUT_TEXT)?, journal],
        Intent::Unknown => vec![MicroOp::respond(HELP_TEXT)?, journal],
    };
    Ok(ops)
}
