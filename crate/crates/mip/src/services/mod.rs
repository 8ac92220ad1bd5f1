//! Conversational core: in-memory data grid, rooms and sessions, context,
//! interpretation into micro-operations, reasoning, authentication and the
//! worker pipeline that ties them to the broker and the FaaS engine.

mod auth;
mod context;
mod imdg;
mod interpreter;
pub mod lambdas;
mod ops;
mod pipeline;
mod reasoning;
mod session;

pub use auth::{
    token_key, welcome_text, AccessToken, AuthEngine, AuthError, Directory, Principal, DEFAULT_TOKEN_TTL,
    FAILURE_TEXT,
};
pub use context::{context_key, context_update, ContextManager};
pub use imdg::{Imdg, ImdgError};
pub use interpreter::{interpret, InterpretError, TurnScope, HELP_TEXT, LOGOUT_TEXT};
pub use ops::{JournalDraft, MicroOp, MicroOpError, OpKind, RESULT_PLACEHOLDER};
pub use pipeline::{
    turn_key, CoreConfig, CoreError, CoreMetricsSnapshot, CoreServices, CoreWorkers, EffectOutcome, JournalSink,
    TurnRecord, TurnStatus, CORE_GROUP, DEFAULT_DEDUP_WINDOW, INGEST_FILTER, JOURNAL_GROUP,
};
pub use reasoning::{
    decision_key, decision_prefix, Decision, EventPattern, Gate, ReasoningEngine, ReasoningError, ReasoningRule,
    ReasoningRuleset, TurnContext, AUTH_REQUIRED_TEXT, RULESET_KEY,
};
pub use session::{room_key, session_key, Room, Session, SessionError, SessionManager, SessionStatus, DEFAULT_IDLE_PARK};
