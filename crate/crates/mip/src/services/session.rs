use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::imdg::{Imdg, ImdgError};
use crate::faas::SessionChannels;
use crate::ids::IdGen;

pub const DEFAULT_IDLE_PARK: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    Imdg(#[from] ImdgError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub room_id: String,
    pub channel_id: String,
    pub created_ts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Parked,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub room_id: String,
    /// Channel the session is currently talking on.
    pub channel_id: String,
    pub principal: Option<String>,
    pub state_vars: BTreeMap<String, Value>,
    pub status: SessionStatus,
    /// Milliseconds since the Unix epoch.
    pub last_activity_ts: u64,
}

pub fn room_key(channel_id: &str) -> String {
    format!("room/{channel_id}")
}

pub fn session_key(session_id: &str) -> String {
    format!("session/{session_id}")
}

/// Room and session bookkeeping; all state lives in the grid.
#[derive(Debug, Clone)]
pub struct SessionManager {
    imdg: Arc<Imdg>,
    ids: Arc<IdGen>,
    idle_park: Duration,
}

impl SessionManager {
    pub fn new(imdg: Arc<Imdg>, ids: IdGen) -> Self {
        Self {
            imdg,
            ids: Arc::new(ids),
            idle_park: DEFAULT_IDLE_PARK,
        }
    }

    pub fn with_idle_park(mut self, idle: Duration) -> Self {
        self.idle_park = idle;
        self
    }

    fn now_ms(&self) -> u64 {
        self.imdg.clock().now_ms()
    }

    pub fn get_or_create_room(&self, channel_id: &str) -> Result<Room, SessionError> {
        let key = room_key(channel_id);
        if let Some(room) = self.imdg.get_as::<Room>(&key)? {
            return Ok(room);
        }
        let room = Room {
            room_id: self.ids.next("room"),
            channel_id: channel_id.to_string(),
            created_ts: self.now_ms(),
        };
        // A concurrent creator may have won; theirs is the room.
        self.imdg
            .put_if_absent(&key, serde_json::to_value(&room).expect("room serializes"), None)?;
        Ok(self.imdg.get_as::<Room>(&key)?.expect("room present"))
    }

    /// Resumes or returns the hinted session when it exists and is not
    /// closed; otherwise opens a fresh one in `room`.
    pub fn get_or_create_session(&self, room: &Room, hint: Option<&str>) -> Result<Session, SessionError> {
        if let Some(id) = hint {
            let resumed = self.imdg.update(&session_key(id), None, |current| {
                let mut s: Session = serde_json::from_value(current?.clone()).ok()?;
                if s.status == SessionStatus::Closed {
                    return current.cloned();
                }
                s.status = SessionStatus::Active;
                s.channel_id = room.channel_id.clone();
                s.room_id = room.room_id.clone();
                Some(serde_json::to_value(s).expect("session serializes"))
            })?;
            if let Some(value) = resumed {
                let session: Session = serde_json::from_value(value).map_err(|source| ImdgError::Decode {
                    key: session_key(id),
                    source,
                })?;
                if session.status == SessionStatus::Active {
                    return Ok(session);
                }
            }
        }
        let session = Session {
            session_id: self.ids.next("sess"),
            room_id: room.room_id.clone(),
            channel_id: room.channel_id.clone(),
            principal: None,
            state_vars: BTreeMap::new(),
            status: SessionStatus::Active,
            last_activity_ts: self.now_ms(),
        };
        self.imdg.put_as(&session_key(&session.session_id), &session, None)?;
        Ok(session)
    }

    pub fn get(&self, session_id: &str) -> Result<Session, SessionError> {
        self.imdg
            .get_as::<Session>(&session_key(session_id))?
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    /// Atomically applies `f` to a stored session.
    pub fn modify(&self, session_id: &str, f: impl FnOnce(&mut Session)) -> Result<Session, SessionError> {
        let key = session_key(session_id);
        let mut out = None;
        self.imdg.update(&key, None, |current| {
            let mut s: Session = serde_json::from_value(current?.clone()).ok()?;
            f(&mut s);
            let v = serde_json::to_value(&s).expect("session serializes");
            out = Some(s);
            Some(v)
        })?;
        out.ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    /// Parks an active session; parking a parked one does nothing.
    pub fn park_session(&self, session_id: &str) -> Result<Session, SessionError> {
        self.modify(session_id, |s| {
            if s.status == SessionStatus::Active {
                s.status = SessionStatus::Parked;
            }
        })
    }

    pub fn close_session(&self, session_id: &str) -> Result<Session, SessionError> {
        self.modify(session_id, |s| s.status = SessionStatus::Closed)
    }

    pub fn touch(&self, session_id: &str) -> Result<Session, SessionError> {
        let now = self.now_ms();
        self.modify(session_id, |s| s.last_activity_ts = now)
    }

    pub fn attach_principal(&self, session_id: &str, principal: Option<String>) -> Result<Session, SessionError> {
        self.modify(session_id, |s| s.principal = principal)
    }

    pub fn set_state_var(&self, session_id: &str, name: &str, value: Value) -> Result<Session, SessionError> {
        self.modify(session_id, |s| {
            s.state_vars.insert(name.to_string(), value);
        })
    }

    pub fn sessions(&self) -> Vec<Session> {
        self.imdg
            .scan_prefix("session/")
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value(v).ok())
            .collect()
    }

    /// Parks active sessions idle for longer than the park threshold.
    pub fn park_idle(&self) -> Vec<String> {
        let now = self.now_ms();
        let limit = self.idle_park.as_millis() as u64;
        let mut parked = Vec::new();
        for s in self.sessions() {
            if s.status == SessionStatus::Active && now.saturating_sub(s.last_activity_ts) > limit {
                if self.park_session(&s.session_id).is_ok() {
                    parked.push(s.session_id);
                }
            }
        }
        parked
    }

    pub fn snapshot(&self, session_id: &str) -> Result<Value, SessionError> {
        let s = self.get(session_id)?;
        Ok(json!(s))
    }
}

impl SessionChannels for SessionManager {
    fn channel_of(&self, session_id: &str) -> Option<String> {
        self.get(session_id).ok().map(|s| s.channel_id)
    }
}
