use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::imdg::{Imdg, ImdgError};
use crate::ids::IdGen;

pub const DEFAULT_TOKEN_TTL: Duration = Duration::from_secs(15 * 60);

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("authentication failed")]
    Failure,
    #[error("directory unavailable")]
    DirectoryUnavailable,
    #[error("invalid directory: {0}")]
    Directory(String),
    #[error(transparent)]
    Imdg(#[from] ImdgError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal: String,
    pub secret: String,
    #[serde(default)]
    pub roles: Vec<String>,
    /// Actions this principal may perform, e.g. `read_oee`.
    #[serde(default)]
    pub acl: Vec<String>,
}

/// Credentials, roles and access-control lists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directory {
    pub principals: Vec<Principal>,
}

impl Directory {
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../config/directory.json")).expect("builtin directory is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, AuthError> {
        let dir: Directory = serde_json::from_str(json).map_err(|e| AuthError::Directory(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for p in &dir.principals {
            if p.principal.is_empty() || p.secret.is_empty() {
                return Err(AuthError::Directory("principal and secret must be non-empty".into()));
            }
            if !seen.insert(p.secret.as_str()) {
                return Err(AuthError::Directory(format!("secret of {} is not unique", p.principal)));
            }
        }
        Ok(dir)
    }

    pub fn lookup(&self, secret: &str) -> Option<&Principal> {
        self.principals.iter().find(|p| p.secret == secret)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token_id: String,
    pub principal: String,
    /// Milliseconds since the Unix epoch.
    pub issued_ts: u64,
    pub ttl_ms: u64,
    pub roles: Vec<String>,
    pub acl: Vec<String>,
    #[serde(default)]
    pub revoked: bool,
}

impl AccessToken {
    pub fn is_valid(&self, now_ms: u64) -> bool {
        !self.revoked && now_ms < self.issued_ts + self.ttl_ms
    }

    pub fn allows(&self, action: &str) -> bool {
        self.acl.iter().any(|a| a == action)
    }
}

pub fn token_key(session_id: &str) -> String {
    format!("token/{session_id}")
}

pub fn welcome_text(principal: &str) -> String {
    format!("Welcome {principal}, you are now logged in.")
}

pub const FAILURE_TEXT: &str = "Authentication failed. Please check your secret and try again.";

#[derive(Debug)]
pub struct AuthEngine {
    imdg: Arc<Imdg>,
    ids: IdGen,
    directory: RwLock<Directory>,
    ttl: Duration,
    outage: AtomicBool,
}

impl AuthEngine {
    pub fn new(imdg: Arc<Imdg>, ids: IdGen, directory: Directory) -> Self {
        Self {
            imdg,
            ids,
            directory: RwLock::new(directory),
            ttl: DEFAULT_TOKEN_TTL,
            outage: AtomicBool::new(false),
        }
    }

    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn replace_directory(&self, directory: Directory) {
        *self.directory.write() = directory;
    }

    /// Simulated directory outage.
    pub fn set_directory_down(&self, down: bool) {
        self.outage.store(down, Ordering::SeqCst);
    }

    /// Mints a token for the principal owning `secret` and stores it under
    /// `token/<session>` for the token's lifetime.
    pub fn authenticate(&self, secret: &str, _entity: &str, session_id: &str) -> Result<AccessToken, AuthError> {
        if self.outage.load(Ordering::SeqCst) {
            return Err(AuthError::DirectoryUnavailable);
        }
        let principal = self.directory.read().lookup(secret).cloned().ok_or(AuthError::Failure)?;
        let token = AccessToken {
            token_id: self.ids.next("tok"),
            principal: principal.principal,
            issued_ts: self.imdg.clock().now_ms(),
            ttl_ms: self.ttl.as_millis() as u64,
            roles: principal.roles,
            acl: principal.acl,
            revoked: false,
        };
        self.imdg.put_as(&token_key(session_id), &token, Some(self.ttl))?;
        Ok(token)
    }

    /// The session's token if it is currently valid.
    pub fn valid_token(&self, session_id: &str) -> Option<AccessToken> {
        let token: AccessToken = self.imdg.get_as(&token_key(session_id)).ok()??;
        token.is_valid(self.imdg.clock().now_ms()).then_some(token)
    }

    /// Revokes immediately; returns whether a valid token existed.
    pub fn revoke(&self, session_id: &str) -> bool {
        let had = self.valid_token(session_id).is_some();
        self.imdg.remove(&token_key(session_id));
        had
    }
}
