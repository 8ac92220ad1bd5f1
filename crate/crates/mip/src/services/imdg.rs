use std::collections::BTreeMap;
use std::fmt;
use std::ops::Bound;
use std::time::Duration;

use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::clock::SharedClock;

#[derive(Debug, Error)]
pub enum ImdgError {
    #[error("empty key")]
    EmptyKey,
    #[error("value under {key} has the wrong shape: {source}")]
    Decode {
        key: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone)]
struct Entry {
    value: Value,
    expires: Option<Duration>,
}

impl Entry {
    fn live(&self, now: Duration) -> bool {
        self.expires.is_none_or(|t| now < t)
    }
}

/// In-memory data grid: a shared key-value map with optional per-entry TTL.
/// Expired entries are never returned.
pub struct Imdg {
    clock: SharedClock,
    map: RwLock<BTreeMap<String, Entry>>,
}

impl fmt::Debug for Imdg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Imdg").field("entries", &self.map.read().len()).finish()
    }
}

fn check(key: &str) -> Result<(), ImdgError> {
    if key.is_empty() {
        Err(ImdgError::EmptyKey)
    } else {
        Ok(())
    }
}

impl Imdg {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            clock,
            map: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    fn expiry(&self, ttl: Option<Duration>) -> Option<Duration> {
        ttl.map(|t| self.clock.now() + t)
    }

    pub fn put(&self, key: &str, value: Value, ttl: Option<Duration>) -> Result<(), ImdgError> {
        check(key)?;
        let expires = self.expiry(ttl);
        self.map.write().insert(key.to_string(), Entry { value, expires });
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let now = self.clock.now();
        self.map
            .read()
            .get(key)
            .filter(|e| e.live(now))
            .map(|e| e.value.clone())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    /// Inserts only when no live entry exists. Returns whether it inserted.
    pub fn put_if_absent(&self, key: &str, value: Value, ttl: Option<Duration>) -> Result<bool, ImdgError> {
        check(key)?;
        let now = self.clock.now();
        let expires = self.expiry(ttl);
        let mut map = self.map.write();
        if map.get(key).is_some_and(|e| e.live(now)) {
            return Ok(false);
        }
        map.insert(key.to_string(), Entry { value, expires });
        Ok(true)
    }

    /// Atomic read-modify-write. `f` sees the live value (if any) and
    /// returns the new one; `None` removes the key. An existing TTL is kept
    /// unless `ttl` is given.
    pub fn update<F>(&self, key: &str, ttl: Option<Duration>, f: F) -> Result<Option<Value>, ImdgError>
    where
        F: FnOnce(Option<&Value>) -> Option<Value>,
    {
        check(key)?;
        let now = self.clock.now();
        let mut map = self.map.write();
        let current = map.get(key).filter(|e| e.live(now)).cloned();
        match f(current.as_ref().map(|e| &e.value)) {
            Some(value) => {
                let expires = match ttl {
                    Some(t) => Some(now + t),
                    None => current.and_then(|e| e.expires),
                };
                map.insert(key.to_string(), Entry { value: value.clone(), expires });
                Ok(Some(value))
            }
            None => {
                map.remove(key);
                Ok(None)
            }
        }
    }

    pub fn remove(&self, key: &str) -> Option<Value> {
        let now = self.clock.now();
        self.map.write().remove(key).filter(|e| e.live(now)).map(|e| e.value)
    }

    /// Live entries whose key starts with `prefix`, in key order.
    pub fn scan_prefix(&self, prefix: &str) -> Vec<(String, Value)> {
        let now = self.clock.now();
        self.map
            .read()
            .range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
            .take_while(|(k, _)| k.starts_with(prefix))
            .filter(|(_, e)| e.live(now))
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.scan_prefix(prefix).len()
    }

    /// Drops expired entries; returns how many.
    pub fn purge_expired(&self) -> usize {
        let now = self.clock.now();
        let mut map = self.map.write();
        let before = map.len();
        map.retain(|_, e| e.live(now));
        before - map.len()
    }

    pub fn get_as<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, ImdgError> {
        self.get(key)
            .map(|v| {
                serde_json::from_value(v).map_err(|source| ImdgError::Decode {
                    key: key.to_string(),
                    source,
                })
            })
            .transpose()
    }

    pub fn put_as<T: Serialize>(&self, key: &str, value: &T, ttl: Option<Duration>) -> Result<(), ImdgError> {
        self.put(key, serde_json::to_value(value).expect("value serializes"), ttl)
    }
}
