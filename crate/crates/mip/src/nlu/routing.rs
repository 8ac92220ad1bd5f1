use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::RwLock;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ContextFrame, IntentResult, NluEngine, NluError};
use crate::mdie::MetaDatagram;

pub const INTERNAL_ENGINE: &str = "internal";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRuleConfig {
    pub priority: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub engine: String,
}

#[derive(Debug, Clone)]
pub struct RoutingRule {
    pub priority: i64,
    pub channel: Option<String>,
    pub tenant: Option<String>,
    pub text: Option<Regex>,
    pub engine: String,
}

impl RoutingRule {
    fn is_default(&self) -> bool {
        self.channel.is_none() && self.tenant.is_none() && self.text.is_none()
    }

    fn matches(&self, datagram: &MetaDatagram) -> bool {
        self.channel.as_ref().is_none_or(|c| *c == datagram.channel_id)
            && self.tenant.as_ref().is_none_or(|t| *t == datagram.tenant)
            && self.text.as_ref().is_none_or(|re| re.is_match(&datagram.text))
    }
}

/// Priority-ordered routing rules; lower priority values win.
#[derive(Debug, Clone)]
pub struct Ruleset {
    rules: Vec<RoutingRule>,
}

impl Ruleset {
    /// Validates unique priorities and the presence of a match-all rule
    /// that routes to the internal engine.
    pub fn new(configs: &[RoutingRuleConfig]) -> Result<Self, NluError> {
        let mut seen = BTreeSet::new();
        let mut rules = Vec::with_capacity(configs.len());
        for config in configs {
            if !seen.insert(config.priority) {
                return Err(NluError::DuplicatePriority(config.priority));
            }
            let text = config
                .text
                .as_deref()
                .map(|p| {
                    Regex::new(p).map_err(|source| NluError::Pattern {
                        pattern: p.to_string(),
                        source,
                    })
                })
                .transpose()?;
            rules.push(RoutingRule {
                priority: config.priority,
                channel: config.channel.clone(),
                tenant: config.tenant.clone(),
                text,
                engine: config.engine.clone(),
            });
        }
        if !rules
            .iter()
            .any(|r| r.is_default() && r.engine == INTERNAL_ENGINE)
        {
            return Err(NluError::MissingDefault);
        }
        rules.sort_by_key(|r| r.priority);
        Ok(Self { rules })
    }

    /// Only the default rule.
    pub fn internal_only() -> Self {
        Self::new(&[RoutingRuleConfig {
            priority: i64::from(i32::MAX),
            channel: None,
            tenant: None,
            text: None,
            engine: INTERNAL_ENGINE.to_string(),
        }])
        .expect("default ruleset is valid")
    }

    pub fn route(&self, datagram: &MetaDatagram) -> &str {
        self.rules
            .iter()
            .find(|r| r.matches(datagram))
            .map_or(INTERNAL_ENGINE, |r| r.engine.as_str())
    }
}

/// Routing logic: chooses an engine per datagram and runs it.
#[derive(Debug)]
pub struct Router {
    ruleset: RwLock<Arc<Ruleset>>,
    engines: RwLock<HashMap<String, Arc<dyn NluEngine>>>,
}

impl Router {
    /// `internal` must have the id [`INTERNAL_ENGINE`].
    pub fn new(ruleset: Ruleset, internal: Arc<dyn NluEngine>) -> Self {
        let mut engines = HashMap::new();
        engines.insert(internal.id().to_string(), internal);
        Self {
            ruleset: RwLock::new(Arc::new(ruleset)),
            engines: RwLock::new(engines),
        }
    }

    pub fn register_engine(&self, engine: Arc<dyn NluEngine>) {
        self.engines.write().insert(engine.id().to_string(), engine);
    }

    /// Swaps the whole ruleset; readers see either the old or the new one.
    pub fn replace_ruleset(&self, ruleset: Ruleset) {
        *self.ruleset.write() = Arc::new(ruleset);
    }

    pub fn route(&self, datagram: &MetaDatagram) -> String {
        let ruleset = Arc::clone(&self.ruleset.read());
        ruleset.route(datagram).to_string()
    }

    /// Routes and extracts. An engine id with nothing registered under it
    /// falls back to the internal engine.
    pub fn extract(&self, datagram: &MetaDatagram, context: Option<&ContextFrame>) -> (String, IntentResult) {
        let engine_id = self.route(datagram);
        let engines = self.engines.read();
        let engine = match engines.get(&engine_id) {
            Some(engine) => engine,
            None => {
                tracing::warn!(engine = %engine_id, "routed to an unregistered engine, using internal");
                engines
                    .get(INTERNAL_ENGINE)
                    .expect("internal engine always registered")
            }
        };
        (engine.id().to_string(), engine.extract(&datagram.text, context))
    }
}
