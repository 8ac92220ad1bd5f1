use std::collections::BTreeMap;
use std::sync::Arc;

use regex::Regex;
use serde::Deserialize;

use super::deadline::DeadlineRuleConfig;
use super::routing::RoutingRuleConfig;
use super::{
    ContextFrame, DeadlineResolver, EntityKind, HorizonMode, Intent, IntentResult, IntentSource,
    NluEngine, NluError,
};

const BUILTIN: &str = include_str!("../../config/grammar.json");

/// Slot name carrying a device mentioned in the text.
pub const DEVICE_SLOT: &str = "device";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    #[default]
    Text,
    PositiveInteger,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SlotConfig {
    pub name: String,
    /// Regular expression; capture group 1 is the slot value.
    pub pattern: String,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub kind: SlotKind,
}

#[derive(Debug, Clone, Deserialize)]
pub struct IntentRuleConfig {
    pub intent: Intent,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub slots: Vec<SlotConfig>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EntityRuleConfig {
    pub entity: EntityKind,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GrammarConfig {
    pub intents: Vec<IntentRuleConfig>,
    #[serde(default)]
    pub entities: Vec<EntityRuleConfig>,
    #[serde(default)]
    pub device_pattern: Option<String>,
    #[serde(default)]
    pub(crate) deadlines: Vec<DeadlineRuleConfig>,
}

/// Grammar plus routing rules, as stored in a configuration file.
#[derive(Debug, Clone, Deserialize)]
pub struct NluConfig {
    #[serde(flatten)]
    pub grammar: GrammarConfig,
    #[serde(default)]
    pub routing: Vec<RoutingRuleConfig>,
}

impl NluConfig {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("built-in grammar is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, NluError> {
        serde_json::from_str(json).map_err(|e| NluError::Config(e.to_string()))
    }
}

fn compile(pattern: &str) -> Result<Regex, NluError> {
    Regex::new(pattern).map_err(|source| NluError::Pattern {
        pattern: pattern.to_string(),
        source,
    })
}

fn keyword_regex(keyword: &str) -> Result<Regex, NluError> {
    let words: Vec<String> = keyword.split_whitespace().map(regex::escape).collect();
    compile(&format!(r"(?i)\b{}\b", words.join(r"\s+")))
}

#[derive(Debug)]
struct SlotRule {
    name: String,
    pattern: Regex,
    required: bool,
    kind: SlotKind,
}

impl SlotRule {
    fn capture<'t>(&self, text: &'t str) -> Option<&'t str> {
        let value = self.pattern.captures(text)?.get(1)?.as_str();
        let valid = match self.kind {
            SlotKind::Text => !value.is_empty(),
            SlotKind::PositiveInteger => value.parse::<u64>().is_ok_and(|n| n > 0),
        };
        valid.then_some(value)
    }
}

#[derive(Debug)]
struct IntentRule {
    intent: Intent,
    keywords: Vec<Regex>,
    slots: Vec<SlotRule>,
}

impl IntentRule {
    fn triggered_by(&self, text: &str) -> bool {
        self.keywords.iter().any(|k| k.is_match(text))
    }
}

#[derive(Debug)]
struct EntityRule {
    entity: EntityKind,
    keywords: Vec<Regex>,
}

/// A compiled keyword/pattern grammar.
#[derive(Debug)]
pub struct Grammar {
    intents: Vec<IntentRule>,
    entities: Vec<EntityRule>,
    device: Option<Regex>,
    deadlines: DeadlineResolver,
}

impl Grammar {
    pub fn builtin(mode: HorizonMode) -> Self {
        Self::from_config(&NluConfig::builtin().grammar, mode).expect("built-in grammar compiles")
    }

    pub fn from_config(config: &GrammarConfig, mode: HorizonMode) -> Result<Self, NluError> {
        let intents = config
            .intents
            .iter()
            .map(|rule| {
                Ok(IntentRule {
                    intent: rule.intent,
                    keywords: rule
                        .keywords
                        .iter()
                        .map(|k| keyword_regex(k))
                        .collect::<Result<_, _>>()?,
                    slots: rule
                        .slots
                        .iter()
                        .map(|s| {
                            Ok(SlotRule {
                                name: s.name.clone(),
                                pattern: compile(&s.pattern)?,
                                required: s.required,
                                kind: s.kind,
                            })
                        })
                        .collect::<Result<_, NluError>>()?,
                })
            })
            .collect::<Result<_, NluError>>()?;
        let entities = config
            .entities
            .iter()
            .map(|rule| {
                Ok(EntityRule {
                    entity: rule.entity,
                    keywords: rule
                        .keywords
                        .iter()
                        .map(|k| keyword_regex(k))
                        .collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<_, NluError>>()?;
        let device = config.device_pattern.as_deref().map(compile).transpose()?;
        Ok(Self {
            intents,
            entities,
            device,
            deadlines: DeadlineResolver::from_config(&config.deadlines, mode)?,
        })
    }

    pub fn deadlines(&self) -> &DeadlineResolver {
        &self.deadlines
    }

    fn rule_for(&self, intent: Intent) -> Option<&IntentRule> {
        self.intents.iter().find(|r| r.intent == intent)
    }

    pub fn extract(&self, text: &str, context: Option<&ContextFrame>) -> IntentResult {
        let mentioned_entity = self
            .entities
            .iter()
            .find(|e| e.keywords.iter().any(|k| k.is_match(text)))
            .map(|e| e.entity);
        let device = self
            .device
            .as_ref()
            .and_then(|re| re.captures(text))
            .and_then(|c| c.get(1))
            .map(|m| m.as_str());

        let mut slots = BTreeMap::new();
        let (intent, source) = if let Some(rule) = self.intents.iter().find(|r| r.triggered_by(text)) {
            for slot in &rule.slots {
                match slot.capture(text) {
                    Some(value) => {
                        slots.insert(slot.name.clone(), value.to_string());
                    }
                    None if slot.required => return IntentResult::unknown(),
                    None => {}
                }
            }
            (rule.intent, IntentSource::Explicit)
        } else {
            let active = context
                .and_then(|c| c.active_intent)
                .filter(|i| *i != Intent::Unknown);
            let Some(active) = active else {
                return IntentResult::unknown();
            };
            if let Some(rule) = self.rule_for(active) {
                for slot in &rule.slots {
                    match slot.capture(text) {
                        Some(value) => {
                            slots.insert(slot.name.clone(), value.to_string());
                        }
                        // Required slots must come from this text too, so an
                        // entity swap only carries over intents without them.
                        None if slot.required => return IntentResult::unknown(),
                        None => {}
                    }
                }
            }
            if slots.is_empty() && mentioned_entity.is_none() && device.is_none() {
                return IntentResult::unknown();
            }
            (active, IntentSource::Inherited)
        };

        if let Some(device) = device {
            slots.insert(DEVICE_SLOT.to_string(), device.to_string());
        }
        let entity = match (mentioned_entity, device) {
            (Some(kind), _) => kind,
            (None, Some(_)) => EntityKind::Machine,
            (None, None) => context
                .and_then(|c| c.active_entity.as_ref())
                .map_or(EntityKind::None, |e| e.kind),
        };
        IntentResult {
            intent,
            entity,
            slots,
            confidence: 1.0,
            source,
        }
    }
}

/// The engine shipped with the platform.
#[derive(Debug, Clone)]
pub struct InternalEngine {
    grammar: Arc<Grammar>,
}

impl InternalEngine {
    pub fn new(grammar: Arc<Grammar>) -> Self {
        Self { grammar }
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }
}

impl NluEngine for InternalEngine {
    fn id(&self) -> &str {
        super::INTERNAL_ENGINE
    }

    fn extract(&self, text: &str, context: Option<&ContextFrame>) -> IntentResult {
        self.grammar.extract(text, context)
    }
}
