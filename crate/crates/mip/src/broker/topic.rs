//! Topic names and subscription filters.
//!
//! Topics are `/`-separated segments. Filters may use `+` for exactly one
//! segment and a trailing `#` for zero or more remaining segments. Topics
//! starting with `$` are system topics and are only matched by filters whose
//! first segment is literal.

use std::fmt;

use super::BrokerError;

const SEPARATOR: char = '/';
const SINGLE: &str = "+";
const MULTI: &str = "#";

/// A concrete, wildcard-free topic a message is published to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn parse(topic: &str) -> Result<Self, BrokerError> {
        let invalid = || BrokerError::InvalidTopic(topic.to_string());
        if topic.is_empty() {
            return Err(invalid());
        }
        for segment in topic.split(SEPARATOR) {
            if segment.is_empty() || segment.contains(['+', '#']) {
                return Err(invalid());
            }
        }
        Ok(Self(topic.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split(SEPARATOR)
    }

    pub fn is_system(&self) -> bool {
        self.0.starts_with('$')
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Segment {
    Literal(String),
    Single,
    Multi,
}

/// A subscription filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicFilter {
    pub fn parse(filter: &str) -> Result<Self, BrokerError> {
        let invalid = || BrokerError::InvalidFilter(filter.to_string());
        if filter.is_empty() {
            return Err(invalid());
        }
        let parts: Vec<&str> = filter.split(SEPARATOR).collect();
        let last = parts.len() - 1;
        let mut segments = Vec::with_capacity(parts.len());
        for (i, part) in parts.into_iter().enumerate() {
            let segment = match part {
                SINGLE => Segment::Single,
                MULTI if i == last => Segment::Multi,
                _ if part.is_empty() || part.contains(['+', '#']) => return Err(invalid()),
                _ => Segment::Literal(part.to_string()),
            };
            segments.push(segment);
        }
        Ok(Self {
            raw: filter.to_string(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        if topic.is_system() && !matches!(self.segments.first(), Some(Segment::Literal(_))) {
            return false;
        }
        let mut levels = topic.segments();
        for segment in &self.segments {
            match segment {
                Segment::Multi => return true,
                Segment::Single => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                Segment::Literal(expected) => match levels.next() {
                    Some(level) if level == expected => {}
                    _ => return false,
                },
            }
        }
        levels.next().is_none()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}
