use chrono::{DateTime, Datelike, Duration as ChronoDuration, NaiveTime, Utc};
use regex::Regex;
use serde::Deserialize;
use std::time::Duration;

use super::NluError;

/// Calendar-relative deadlines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarRule {
    /// Sunday 24:00 (UTC) of the week after the current one.
    EndOfNextWeek,
    /// Midnight at the end of tomorrow (UTC).
    EndOfTomorrow,
}

/// How phrases with a calendar meaning are turned into hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizonMode {
    /// Use the fixed hour value from the phrase table. Scripted runs use
    /// this so "end of the following week" is always 168 h.
    FixedTable,
    /// Compute from the wall clock.
    Calendar,
}

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct DeadlineRuleConfig {
    pattern: String,
    #[serde(default)]
    hours: Option<f64>,
    #[serde(default)]
    hours_per_unit: Option<f64>,
    #[serde(default)]
    calendar: Option<CalendarRule>,
}

#[derive(Debug, Clone)]
struct DeadlineRule {
    pattern: Regex,
    hours: Option<f64>,
    hours_per_unit: Option<f64>,
    calendar: Option<CalendarRule>,
}

/// Converts deadline phrases such as "end of the following week" into a
/// numeric horizon in hours.
#[derive(Debug, Clone)]
pub struct DeadlineResolver {
    rules: Vec<DeadlineRule>,
    mode: HorizonMode,
}

impl DeadlineResolver {
    pub(crate) fn from_config(rules: &[DeadlineRuleConfig], mode: HorizonMode) -> Result<Self, NluError> {
        let rules = rules
            .iter()
            .map(|r| {
                if r.hours.is_none() && r.hours_per_unit.is_none() {
                    return Err(NluError::Config(format!(
                        "deadline rule {:?} needs hours or hours_per_unit",
                        r.pattern
                    )));
                }
                Ok(DeadlineRule {
                    pattern: Regex::new(&r.pattern).map_err(|source| NluError::Pattern {
                        pattern: r.pattern.clone(),
                        source,
                    })?,
                    hours: r.hours,
                    hours_per_unit: r.hours_per_unit,
                    calendar: r.calendar,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules, mode })
    }

    pub fn mode(&self) -> HorizonMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: HorizonMode) -> Self {
        self.mode = mode;
        self
    }

    /// Hours from `now` (time since the Unix epoch) until the deadline, or
    /// `None` when the phrase is not understood.
    pub fn resolve(&self, phrase: &str, now: Duration) -> Option<f64> {
        let phrase = phrase.trim();
        for rule in &self.rules {
            let Some(caps) = rule.pattern.captures(phrase) else {
                continue;
            };
            if let Some(per_unit) = rule.hours_per_unit {
                let n: f64 = caps.get(1)?.as_str().parse().ok()?;
                return (n > 0.0).then_some(n * per_unit);
            }
            if let (HorizonMode::Calendar, Some(calendar)) = (self.mode, rule.calendar) {
                return calendar_hours(calendar, now);
            }
            return rule.hours;
        }
        None
    }
}

fn calendar_hours(rule: CalendarRule, now: Duration) -> Option<f64> {
    let now: DateTime<Utc> = DateTime::from_timestamp(now.as_secs() as i64, now.subsec_nanos())?;
    let midnight = now.date_naive().and_time(NaiveTime::MIN).and_utc();
    let target = match rule {
        CalendarRule::EndOfTomorrow => midnight + ChronoDuration::days(2),
        CalendarRule::EndOfNextWeek => {
            let days_left_this_week = 7 - i64::from(now.weekday().num_days_from_monday());
            midnight + ChronoDuration::days(days_left_this_week + 7)
        }
    };
    Some((target - now).num_milliseconds() as f64 / 3_600_000.0)
}
