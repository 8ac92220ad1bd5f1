use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{FaasError, Invocation, Outcome};

/// Nearest-rank percentile of an ascending slice. `p` is in (0, 100].
pub fn nearest_rank(sorted: &[Duration], p: f64) -> Option<Duration> {
    if sorted.is_empty() {
        return None;
    }
    // p * n before dividing keeps integer percentiles exact.
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Half-open window `[start, end)` over invocation start timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Duration,
    pub end: Duration,
}

impl Window {
    pub fn new(start: Duration, end: Duration) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: Duration) -> bool {
        self.start <= t && t < self.end
    }

    pub fn len(&self) -> Duration {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len().is_zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub lambda: String,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
    pub invocations: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub error_rate: f64,
    /// Invocations per second of window.
    pub throughput: f64,
    #[serde(skip)]
    pub p50: Duration,
    #[serde(skip)]
    pub p95: Duration,
}

pub(crate) fn compute(lambda: &str, window: Window, log: &[Invocation]) -> Result<BenchmarkRecord, FaasError> {
    let selected: Vec<&Invocation> = log
        .iter()
        .filter(|i| i.lambda == lambda && window.contains(i.start_ts))
        .collect();
    if selected.is_empty() {
        return Err(FaasError::EmptyWindow(lambda.to_string()));
    }
    let mut latencies: Vec<Duration> = selected.iter().map(|i| i.latency).collect();
    latencies.sort();
    let p50 = nearest_rank(&latencies, 50.0).expect("non-empty");
    let p95 = nearest_rank(&latencies, 95.0).expect("non-empty");
    let errors = selected.iter().filter(|i| i.outcome != Outcome::Ok).count();
    let secs = window.len().as_secs_f64();
    Ok(BenchmarkRecord {
        lambda: lambda.to_string(),
        window_start_ms: window.start.as_millis() as u64,
        window_end_ms: window.end.as_millis() as u64,
        invocations: selected.len(),
        p50_ms: p50.as_secs_f64() * 1e3,
        p95_ms: p95.as_secs_f64() * 1e3,
        error_rate: errors as f64 / selected.len() as f64,
        throughput: if secs > 0.0 { selected.len() as f64 / secs } else { 0.0 },
        p50,
        p95,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: &[u64]) -> Vec<Duration> {
        v.iter().map(|m| Duration::from_millis(*m)).collect()
    }

    #[test]
    fn nearest_rank_small_cases() {
        let v = ms(&[15, 20, 35, 40, 50]);
        assert_eq!(nearest_rank(&v, 30.0), Some(Duration::from_millis(20)));
        assert_eq!(nearest_rank(&v, 40.0), Some(Duration::from_millis(20)));
        assert_eq!(nearest_rank(&v, 50.0), Some(Duration::from_millis(35)));
        assert_eq!(nearest_rank(&v, 100.0), Some(Duration::from_millis(50)));
        assert_eq!(nearest_rank(&[], 50.0), None);
        let hundred: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        assert_eq!(nearest_rank(&hundred, 7.0), Some(Duration::from_millis(7)));
    }
}
