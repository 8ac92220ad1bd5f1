use std::time::Duration;

/// Outcome of a rate-limit check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateDecision {
    Allow,
    Deny,
}

// Absorbs float drift in refill arithmetic (0.2 s * 5/s must yield a token).
const EPSILON: f64 = 1e-9;

/// Token bucket holding up to `burst` tokens and refilling at `rate` per second.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Option<Duration>,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: u32) -> Self {
        Self {
            rate,
            burst: f64::from(burst),
            tokens: f64::from(burst),
            last: None,
        }
    }

    pub fn check(&mut self, now: Duration) -> RateDecision {
        if let Some(last) = self.last {
            let elapsed = now.saturating_sub(last).as_secs_f64();
            self.tokens = (self.tokens + elapsed * self.rate).min(self.burst);
        }
        self.last = Some(self.last.map_or(now, |last| last.max(now)));
        if self.tokens + EPSILON >= 1.0 {
            self.tokens = (self.tokens - 1.0).max(0.0);
            RateDecision::Allow
        } else {
            RateDecision::Deny
        }
    }

    pub fn available(&self) -> f64 {
        self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn burst_then_deny_then_refill() {
        let mut bucket = TokenBucket::new(5.0, 5);
        let t0 = Duration::ZERO;
        for _ in 0..5 {
            assert_eq!(bucket.check(t0), RateDecision::Allow);
        }
        assert_eq!(bucket.check(t0), RateDecision::Deny);
        assert_eq!(bucket.check(Duration::from_millis(200)), RateDecision::Allow);
        assert_eq!(bucket.check(Duration::from_millis(200)), RateDecision::Deny);
    }

    #[test]
    fn fresh_bucket_allows() {
        let mut bucket = TokenBucket::new(0.5, 1);
        assert_eq!(bucket.check(Duration::from_secs(3)), RateDecision::Allow);
        assert_eq!(bucket.check(Duration::from_secs(3)), RateDecision::Deny);
        assert_eq!(bucket.check(Duration::from_secs(5)), RateDecision::Allow);
    }

    proptest! {
        // Every window [t_i, t_j] admits at most burst + rate * (t_j - t_i).
        #[test]
        fn admitted_never_exceeds_token_bucket_bound(
            rate in 0.5f64..20.0,
            burst in 1u32..10,
            mut gaps_ms in proptest::collection::vec(0u64..400, 1..120),
        ) {
            let mut bucket = TokenBucket::new(rate, burst);
            let mut t = 0u64;
            let mut admitted = Vec::new();
            for gap in gaps_ms.drain(..) {
                t += gap;
                if bucket.check(Duration::from_millis(t)) == RateDecision::Allow {
                    admitted.push(t);
                }
            }
            for i in 0..admitted.len() {
                for j in i..admitted.len() {
                    let count = (j - i + 1) as f64;
                    let window = (admitted[j] - admitted[i]) as f64 / 1000.0;
                    prop_assert!(count <= f64::from(burst) + rate * window + 1e-6,
                        "{count} admitted in {window}s");
                }
            }
        }
    }
}
