use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Errors that know whether another attempt could succeed.
pub trait Retryable {
    fn is_retryable(&self) -> bool;
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Fraction in `[0, 1]`; each delay is scaled by a factor drawn from
    /// `[1 - jitter, 1]`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 500,
            max_backoff_ms: 8_000,
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        RetryPolicy {
            max_attempts: 1,
            ..RetryPolicy::default()
        }
    }

    /// Delay before attempt `failed + 1`, ignoring jitter.
    pub fn nominal_delay(&self, failed: u32) -> Duration {
        let shift = failed.saturating_sub(1).min(32);
        let ms = self
            .base_backoff_ms
            .saturating_mul(1u64 << shift)
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    fn jittered_delay(&self, failed: u32) -> Duration {
        let nominal = self.nominal_delay(failed);
        let jitter = self.jitter.clamp(0.0, 1.0);
        if jitter == 0.0 || nominal.is_zero() {
            return nominal;
        }
        let factor = 1.0 - jitter * rand::rng().random::<f64>();
        nominal.mul_f64(factor)
    }
}

/// Runs `call` until it succeeds, fails with a non-retryable error, or
/// `max_attempts` attempts have been made. `call` receives the 1-based
/// attempt number.
pub fn with_retry<T, E, F>(policy: &RetryPolicy, mut call: F) -> Result<T, E>
where
    E: Retryable + std::fmt::Display,
    F: FnMut(u32) -> Result<T, E>,
{
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match call(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < max_attempts => {
                let delay = policy.jittered_delay(attempt);
                log::debug!("attempt {attempt}/{max_attempts} failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
