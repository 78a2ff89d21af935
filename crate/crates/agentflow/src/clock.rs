//! Time source. Runs take timestamps and durations from a [`Clock`] so tests
//! can make traces byte-stable.

use std::time::Instant;

pub trait Clock: Send + Sync {
    /// Milliseconds since an arbitrary origin.
    fn now_ms(&self) -> u64;
    /// RFC 3339 wall-clock time.
    fn timestamp(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn timestamp(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Time stands still.
#[derive(Debug, Clone, Default)]
pub struct FixedClock;

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        0
    }

    fn timestamp(&self) -> String {
        "2026-01-01T00:00:00.000Z".to_string()
    }
}
