//! Injectable time source. All TTL arithmetic in the crate goes through a
//! [`Clock`] so tests can drive expiry deterministically.

use std::sync::Arc;

use chrono::{DateTime, Duration, DurationRound, Utc};
use parking_lot::Mutex;

pub trait Clock: Send + Sync {
    /// Current instant, truncated to whole milliseconds so that values
    /// survive a JSON round trip unchanged.
    fn now(&self) -> DateTime<Utc>;
}

fn truncate_ms(t: DateTime<Utc>) -> DateTime<Utc> {
    t.duration_trunc(Duration::milliseconds(1)).unwrap_or(t)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        truncate_ms(Utc::now())
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Arc<Self> {
        Arc::new(Self {
            now: Mutex::new(truncate_ms(start)),
        })
    }

    /// A fixed, arbitrary starting instant (2024-01-01T00:00:00Z).
    pub fn at_epoch() -> Arc<Self> {
        Self::new(DateTime::from_timestamp(1_704_067_200, 0).expect("valid timestamp"))
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock();
        *now = truncate_ms(*now + by);
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.now.lock() = truncate_ms(to);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock()
    }
}
