//! Crash injection for durability testing.
//!
//! A [`CrashPlan`] names a point in the write path and how many times it may
//! be passed before the process aborts. Production configurations carry no
//! plan and every check is a single relaxed load.

use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// After a blob has been renamed into place and synced.
    AfterBlobWrite,
    /// Halfway through writing a journal record.
    MidCommit,
    /// After an approval has been committed.
    AfterApprove,
}

impl FromStr for CrashPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "after_blob_write" => Ok(CrashPoint::AfterBlobWrite),
            "mid_commit" => Ok(CrashPoint::MidCommit),
            "after_approve" => Ok(CrashPoint::AfterApprove),
            other => Err(format!("unknown crash point {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrashPlan {
    pub point: CrashPoint,
    /// Number of passes that survive; the next one aborts.
    pub survive: u32,
}

#[derive(Debug, Default)]
pub(crate) struct Failpoints {
    plan: Option<CrashPoint>,
    remaining: AtomicI64,
}

impl Failpoints {
    pub(crate) fn new(plan: Option<CrashPlan>) -> Self {
        Failpoints {
            plan: plan.map(|p| p.point),
            remaining: AtomicI64::new(plan.map_or(0, |p| i64::from(p.survive))),
        }
    }

    /// True when the process should die at `point` now.
    pub(crate) fn hit(&self, point: CrashPoint) -> bool {
        self.plan == Some(point) && self.remaining.fetch_sub(1, Ordering::SeqCst) <= 0
    }

    pub(crate) fn check(&self, point: CrashPoint) {
        if self.hit(point) {
            std::process::abort();
        }
    }
}
