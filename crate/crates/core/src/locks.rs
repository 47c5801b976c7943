//! Exclusive, lease-based editing locks on blocks.
//!
//! Acquisition is decided at the commit point, so among any number of
//! concurrent acquirers of an unlocked block exactly one wins and the rest
//! see `LOCK_HELD` immediately (there is no queue). Expiry is evaluated
//! against the injected clock on every access: a lock is dead at its
//! `expires_at` whether or not a sweep has removed it yet.

use std::sync::atomic::Ordering;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::auth::{authorize, require, PermissionAction};
use crate::domain::{LockRecord, UserAccount};
use crate::error::{Error, Result};
use crate::state::{Mutation, State};
use crate::Sigil;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockOp {
    Acquire { block_id: Uuid, ttl_seconds: u64 },
    Renew { lock_id: Uuid },
    Release { lock_id: Uuid },
    Status { block_id: Uuid },
}

/// One lock operation as observed at the commit point. Ordering entries by
/// `ticket` yields the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockTraceEntry {
    pub ticket: u64,
    pub now: DateTime<Utc>,
    pub actor: Uuid,
    pub op: LockOp,
    /// Returned record (acquire/renew/status) or error code.
    pub outcome: std::result::Result<Option<LockRecord>, String>,
}

fn live_lock(state: &State, block_id: &Uuid, now: DateTime<Utc>) -> Option<LockRecord> {
    state.locks.get(block_id).filter(|l| l.is_live(now)).cloned()
}

/// The lock named by `lock_id` must be live, on `block_id`, and held by
/// `actor`.
pub fn check_submit_lock(
    state: &State,
    lock_id: Uuid,
    block_id: Uuid,
    actor: Uuid,
    now: DateTime<Utc>,
) -> Result<()> {
    let lock = state.lock_by_id(&lock_id).ok_or(Error::UnknownLock)?;
    if lock.block_id != block_id {
        return Err(Error::WrongBlock {
            lock_block: lock.block_id,
            target: block_id,
        });
    }
    if !lock.is_live(now) {
        return Err(Error::LockExpired);
    }
    if lock.holder != actor {
        return Err(Error::NotHolder);
    }
    Ok(())
}

impl Sigil {
    fn traced_write(
        &self,
        actor: Uuid,
        op: LockOp,
        f: impl FnOnce(&State, DateTime<Utc>) -> Result<(Option<Mutation>, Option<LockRecord>)>,
    ) -> Result<Option<LockRecord>> {
        let mut guard = self.inner.write();
        let ticket = self.ticket.fetch_add(1, Ordering::SeqCst);
        let now = self.clock.now();
        let result = f(&guard.state, now).and_then(|(mutation, out)| {
            if let Some(m) = mutation {
                let inner = &mut *guard;
                inner.meta.commit(&mut inner.state, &m)?;
            }
            Ok(out)
        });
        self.trace(ticket, now, actor, op, &result);
        result
    }

    fn trace(
        &self,
        ticket: u64,
        now: DateTime<Utc>,
        actor: Uuid,
        op: LockOp,
        result: &Result<Option<LockRecord>>,
    ) {
        if let Some(trace) = &self.lock_trace {
            trace.lock().push(LockTraceEntry {
                ticket,
                now,
                actor,
                op,
                outcome: result.clone().map_err(|e| e.code().to_string()),
            });
        }
    }

    /// Drains the lock trace (empty unless `Config::trace_locks` is set).
    pub fn take_lock_trace(&self) -> Vec<LockTraceEntry> {
        let mut entries = self
            .lock_trace
            .as_ref()
            .map(|t| std::mem::take(&mut *t.lock()))
            .unwrap_or_default();
        entries.sort_by_key(|e| e.ticket);
        entries
    }

    /// Claims `block_id` for `actor` for `ttl_seconds` (default from config).
    pub fn acquire_lock(
        &self,
        actor: &UserAccount,
        block_id: Uuid,
        ttl_seconds: Option<u64>,
    ) -> Result<LockRecord> {
        let ttl = ttl_seconds.unwrap_or(self.config.lock_ttl_secs);
        let max = self.config.max_lock_ttl_secs;
        let op = LockOp::Acquire {
            block_id,
            ttl_seconds: ttl,
        };
        self.traced_write(actor.user_id, op, |state, now| {
            require(actor, PermissionAction::LockBlock)?;
            if ttl == 0 {
                return Err(Error::InvalidRequest("ttl_seconds must be positive".into()));
            }
            if ttl > max {
                return Err(Error::TtlTooLong { requested: ttl, max });
            }
            if !state.blocks.contains_key(&block_id) {
                return Err(Error::unknown_block(block_id));
            }
            if let Some(held) = live_lock(state, &block_id, now) {
                return Err(Error::LockHeld {
                    holder: held.holder_username,
                    expires_at: held.expires_at,
                });
            }
            let record = LockRecord {
                lock_id: Uuid::new_v4(),
                block_id,
                holder: actor.user_id,
                holder_username: actor.username.clone(),
                acquired_at: now,
                expires_at: now + Duration::seconds(ttl as i64),
                renew_count: 0,
                ttl_seconds: ttl,
            };
            Ok((Some(Mutation::PutLock(record.clone())), Some(record)))
        })
        .map(|r| r.expect("acquire yields a record"))
    }

    /// Extends a live lock by its original ttl, measured from now.
    pub fn renew_lock(&self, actor: &UserAccount, lock_id: Uuid) -> Result<LockRecord> {
        self.traced_write(actor.user_id, LockOp::Renew { lock_id }, |state, now| {
            require(actor, PermissionAction::LockBlock)?;
            let lock = state.lock_by_id(&lock_id).ok_or(Error::UnknownLock)?;
            if !lock.is_live(now) {
                return Err(Error::LockExpired);
            }
            if lock.holder != actor.user_id {
                return Err(Error::NotHolder);
            }
            let renewed = LockRecord {
                expires_at: now + Duration::seconds(lock.ttl_seconds as i64),
                renew_count: lock.renew_count + 1,
                ..lock.clone()
            };
            Ok((Some(Mutation::PutLock(renewed.clone())), Some(renewed)))
        })
        .map(|r| r.expect("renew yields a record"))
    }

    /// Releases a lock. The holder may release their own lock; an
    /// administrator may break anyone's. Expired locks count as absent.
    pub fn release_lock(&self, actor: &UserAccount, lock_id: Uuid) -> Result<()> {
        self.traced_write(actor.user_id, LockOp::Release { lock_id }, |state, now| {
            let may_break = authorize(actor, PermissionAction::BreakLock);
            if !may_break {
                require(actor, PermissionAction::LockBlock)?;
            }
            let lock = state
                .lock_by_id(&lock_id)
                .filter(|l| l.is_live(now))
                .ok_or(Error::UnknownLock)?;
            if lock.holder != actor.user_id && !may_break {
                return Err(Error::NotHolder);
            }
            Ok((Some(Mutation::RemoveLock { lock_id }), None))
        })
        .map(|_| ())
    }

    /// The live lock on `block_id`, if any.
    pub fn lock_status(&self, block_id: Uuid) -> Result<Option<LockRecord>> {
        self.lock_status_as(Uuid::nil(), block_id)
    }

    /// [`Sigil::lock_status`] attributed to `actor` in the lock trace.
    pub fn lock_status_as(&self, actor: Uuid, block_id: Uuid) -> Result<Option<LockRecord>> {
        let guard = self.inner.read();
        let ticket = self.ticket.fetch_add(1, Ordering::SeqCst);
        let now = self.clock.now();
        let result = if guard.state.blocks.contains_key(&block_id) {
            Ok(live_lock(&guard.state, &block_id, now))
        } else {
            Err(Error::unknown_block(block_id))
        };
        self.trace(ticket, now, actor, LockOp::Status { block_id }, &result);
        result
    }

    /// Every live lock, ordered by block id.
    pub fn live_locks(&self) -> Vec<LockRecord> {
        let now = self.clock.now();
        self.read(|s| {
            let mut out: Vec<LockRecord> =
                s.locks.values().filter(|l| l.is_live(now)).cloned().collect();
            out.sort_by_key(|l| l.block_id);
            out
        })
    }

    pub fn validate_for_submit(&self, lock_id: Uuid, block_id: Uuid, actor: &UserAccount) -> Result<()> {
        let now = self.clock.now();
        self.read(|s| check_submit_lock(s, lock_id, block_id, actor.user_id, now))
    }

    /// Resolves the lock a block-addressed request refers to: `lock_id` when
    /// given (it must belong to the block), otherwise the block's live lock.
    pub fn resolve_block_lock(&self, block_id: Uuid, lock_id: Option<Uuid>) -> Result<Uuid> {
        let now = self.clock.now();
        self.read(|s| {
            if !s.blocks.contains_key(&block_id) {
                return Err(Error::unknown_block(block_id));
            }
            match lock_id {
                Some(id) => s
                    .lock_by_id(&id)
                    .filter(|l| l.block_id == block_id)
                    .map(|l| l.lock_id)
                    .ok_or(Error::UnknownLock),
                None => live_lock(s, &block_id, now)
                    .map(|l| l.lock_id)
                    .ok_or(Error::UnknownLock),
            }
        })
    }
}
