//! Versioned content service for collaboratively edited 3D environments.
//!
//! Content is organized as *maps* that place independently versioned
//! *blocks*. Editors lock a block, download its edit project, upload new
//! assets and submit a pending version; administrators approve or reject
//! it; everyone syncs approved heads.
//!
//! [`Sigil`] is the single entry point. All metadata mutations funnel through
//! one commit point (a journaled write lock), so seq assignment, lock
//! acquisition and head updates are linearizable. Blob uploads run outside
//! that lock.

pub mod auth;
pub mod blob;
pub mod clock;
pub mod domain;
pub mod error;
pub mod failpoint;
pub mod locks;
mod meta;
pub mod state;
pub mod validate;
pub mod versions;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use uuid::Uuid;

pub use crate::auth::PermissionAction;
pub use crate::blob::{BlobStore, GcReport, PutOutcome, ScrubReport};
pub use crate::clock::{Clock, ManualClock, SystemClock};
pub use crate::domain::*;
pub use crate::error::{Error, Result};
pub use crate::failpoint::{CrashPlan, CrashPoint};
pub use crate::locks::{LockOp, LockTraceEntry};
pub use crate::meta::Durability;
pub use crate::validate::{Violation, ViolationCode};

use crate::auth::require;
use crate::failpoint::Failpoints;
use crate::meta::MetaStore;
use crate::state::{Mutation, State};

pub const DEFAULT_SESSION_TTL_SECS: u64 = 86_400;
pub const DEFAULT_LOCK_TTL_SECS: u64 = 1_800;
pub const DEFAULT_MAX_LOCK_TTL_SECS: u64 = 7_200;
/// Upper bound on list endpoint sizes.
pub const LIST_CAP: usize = 10_000;

const DIR_LOCK_FILE: &str = "LOCK";

#[derive(Debug, Clone)]
pub struct Config {
    pub data_dir: PathBuf,
    pub session_ttl_secs: u64,
    pub lock_ttl_secs: u64,
    pub max_lock_ttl_secs: u64,
    pub max_blob_size: u64,
    pub paranoid_reads: bool,
    pub durability: Durability,
    pub password_iterations: u32,
    /// Journal records between snapshots.
    pub compact_after: usize,
    /// Record every lock operation for linearizability checking.
    pub trace_locks: bool,
    pub crash: Option<CrashPlan>,
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Config {
            data_dir: data_dir.into(),
            session_ttl_secs: DEFAULT_SESSION_TTL_SECS,
            lock_ttl_secs: DEFAULT_LOCK_TTL_SECS,
            max_lock_ttl_secs: DEFAULT_MAX_LOCK_TTL_SECS,
            max_blob_size: blob::DEFAULT_MAX_BLOB_SIZE,
            paranoid_reads: false,
            durability: Durability::Sync,
            password_iterations: auth::DEFAULT_PASSWORD_ITERATIONS,
            compact_after: 4096,
            trace_locks: false,
            crash: None,
        }
    }
}

struct Inner {
    state: State,
    meta: MetaStore,
}

pub struct Sigil {
    config: Config,
    clock: Arc<dyn Clock>,
    inner: RwLock<Inner>,
    blobs: BlobStore,
    failpoints: Arc<Failpoints>,
    dummy_digest: String,
    ticket: AtomicU64,
    lock_trace: Option<Mutex<Vec<LockTraceEntry>>>,
    _dir_lock: File,
}

impl Sigil {
    pub fn open(config: Config) -> Result<Sigil> {
        Self::open_with_clock(config, Arc::new(SystemClock))
    }

    /// Opens (or initializes) the store in `config.data_dir`. Fails if
    /// another process or handle already serves the same directory.
    pub fn open_with_clock(config: Config, clock: Arc<dyn Clock>) -> Result<Sigil> {
        std::fs::create_dir_all(&config.data_dir)?;
        let dir_lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(config.data_dir.join(DIR_LOCK_FILE))?;
        if dir_lock.try_lock().is_err() {
            return Err(Error::Storage(format!(
                "data directory {} is in use by another instance",
                config.data_dir.display()
            )));
        }
        let failpoints = Arc::new(Failpoints::new(config.crash));
        let (meta, state) = MetaStore::open(
            &config.data_dir.join("meta"),
            config.durability,
            config.compact_after.max(1),
            failpoints.clone(),
        )?;
        let blobs = BlobStore::open_with(
            config.data_dir.join("blobs"),
            config.max_blob_size,
            config.paranoid_reads,
            failpoints.clone(),
        )?;
        Ok(Sigil {
            dummy_digest: auth::hash_password("dummy-password", config.password_iterations),
            lock_trace: config.trace_locks.then(|| Mutex::new(Vec::new())),
            config,
            clock,
            inner: RwLock::new(Inner { state, meta }),
            blobs,
            failpoints,
            ticket: AtomicU64::new(0),
            _dir_lock: dir_lock,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub(crate) fn read<R>(&self, f: impl FnOnce(&State) -> R) -> R {
        f(&self.inner.read().state)
    }

    /// Runs `f` at the commit point. If it yields a mutation, that mutation
    /// is journaled and applied before the result is returned.
    pub(crate) fn write<R>(
        &self,
        f: impl FnOnce(&State, DateTime<Utc>) -> Result<(Option<Mutation>, R)>,
    ) -> Result<R> {
        let mut guard = self.inner.write();
        let now = self.clock.now();
        let (mutation, out) = f(&guard.state, now)?;
        if let Some(m) = mutation {
            let Inner { state, meta } = &mut *guard;
            meta.commit(state, &m)?;
        }
        Ok(out)
    }

    /// A consistent copy of the whole metadata state.
    pub fn snapshot(&self) -> State {
        self.inner.read().state.clone()
    }

    /// Sequence number of the last committed mutation.
    pub fn commit_seq(&self) -> u64 {
        self.inner.read().meta.last_seq()
    }

    /// Folds the journal into a snapshot now.
    pub fn compact(&self) -> Result<()> {
        let mut guard = self.inner.write();
        let Inner { state, meta } = &mut *guard;
        meta.compact(state)
    }

    /// Physically drops expired locks and sessions. Reads already treat them
    /// as absent, so this is storage hygiene only. Returns whether anything
    /// was removed.
    pub fn sweep_expired(&self) -> Result<bool> {
        self.write(|state, now| {
            let stale = state.locks.values().any(|l| !l.is_live(now))
                || state.sessions.values().any(|s| now >= s.expires_at);
            Ok((stale.then_some(Mutation::Sweep { now }), stale))
        })
    }

    pub fn create_block(&self, actor: &UserAccount, name: &str) -> Result<BlockRecord> {
        require(actor, PermissionAction::CreateBlock)?;
        validate_name(name)?;
        self.write(|_, now| {
            let record = BlockRecord {
                block_id: Uuid::new_v4(),
                name: name.to_string(),
                head_version: None,
                created_by: actor.user_id,
                created_at: now,
            };
            Ok((Some(Mutation::CreateBlock(record.clone())), record))
        })
    }

    pub fn create_map(&self, actor: &UserAccount, name: &str) -> Result<MapRecord> {
        require(actor, PermissionAction::CreateMap)?;
        validate_name(name)?;
        self.write(|_, now| {
            let record = MapRecord {
                map_id: Uuid::new_v4(),
                name: name.to_string(),
                head_version: None,
                created_by: actor.user_id,
                created_at: now,
            };
            Ok((Some(Mutation::CreateMap(record.clone())), record))
        })
    }

    pub fn block(&self, block_id: Uuid) -> Result<BlockRecord> {
        self.read(|s| s.blocks.get(&block_id).map(|b| b.record.clone()))
            .ok_or_else(|| Error::unknown_block(block_id))
    }

    pub fn list_blocks(&self) -> Vec<BlockRecord> {
        self.read(|s| s.blocks.values().take(LIST_CAP).map(|b| b.record.clone()).collect())
    }

    pub fn list_maps(&self) -> Vec<MapRecord> {
        self.read(|s| s.maps.values().take(LIST_CAP).map(|m| m.record.clone()).collect())
    }

    pub fn account(&self, user_id: Uuid) -> Option<UserAccount> {
        self.read(|s| s.users.get(&user_id).cloned())
    }

    pub fn put_blob(&self, actor: &UserAccount, claimed: &BlobKey, bytes: &[u8]) -> Result<PutOutcome> {
        require(actor, PermissionAction::SubmitBlockVersion)?;
        self.blobs.put(claimed, bytes)
    }

    pub fn get_blob(&self, key: &BlobKey) -> Result<Vec<u8>> {
        self.blobs.get(key)
    }

    pub fn has_blob(&self, key: &BlobKey) -> bool {
        self.blobs.has(key)
    }

    /// Every blob referenced by any version, in any state.
    pub fn referenced_blobs(&self) -> HashSet<BlobKey> {
        self.read(|s| {
            s.versions
                .values()
                .filter_map(|v| match v {
                    VersionRecord::Block(b) => Some(&b.manifest.assets),
                    VersionRecord::Map(_) => None,
                })
                .flatten()
                .map(|a| a.content_hash.clone())
                .collect()
        })
    }

    /// Removes blobs that no version references. Run only while no client
    /// is uploading (for example with the server stopped).
    pub fn collect_garbage(&self) -> Result<GcReport> {
        let referenced = self.referenced_blobs();
        self.blobs.collect_garbage(&referenced)
    }
}
