//! The in-memory image of all metadata and the mutations that change it.
//!
//! Every state change is expressed as a [`Mutation`], journaled first and
//! then applied. Replaying the journal from an empty (or snapshotted) state
//! reproduces the committed state exactly.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::domain::{
    BlockRecord, BlockVersion, LockRecord, MapRecord, MapVersion, UserAccount, VersionRecord,
    VersionState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub token_digest: String,
    pub user_id: Uuid,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub record: BlockRecord,
    /// Version ids in seq order.
    pub versions: Vec<Uuid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub record: MapRecord,
    pub versions: Vec<Uuid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    CreateUser(UserAccount),
    CreateSession(SessionRecord),
    DeleteSession {
        token_digest: String,
    },
    CreateBlock(BlockRecord),
    CreateMap(MapRecord),
    /// Insert or replace the lock of `record.block_id`.
    PutLock(LockRecord),
    RemoveLock {
        lock_id: Uuid,
    },
    AppendBlockVersion(BlockVersion),
    AppendMapVersion(MapVersion),
    Decide {
        version_id: Uuid,
        state: VersionState,
        decided_by: Uuid,
        decided_at: DateTime<Utc>,
        reason: Option<String>,
    },
    /// Drop locks and sessions that expired at or before `now`.
    Sweep {
        now: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub users: BTreeMap<Uuid, UserAccount>,
    pub sessions: HashMap<String, SessionRecord>,
    pub blocks: BTreeMap<Uuid, BlockEntry>,
    pub maps: BTreeMap<Uuid, MapEntry>,
    pub versions: HashMap<Uuid, VersionRecord>,
    /// At most one record per block; may be expired until swept or replaced.
    pub locks: HashMap<Uuid, LockRecord>,

    #[serde(skip)]
    pub usernames: HashMap<String, Uuid>,
    #[serde(skip)]
    pub lock_index: HashMap<Uuid, Uuid>,
}

impl State {
    /// Rebuilds the derived indexes after deserialization.
    pub fn reindex(&mut self) {
        self.usernames = self
            .users
            .values()
            .map(|u| (u.username.clone(), u.user_id))
            .collect();
        self.lock_index = self
            .locks
            .values()
            .map(|l| (l.lock_id, l.block_id))
            .collect();
    }

    pub fn account_by_name(&self, username: &str) -> Option<&UserAccount> {
        self.usernames.get(username).and_then(|id| self.users.get(id))
    }

    pub fn block_version(&self, id: &Uuid) -> Option<&BlockVersion> {
        match self.versions.get(id) {
            Some(VersionRecord::Block(v)) => Some(v),
            _ => None,
        }
    }

    pub fn map_version(&self, id: &Uuid) -> Option<&MapVersion> {
        match self.versions.get(id) {
            Some(VersionRecord::Map(v)) => Some(v),
            _ => None,
        }
    }

    pub fn lock_by_id(&self, lock_id: &Uuid) -> Option<&LockRecord> {
        self.lock_index
            .get(lock_id)
            .and_then(|b| self.locks.get(b))
            .filter(|l| l.lock_id == *lock_id)
    }

    /// Applies a committed mutation. Mutations are validated before they are
    /// journaled, so an error here means the journal itself is inconsistent.
    pub fn apply(&mut self, m: &Mutation) -> Result<(), String> {
        match m {
            Mutation::CreateUser(u) => {
                if self.usernames.contains_key(&u.username) {
                    return Err(format!("duplicate username {}", u.username));
                }
                self.usernames.insert(u.username.clone(), u.user_id);
                self.users.insert(u.user_id, u.clone());
            }
            Mutation::CreateSession(s) => {
                self.sessions.insert(s.token_digest.clone(), s.clone());
            }
            Mutation::DeleteSession { token_digest } => {
                self.sessions.remove(token_digest);
            }
            Mutation::CreateBlock(b) => {
                self.blocks.insert(
                    b.block_id,
                    BlockEntry {
                        record: b.clone(),
                        versions: Vec::new(),
                    },
                );
            }
            Mutation::CreateMap(mp) => {
                self.maps.insert(
                    mp.map_id,
                    MapEntry {
                        record: mp.clone(),
                        versions: Vec::new(),
                    },
                );
            }
            Mutation::PutLock(l) => {
                if !self.blocks.contains_key(&l.block_id) {
                    return Err(format!("lock on unknown block {}", l.block_id));
                }
                if let Some(old) = self.locks.insert(l.block_id, l.clone()) {
                    self.lock_index.remove(&old.lock_id);
                }
                self.lock_index.insert(l.lock_id, l.block_id);
            }
            Mutation::RemoveLock { lock_id } => {
                if let Some(block) = self.lock_index.remove(lock_id) {
                    self.locks.remove(&block);
                }
            }
            Mutation::AppendBlockVersion(v) => {
                let entry = self
                    .blocks
                    .get_mut(&v.block_id)
                    .ok_or_else(|| format!("version for unknown block {}", v.block_id))?;
                if v.seq != entry.versions.len() as u64 + 1 {
                    return Err(format!("non-contiguous seq {} for block {}", v.seq, v.block_id));
                }
                entry.versions.push(v.version_id);
                self.versions.insert(v.version_id, VersionRecord::Block(v.clone()));
            }
            Mutation::AppendMapVersion(v) => {
                let entry = self
                    .maps
                    .get_mut(&v.map_id)
                    .ok_or_else(|| format!("version for unknown map {}", v.map_id))?;
                if v.seq != entry.versions.len() as u64 + 1 {
                    return Err(format!("non-contiguous seq {} for map {}", v.seq, v.map_id));
                }
                entry.versions.push(v.version_id);
                self.versions.insert(v.version_id, VersionRecord::Map(v.clone()));
            }
            Mutation::Decide {
                version_id,
                state,
                decided_by,
                decided_at,
                reason,
            } => {
                let record = self
                    .versions
                    .get_mut(version_id)
                    .ok_or_else(|| format!("decision on unknown version {version_id}"))?;
                let target = match record {
                    VersionRecord::Block(v) => {
                        if v.state.is_terminal() {
                            return Err(format!("version {version_id} decided twice"));
                        }
                        v.state = *state;
                        v.decided_by = Some(*decided_by);
                        v.decided_at = Some(*decided_at);
                        v.reason = reason.clone();
                        self.blocks.get_mut(&v.block_id).map(|b| &mut b.record.head_version)
                    }
                    VersionRecord::Map(v) => {
                        if v.state.is_terminal() {
                            return Err(format!("version {version_id} decided twice"));
                        }
                        v.state = *state;
                        v.decided_by = Some(*decided_by);
                        v.decided_at = Some(*decided_at);
                        v.reason = reason.clone();
                        self.maps.get_mut(&v.map_id).map(|m| &mut m.record.head_version)
                    }
                };
                if *state == VersionState::Approved {
                    *target.ok_or("decision for unknown owner")? = Some(*version_id);
                }
            }
            Mutation::Sweep { now } => {
                let now = *now;
                let expired: Vec<Uuid> = self
                    .locks
                    .values()
                    .filter(|l| !l.is_live(now))
                    .map(|l| l.lock_id)
                    .collect();
                for id in expired {
                    if let Some(block) = self.lock_index.remove(&id) {
                        self.locks.remove(&block);
                    }
                }
                self.sessions.retain(|_, s| now < s.expires_at);
            }
        }
        Ok(())
    }

    /// Cross-record invariants. Returns a description of every breach found;
    /// an empty list means the state is consistent.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (id, b) in &self.blocks {
            for (i, vid) in b.versions.iter().enumerate() {
                match self.block_version(vid) {
                    Some(v) if v.block_id == *id && v.seq == i as u64 + 1 => {}
                    _ => out.push(format!("block {id}: history entry {i} is inconsistent")),
                }
            }
            if let Some(head) = b.record.head_version {
                match self.block_version(&head) {
                    Some(v) if v.block_id == *id && v.state == VersionState::Approved => {}
                    _ => out.push(format!("block {id}: head {head} is not an approved version")),
                }
            }
        }
        for (id, m) in &self.maps {
            for (i, vid) in m.versions.iter().enumerate() {
                match self.map_version(vid) {
                    Some(v) if v.map_id == *id && v.seq == i as u64 + 1 => {}
                    _ => out.push(format!("map {id}: history entry {i} is inconsistent")),
                }
            }
            if let Some(head) = m.record.head_version {
                match self.map_version(&head) {
                    Some(v) if v.map_id == *id && v.state == VersionState::Approved => {}
                    _ => out.push(format!("map {id}: head {head} is not an approved version")),
                }
            }
        }
        for v in self.versions.values() {
            let (decided_by, decided_at, state) = match v {
                VersionRecord::Block(b) => (b.decided_by, b.decided_at, b.state),
                VersionRecord::Map(m) => (m.decided_by, m.decided_at, m.state),
            };
            if state.is_terminal() != (decided_by.is_some() && decided_at.is_some()) {
                out.push(format!("version {}: decision fields inconsistent", v.version_id()));
            }
            if let VersionRecord::Map(m) = v {
                for (i, p) in m.placements.iter().enumerate() {
                    if !self.blocks.contains_key(&p.block_id) {
                        out.push(format!("map version {}: placement {i} dangles", m.version_id));
                    }
                }
            }
        }
        for (block, l) in &self.locks {
            if l.block_id != *block || l.expires_at <= l.acquired_at {
                out.push(format!("lock {} is malformed", l.lock_id));
            }
        }
        out
    }
}
