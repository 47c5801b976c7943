//! Durable metadata: a snapshot plus an append-only journal.
//!
//! Layout under `meta/`:
//!
//! * `snapshot.json` holds `{"last_seq": N, "state": {...}}`, written to a
//!   temp file, synced, then renamed into place.
//! * `journal.log` is a sequence of records, each
//!   `len: u32 LE | crc32(payload): u32 LE | payload`, where the payload is
//!   the JSON `{"seq": N, "mutation": {...}}`.
//!
//! Recovery loads the snapshot, replays journal records with `seq` above the
//! snapshot's, and truncates at the first short or corrupt record. A commit
//! returns only after its record is synced (with [`Durability::Sync`]), so
//! every acknowledged mutation survives a crash and nothing half-written is
//! ever applied.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::failpoint::{CrashPoint, Failpoints};
use crate::state::{Mutation, State};

const SNAPSHOT: &str = "snapshot.json";
const SNAPSHOT_TMP: &str = "snapshot.json.tmp";
const JOURNAL: &str = "journal.log";
const HEADER_LEN: usize = 8;
const MAX_RECORD_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// fsync every commit.
    #[default]
    Sync,
    /// Leave flushing to the OS. For tests and throwaway stores.
    Buffered,
}

#[derive(Serialize, Deserialize)]
struct JournalRecord<'a> {
    seq: u64,
    mutation: std::borrow::Cow<'a, Mutation>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    last_seq: u64,
    state: State,
}

pub(crate) struct MetaStore {
    dir: PathBuf,
    journal: File,
    journal_len: u64,
    last_seq: u64,
    since_snapshot: usize,
    compact_after: usize,
    durability: Durability,
    failpoints: Arc<Failpoints>,
    poisoned: bool,
}

fn storage(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Storage(format!("{context}: {e}"))
}

pub(crate) fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

impl MetaStore {
    pub(crate) fn open(
        dir: &Path,
        durability: Durability,
        compact_after: usize,
        failpoints: Arc<Failpoints>,
    ) -> Result<(MetaStore, State)> {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join(SNAPSHOT_TMP));

        let (mut state, snapshot_seq) = match fs::read(dir.join(SNAPSHOT)) {
            Ok(bytes) => {
                let snap: Snapshot =
                    serde_json::from_slice(&bytes).map_err(|e| storage("corrupt snapshot", e))?;
                (snap.state, snap.last_seq)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (State::default(), 0),
            Err(e) => return Err(e.into()),
        };
        state.reindex();

        let mut journal = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(dir.join(JOURNAL))?;
        let mut bytes = Vec::new();
        journal.read_to_end(&mut bytes)?;

        let mut offset = 0usize;
        let mut last_seq = snapshot_seq;
        let mut replayed = 0usize;
        while let Some((record_len, payload)) = next_record(&bytes[offset..]) {
            let record: JournalRecord =
                serde_json::from_slice(payload).map_err(|e| storage("corrupt journal record", e))?;
            if record.seq > last_seq {
                if record.seq != last_seq + 1 {
                    return Err(storage(
                        "journal gap",
                        format!("expected seq {}, found {}", last_seq + 1, record.seq),
                    ));
                }
                state
                    .apply(&record.mutation)
                    .map_err(|e| storage("journal replay", e))?;
                last_seq = record.seq;
                replayed += 1;
            }
            offset += record_len;
        }
        if offset < bytes.len() {
            // Torn tail from a crash mid-commit: drop it.
            journal.set_len(offset as u64)?;
            journal.sync_all()?;
        }

        Ok((
            MetaStore {
                dir: dir.to_path_buf(),
                journal,
                journal_len: offset as u64,
                last_seq,
                since_snapshot: replayed,
                compact_after,
                durability,
                failpoints,
                poisoned: false,
            },
            state,
        ))
    }

    pub(crate) fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Journals `m` and applies it to `state`. On error neither the journal
    /// nor `state` changes.
    pub(crate) fn commit(&mut self, state: &mut State, m: &Mutation) -> Result<()> {
        if self.poisoned {
            return Err(Error::Storage("metadata store is poisoned by an earlier write failure".into()));
        }
        let seq = self.last_seq + 1;
        let payload = serde_json::to_vec(&JournalRecord {
            seq,
            mutation: std::borrow::Cow::Borrowed(m),
        })
        .map_err(|e| storage("encode", e))?;
        let mut record = Vec::with_capacity(HEADER_LEN + payload.len());
        record.extend((payload.len() as u32).to_le_bytes());
        record.extend(crc32fast::hash(&payload).to_le_bytes());
        record.extend(&payload);

        if self.failpoints.hit(CrashPoint::MidCommit) {
            let half = record.len() / 2;
            let _ = self.journal.write_all(&record[..half]);
            let _ = self.journal.sync_data();
            std::process::abort();
        }

        if let Err(e) = self.append(&record) {
            // Roll the file back so later records never follow a torn one.
            if self.journal.set_len(self.journal_len).is_err() {
                self.poisoned = true;
            }
            return Err(e);
        }
        self.journal_len += record.len() as u64;
        self.last_seq = seq;
        state
            .apply(m)
            .map_err(|e| storage("apply after commit", e))?;

        self.since_snapshot += 1;
        if self.since_snapshot >= self.compact_after {
            self.compact(state)?;
        }
        Ok(())
    }

    fn append(&mut self, record: &[u8]) -> Result<()> {
        self.journal.write_all(record)?;
        if self.durability == Durability::Sync {
            self.journal.sync_data()?;
        }
        Ok(())
    }

    /// Folds the journal into a fresh snapshot.
    pub(crate) fn compact(&mut self, state: &State) -> Result<()> {
        let tmp = self.dir.join(SNAPSHOT_TMP);
        let bytes = serde_json::to_vec(&Snapshot {
            last_seq: self.last_seq,
            state: state.clone(),
        })
        .map_err(|e| storage("encode snapshot", e))?;
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        sync_dir(&self.dir)?;
        // Records at or below last_seq are skipped on replay, so a crash
        // before this truncation is harmless.
        self.journal.set_len(0)?;
        self.journal.seek(SeekFrom::End(0))?;
        self.journal.sync_all()?;
        self.journal_len = 0;
        self.since_snapshot = 0;
        Ok(())
    }
}

/// Splits off one complete, checksummed record.
fn next_record(buf: &[u8]) -> Option<(usize, &[u8])> {
    if buf.len() < HEADER_LEN {
        return None;
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().ok()?);
    let crc = u32::from_le_bytes(buf[4..8].try_into().ok()?);
    if len > MAX_RECORD_LEN {
        return None;
    }
    let end = HEADER_LEN + len as usize;
    let payload = buf.get(HEADER_LEN..end)?;
    (crc32fast::hash(payload) == crc).then_some((end, payload))
}
