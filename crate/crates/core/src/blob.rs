//! Content-addressed blob storage.
//!
//! Blobs live at `blobs/<first two hex chars>/<64-hex sha256>`. Writers
//! stream into a uniquely named file under `blobs/tmp/`, verify the digest,
//! sync, and rename into place, so a blob path either holds the complete
//! verified bytes or does not exist.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::domain::BlobKey;
use crate::error::{Error, Result};
use crate::failpoint::{CrashPoint, Failpoints};
use crate::meta::sync_dir;
use crate::validate::BlobLookup;

pub const DEFAULT_MAX_BLOB_SIZE: u64 = 256 * 1024 * 1024;
const TMP_DIR: &str = "tmp";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutOutcome {
    pub key: BlobKey,
    pub size_bytes: u64,
    /// False when the blob was already present (dedup).
    pub created: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScrubReport {
    pub checked: usize,
    pub corrupt: Vec<BlobKey>,
    /// Files in the fan-out directories whose names are not digests.
    pub stray: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GcReport {
    pub removed: Vec<BlobKey>,
    pub bytes_freed: u64,
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
    max_blob_size: u64,
    paranoid: bool,
    failpoints: Arc<Failpoints>,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>, max_blob_size: u64, paranoid: bool) -> Result<Self> {
        Self::open_with(root.into(), max_blob_size, paranoid, Arc::default())
    }

    pub(crate) fn open_with(
        root: PathBuf,
        max_blob_size: u64,
        paranoid: bool,
        failpoints: Arc<Failpoints>,
    ) -> Result<Self> {
        let tmp = root.join(TMP_DIR);
        // Leftovers from interrupted uploads were never visible; drop them.
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(BlobStore {
            root,
            max_blob_size,
            paranoid,
            failpoints,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn max_blob_size(&self) -> u64 {
        self.max_blob_size
    }

    pub fn path_of(&self, key: &BlobKey) -> PathBuf {
        self.root.join(key.prefix()).join(key.as_str())
    }

    /// Starts a streaming upload.
    pub fn writer(&self) -> Result<BlobWriter<'_>> {
        let tmp_path = self.root.join(TMP_DIR).join(Uuid::new_v4().to_string());
        let file = File::create(&tmp_path)?;
        Ok(BlobWriter {
            store: self,
            file: Some(file),
            tmp_path,
            hasher: Sha256::new(),
            len: 0,
        })
    }

    pub fn put(&self, claimed: &BlobKey, bytes: &[u8]) -> Result<PutOutcome> {
        let mut w = self.writer()?;
        w.write_chunk(bytes)?;
        w.finish(claimed)
    }

    pub fn put_reader(&self, claimed: &BlobKey, mut reader: impl Read) -> Result<PutOutcome> {
        let mut w = self.writer()?;
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            w.write_chunk(&buf[..n])?;
        }
        w.finish(claimed)
    }

    /// Stored bytes. In paranoid mode the digest is re-verified first.
    pub fn get(&self, key: &BlobKey) -> Result<Vec<u8>> {
        let bytes = match fs::read(self.path_of(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::UnknownBlob(key.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        if self.paranoid && BlobKey::of(&bytes) != *key {
            return Err(Error::CorruptBlob(key.clone()));
        }
        Ok(bytes)
    }

    pub fn has(&self, key: &BlobKey) -> bool {
        self.path_of(key).is_file()
    }

    pub fn len_of(&self, key: &BlobKey) -> Option<u64> {
        fs::metadata(self.path_of(key))
            .ok()
            .filter(|m| m.is_file())
            .map(|m| m.len())
    }

    /// Every stored key, in no particular order.
    pub fn keys(&self) -> Result<Vec<BlobKey>> {
        Ok(self.walk()?.into_iter().filter_map(|(k, _)| k).collect())
    }

    fn walk(&self) -> Result<Vec<(Option<BlobKey>, PathBuf)>> {
        let mut out = Vec::new();
        for dir in fs::read_dir(&self.root)? {
            let dir = dir?;
            let name = dir.file_name();
            if name == TMP_DIR || !dir.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(dir.path())? {
                let f = f?;
                let key = f
                    .file_name()
                    .to_str()
                    .and_then(BlobKey::parse)
                    .filter(|k| k.prefix() == name.to_string_lossy());
                out.push((key, f.path()));
            }
        }
        Ok(out)
    }

    /// Re-hashes every stored blob.
    pub fn scrub(&self) -> Result<ScrubReport> {
        let mut report = ScrubReport::default();
        for (key, path) in self.walk()? {
            match key {
                Some(key) => {
                    report.checked += 1;
                    let mut hasher = Sha256::new();
                    io::copy(&mut File::open(&path)?, &mut hasher)?;
                    if hex::encode(hasher.finalize()) != key.as_str() {
                        report.corrupt.push(key);
                    }
                }
                None => report.stray.push(path),
            }
        }
        Ok(report)
    }

    /// Deletes every blob not in `referenced`. Only safe while no uploads
    /// are in flight, since a freshly uploaded blob is unreferenced until
    /// its manifest is submitted.
    pub fn collect_garbage(&self, referenced: &HashSet<BlobKey>) -> Result<GcReport> {
        let mut report = GcReport::default();
        for key in self.keys()? {
            if referenced.contains(&key) {
                continue;
            }
            let path = self.path_of(&key);
            report.bytes_freed += fs::metadata(&path)?.len();
            fs::remove_file(&path)?;
            report.removed.push(key);
        }
        Ok(report)
    }
}

impl BlobLookup for BlobStore {
    fn blob_len(&self, key: &BlobKey) -> Option<u64> {
        self.len_of(key)
    }
}

/// An in-progress upload. Dropping it without [`BlobWriter::finish`] removes
/// the temp file.
pub struct BlobWriter<'a> {
    store: &'a BlobStore,
    file: Option<File>,
    tmp_path: PathBuf,
    hasher: Sha256,
    len: u64,
}

impl BlobWriter<'_> {
    pub fn write_chunk(&mut self, chunk: &[u8]) -> Result<()> {
        self.len += chunk.len() as u64;
        if self.len > self.store.max_blob_size {
            return Err(Error::BlobTooLarge {
                max: self.store.max_blob_size,
            });
        }
        self.hasher.update(chunk);
        self.file
            .as_mut()
            .expect("writer used after finish")
            .write_all(chunk)?;
        Ok(())
    }

    pub fn finish(mut self, claimed: &BlobKey) -> Result<PutOutcome> {
        let computed = hex::encode(std::mem::take(&mut self.hasher).finalize());
        if computed != claimed.as_str() {
            return Err(Error::HashMismatch {
                claimed: claimed.to_string(),
                computed,
            });
        }
        let file = self.file.take().expect("writer used after finish");
        let dest = self.store.path_of(claimed);
        let size_bytes = self.len;
        if dest.is_file() {
            drop(file);
            let _ = fs::remove_file(&self.tmp_path);
            return Ok(PutOutcome {
                key: claimed.clone(),
                size_bytes,
                created: false,
            });
        }
        file.sync_all()?;
        drop(file);
        let parent = dest.parent().expect("blob path has a parent");
        fs::create_dir_all(parent)?;
        fs::rename(&self.tmp_path, &dest)?;
        sync_dir(parent)?;
        self.store.failpoints.check(CrashPoint::AfterBlobWrite);
        Ok(PutOutcome {
            key: claimed.clone(),
            size_bytes,
            created: true,
        })
    }
}

impl Drop for BlobWriter<'_> {
    fn drop(&mut self) {
        if self.file.is_some() || self.tmp_path.exists() {
            self.file = None;
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}
