use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};
use sigil_core::validate::{normalize_path, RESERVED_SEGMENT};
use sigil_core::BlobKey;

/// Replaces `path` with `bytes` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8], private: bool) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    #[cfg(not(unix))]
    let _ = private;
    let mut f = opts.open(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)
}

/// Streams a file through sha256.
pub fn hash_file(path: &Path) -> io::Result<(BlobKey, u64)> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        size += n as u64;
    }
    let key = BlobKey::parse(&hex::encode(hasher.finalize())).expect("sha256 hex is a key");
    Ok((key, size))
}

/// Maps a manifest path to a location under `root`, refusing anything
/// that is not already a normalized relative path.
pub fn contained(root: &Path, rel: &str) -> Option<PathBuf> {
    let norm = normalize_path(rel).ok()?;
    if norm != rel || norm.split('/').next() == Some(RESERVED_SEGMENT) {
        return None;
    }
    let mut out = root.to_path_buf();
    for c in Path::new(&norm).components() {
        match c {
            Component::Normal(s) => out.push(s),
            _ => return None,
        }
    }
    Some(out)
}

/// True if `dir` is missing or has no entries.
pub fn absent_or_empty(dir: &Path) -> io::Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(e),
    }
}

/// Removes empty directories from `start` up to (not including) `stop`.
pub fn prune_empty_parents(start: &Path, stop: &Path) {
    let mut cur = start.parent();
    while let Some(dir) = cur {
        if dir == stop || !dir.starts_with(stop) || fs::remove_dir(dir).is_err() {
            break;
        }
        cur = dir.parent();
    }
}

/// Writes `src` to `dest` unless `dest` already holds the same content.
/// Returns whether a write happened.
pub fn place_file(src: &Path, dest: &Path, key: &BlobKey) -> io::Result<bool> {
    if let Ok((existing, _)) = hash_file(dest) {
        if &existing == key {
            return Ok(false);
        }
    }
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    if fs::symlink_metadata(dest).is_ok_and(|m| m.is_dir()) {
        fs::remove_dir_all(dest)?;
    }
    let tmp = dest.with_file_name(format!(
        ".{}.sigil-tmp",
        dest.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    fs::copy(src, &tmp)?;
    fs::rename(&tmp, dest)?;
    Ok(true)
}
