//! A sync mirror: read-only copies of every approved block and map head.
//!
//! Layout: `blocks/<block_id>/<asset path>`, `maps/<map_id>.json` (the
//! placements), and `.sigil/mirror.json` recording which version of each
//! block and map is on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigil_core::{BlobKey, ClientState, PackManifest, SyncResponse};
use uuid::Uuid;

use crate::client::Client;
use crate::error::{CliError, CliResult};
use crate::fsutil::{contained, hash_file, place_file, prune_empty_parents, write_atomic};
use crate::transfer;
use crate::workspace::CONTROL_DIR;

pub const FORMAT: u32 = 1;
const STATE_FILE: &str = "mirror.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MirrorState {
    pub format: u32,
    pub server_url: String,
    pub blocks: BTreeMap<Uuid, Uuid>,
    pub maps: BTreeMap<Uuid, Uuid>,
    /// Paths on disk per block, to remove files a newer head dropped.
    #[serde(default)]
    pub paths: BTreeMap<Uuid, Vec<String>>,
}

impl MirrorState {
    pub fn path(root: &Path) -> PathBuf {
        root.join(CONTROL_DIR).join(STATE_FILE)
    }

    pub fn load(root: &Path) -> CliResult<Option<MirrorState>> {
        let path = Self::path(root);
        match fs::read_to_string(&path) {
            Ok(text) => {
                let s: MirrorState = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("{}: corrupt mirror state: {e}", path.display())))?;
                if s.format != FORMAT {
                    return Err(CliError::usage(format!(
                        "{}: unsupported mirror format {}",
                        path.display(),
                        s.format
                    )));
                }
                Ok(Some(s))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(&path.display().to_string(), e)),
        }
    }

    pub fn save(&self, root: &Path) -> CliResult<()> {
        let dir = root.join(CONTROL_DIR);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        let path = Self::path(root);
        let mut bytes = serde_json::to_vec_pretty(self).expect("mirror state serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes, false).map_err(|e| CliError::io(&path.display().to_string(), e))
    }

    pub fn client_state(&self) -> ClientState {
        ClientState {
            blocks: self.blocks.clone(),
            maps: self.maps.clone(),
        }
    }
}

pub fn block_dir(root: &Path, block: Uuid) -> PathBuf {
    root.join("blocks").join(block.to_string())
}

pub fn map_file(root: &Path, map: Uuid) -> PathBuf {
    root.join("maps").join(format!("{map}.json"))
}

/// What one sync changed.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SyncReport {
    pub blocks: Vec<Change>,
    pub maps: Vec<Change>,
    pub removed: Vec<Uuid>,
    pub files_written: usize,
    pub files_removed: usize,
    pub blobs_downloaded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Change {
    pub id: Uuid,
    pub old_version: Option<Uuid>,
    pub new_version: Uuid,
}

impl SyncReport {
    pub fn is_noop(&self) -> bool {
        self.blocks.is_empty() && self.maps.is_empty() && self.removed.is_empty()
    }
}

fn check_paths(block: Uuid, m: &PackManifest, dir: &Path) -> CliResult<Vec<(PathBuf, BlobKey, u64)>> {
    m.assets
        .iter()
        .map(|a| {
            contained(dir, &a.path)
                .map(|p| (p, a.content_hash.clone(), a.size_bytes))
                .ok_or_else(|| {
                    CliError::new(
                        "CORRUPT_DOWNLOAD",
                        format!("block {block} names unsafe path {:?}", a.path),
                    )
                })
        })
        .collect()
}

/// Brings the mirror at `root` up to date. Blobs are downloaded and
/// verified before any file under `blocks/` or `maps/` is touched.
pub fn sync(client: &Client, root: &Path, state: &mut MirrorState) -> CliResult<SyncReport> {
    let resp: SyncResponse = client.typed(
        "POST",
        "/sync",
        Some(&serde_json::to_value(state.client_state()).expect("client state serializes")),
    )?;
    let mut report = SyncReport::default();

    let mut plans = Vec::new();
    let mut needed: BTreeMap<BlobKey, u64> = BTreeMap::new();
    for d in &resp.deltas {
        let dir = block_dir(root, d.block_id);
        let files = check_paths(d.block_id, &d.manifest, &dir)?;
        for (path, key, size) in &files {
            let current = hash_file(path).ok().map(|(k, _)| k);
            if current.as_ref() != Some(key) {
                needed.insert(key.clone(), *size);
            }
        }
        plans.push((d, dir, files));
    }

    let staging = root.join(CONTROL_DIR).join("staging");
    fs::create_dir_all(&staging).map_err(|e| CliError::io(&staging.display().to_string(), e))?;
    let wanted: Vec<(BlobKey, u64)> = needed.into_iter().collect();
    let fetched = transfer::for_each(&wanted, transfer::MAX_CONCURRENT, |(key, size)| {
        client.download_blob(key, *size, &staging.join(key.as_str()))
    });
    if let Err(e) = fetched {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    report.blobs_downloaded = wanted.len();

    for (d, dir, files) in plans {
        let keep: BTreeSet<&Path> = files.iter().map(|(p, _, _)| p.as_path()).collect();
        for old in state.paths.get(&d.block_id).into_iter().flatten() {
            if let Some(p) = contained(&dir, old) {
                if !keep.contains(p.as_path()) && fs::remove_file(&p).is_ok() {
                    report.files_removed += 1;
                    prune_empty_parents(&p, &dir);
                }
            }
        }
        for (path, key, _) in &files {
            let src = staging.join(key.as_str());
            let wrote = if src.exists() {
                place_file(&src, path, key)
            } else {
                // Unchanged on disk; nothing was downloaded for it.
                Ok(false)
            }
            .map_err(|e| CliError::io(&path.display().to_string(), e))?;
            report.files_written += usize::from(wrote);
        }
        state.blocks.insert(d.block_id, d.new_version);
        state
            .paths
            .insert(d.block_id, d.manifest.assets.iter().map(|a| a.path.clone()).collect());
        report.blocks.push(Change {
            id: d.block_id,
            old_version: d.old_version,
            new_version: d.new_version,
        });
    }
    let _ = fs::remove_dir_all(&staging);

    for d in &resp.map_deltas {
        let path = map_file(root, d.map_id);
        let mut bytes = serde_json::to_vec_pretty(&d.placements).expect("placements serialize");
        bytes.push(b'\n');
        if fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
            fs::create_dir_all(path.parent().expect("map file has a parent"))
                .map_err(|e| CliError::io("maps", e))?;
            write_atomic(&path, &bytes, false).map_err(|e| CliError::io(&path.display().to_string(), e))?;
            report.files_written += 1;
        }
        state.maps.insert(d.map_id, d.new_version);
        report.maps.push(Change {
            id: d.map_id,
            old_version: d.old_version,
            new_version: d.new_version,
        });
    }

    for id in &resp.unknown_ids {
        if state.blocks.remove(id).is_some() {
            state.paths.remove(id);
            let _ = fs::remove_dir_all(block_dir(root, *id));
        }
        if state.maps.remove(id).is_some() {
            let _ = fs::remove_file(map_file(root, *id));
        }
        report.removed.push(*id);
    }

    if !report.is_noop() {
        state.save(root)?;
    }
    Ok(report)
}
