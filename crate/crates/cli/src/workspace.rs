//! An edit workspace: one checked-out block.
//!
//! Layout: asset files at their manifest paths, plus `.sigil/workspace.json`
//! (the control file) and an optional `.sigil/kinds.json` mapping new file
//! paths to asset kinds. The control file never holds the session token.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigil_core::validate::RESERVED_SEGMENT;
use sigil_core::{validate_asset_id, AssetEntry, AssetKind, BlobKey, PackManifest};
use uuid::Uuid;

use crate::error::{CliError, CliResult};
use crate::fsutil::{hash_file, write_atomic};

pub const FORMAT: u32 = 1;
pub const CONTROL_DIR: &str = RESERVED_SEGMENT;
const CONTROL_FILE: &str = "workspace.json";
const KINDS_FILE: &str = "kinds.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFile {
    pub format: u32,
    pub server_url: String,
    pub block_id: Uuid,
    pub lock_id: Uuid,
    pub base_version: Option<Uuid>,
    /// The manifest as checked out.
    pub manifest: PackManifest,
    /// Set once the lock has been released; pushing is then refused.
    #[serde(default)]
    pub released: bool,
    /// Versions pushed from this workspace, oldest first.
    #[serde(default)]
    pub pushed: Vec<Uuid>,
}

impl ControlFile {
    pub fn path(root: &Path) -> PathBuf {
        root.join(CONTROL_DIR).join(CONTROL_FILE)
    }

    pub fn exists(root: &Path) -> bool {
        Self::path(root).is_file()
    }

    pub fn load(root: &Path) -> CliResult<ControlFile> {
        let path = Self::path(root);
        let text = fs::read_to_string(&path).map_err(|_| {
            CliError::usage(format!("{} is not a sigil workspace", root.display()))
                .with_hint("run `sigil checkout <block> <dir>` first")
        })?;
        let c: ControlFile = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: corrupt control file: {e}", path.display())))?;
        if c.format != FORMAT {
            return Err(CliError::usage(format!(
                "{}: unsupported control file format {}",
                path.display(),
                c.format
            )));
        }
        Ok(c)
    }

    pub fn save(&self, root: &Path) -> CliResult<()> {
        let dir = root.join(CONTROL_DIR);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        let path = Self::path(root);
        let mut bytes = serde_json::to_vec_pretty(self).expect("control file serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes, false).map_err(|e| CliError::io(&path.display().to_string(), e))
    }
}

/// A regular file found in the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannedFile {
    pub rel: String,
    pub abs: PathBuf,
    pub key: BlobKey,
    pub size: u64,
}

/// Lists every asset file under `root`, sorted by path. Symlinks are
/// refused rather than followed.
pub fn scan(root: &Path) -> CliResult<Vec<ScannedFile>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&dir.display().to_string(), e))?;
            let abs = entry.path();
            let rel_path = abs.strip_prefix(root).expect("walk stays under root");
            let Some(rel) = rel_path.to_str().map(|s| s.replace(std::path::MAIN_SEPARATOR, "/")) else {
                return Err(CliError::new(
                    "VALIDATION_FAILED",
                    format!("{} is not valid UTF-8", abs.display()),
                ));
            };
            if dir == root && rel == CONTROL_DIR {
                continue;
            }
            let ft = entry.file_type().map_err(|e| CliError::io(&rel, e))?;
            if ft.is_symlink() {
                return Err(CliError::new(
                    "VALIDATION_FAILED",
                    format!("{rel} is a symlink; workspaces may only contain regular files"),
                ));
            }
            if ft.is_dir() {
                stack.push(abs);
            } else if ft.is_file() {
                if rel.ends_with(".sigil-tmp") {
                    continue;
                }
                let (key, size) = hash_file(&abs).map_err(|e| CliError::io(&rel, e))?;
                out.push(ScannedFile { rel, abs, key, size });
            }
        }
    }
    out.sort_by(|a, b| a.rel.cmp(&b.rel));
    Ok(out)
}

/// Reads `.sigil/kinds.json` if present.
pub fn load_kinds(root: &Path) -> CliResult<BTreeMap<String, AssetKind>> {
    let path = root.join(CONTROL_DIR).join(KINDS_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(CliError::io(&path.display().to_string(), e)),
    }
}

/// Merges `kinds` into `.sigil/kinds.json` so later pushes remember them.
pub fn remember_kinds(root: &Path, kinds: &[(String, AssetKind)]) -> CliResult<()> {
    if kinds.is_empty() {
        return Ok(());
    }
    let mut all = load_kinds(root)?;
    all.extend(kinds.iter().cloned());
    let path = root.join(CONTROL_DIR).join(KINDS_FILE);
    let mut bytes = serde_json::to_vec_pretty(&all).expect("kinds serialize");
    bytes.push(b'\n');
    write_atomic(&path, &bytes, false).map_err(|e| CliError::io(&path.display().to_string(), e))
}

/// Derives an asset id for a new file from its path.
fn slug(path: &str) -> String {
    let mut s: String = path
        .chars()
        .map(|c| match c {
            'a'..='z' | '0'..='9' | '_' | '-' => c,
            'A'..='Z' => c.to_ascii_lowercase(),
            _ => '_',
        })
        .collect();
    s.truncate(56);
    if s.is_empty() {
        s.push_str("asset");
    }
    s
}

/// Builds the manifest to push from the scanned files. Files already in the
/// base manifest keep their asset id and kind; new files take their kind
/// from `kinds` and get an id derived from their path.
pub fn build_manifest(
    base: &PackManifest,
    base_version: Option<Uuid>,
    files: &[ScannedFile],
    kinds: &BTreeMap<String, AssetKind>,
) -> CliResult<PackManifest> {
    let by_path: BTreeMap<&str, &AssetEntry> = base.assets.iter().map(|a| (a.path.as_str(), a)).collect();
    let mut used: HashSet<String> = HashSet::new();
    let mut assets = Vec::with_capacity(files.len());
    let mut unknown_kind = Vec::new();

    // Keep existing ids first so a new file can never steal one.
    for f in files {
        if let Some(prev) = by_path.get(f.rel.as_str()) {
            used.insert(prev.asset_id.clone());
        }
    }
    for f in files {
        let (asset_id, kind) = match by_path.get(f.rel.as_str()) {
            Some(prev) => (prev.asset_id.clone(), kinds.get(&f.rel).copied().unwrap_or(prev.kind)),
            None => {
                let Some(kind) = kinds.get(&f.rel).copied() else {
                    unknown_kind.push(f.rel.clone());
                    continue;
                };
                let stem = slug(&f.rel);
                let mut id = stem.clone();
                let mut n = 2;
                while used.contains(&id) || !validate_asset_id(&id) {
                    id = format!("{stem}-{n}");
                    n += 1;
                }
                used.insert(id.clone());
                (id, kind)
            }
        };
        assets.push(AssetEntry {
            asset_id,
            kind,
            path: f.rel.clone(),
            content_hash: f.key.clone(),
            size_bytes: f.size,
        });
    }
    if !unknown_kind.is_empty() {
        let mut e = CliError::new(
            "UNKNOWN_KIND",
            format!("no asset kind known for new file(s): {}", unknown_kind.join(", ")),
        )
        .with_hint(format!(
            "pass --kind PATH=KIND or list them in {CONTROL_DIR}/{KINDS_FILE}; kinds: {}",
            AssetKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
        ));
        e.details = Box::new(serde_json::json!({ "paths": unknown_kind }));
        return Err(e);
    }
    Ok(PackManifest {
        schema_version: base.schema_version,
        block_id: base.block_id,
        base_version,
        assets,
    })
}
