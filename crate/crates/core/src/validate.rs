//! Server-side correctness checks for uploaded content: manifest structure,
//! path safety and blob presence.
//!
//! Validators never fail fast. They return every violation they find,
//! ordered by asset position (manifest-level problems first) and then by
//! code, so a client can show an editor the whole list at once.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::domain::{
    is_hex_digest, validate_asset_id, AssetEntry, AssetKind, BlobKey, PackManifest,
    PlacementViolation, MANIFEST_SCHEMA_VERSION,
};

pub const MAX_ASSETS: usize = 1024;
pub const MAX_PATH_BYTES: usize = 240;
pub const MAX_MANIFEST_BYTES: usize = 1024 * 1024;

/// First path segment owned by the client workspace.
pub const RESERVED_SEGMENT: &str = ".sigil";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    BadSchemaVersion,
    BlockIdMismatch,
    ManifestTooLarge,
    DupAssetId,
    BadAssetId,
    DupPath,
    BadPath,
    BadHashFormat,
    UnknownKind,
    MissingBlob,
    SizeMismatch,
    NonFinite,
    NonUnitRotation,
    NonPositiveScale,
}

impl From<PlacementViolation> for ViolationCode {
    fn from(v: PlacementViolation) -> Self {
        match v {
            PlacementViolation::NonFinite => ViolationCode::NonFinite,
            PlacementViolation::NonUnitRotation => ViolationCode::NonUnitRotation,
            PlacementViolation::NonPositiveScale => ViolationCode::NonPositiveScale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
    pub locus: Option<String>,
}

impl Violation {
    fn new(code: ViolationCode, detail: impl Into<String>, locus: Option<&str>) -> Self {
        Violation {
            code,
            detail: detail.into(),
            locus: locus.map(str::to_string),
        }
    }
}

/// Loosely typed manifest as received from a client. Every field that a
/// [`PackManifest`] constrains by type is kept as raw text here so the
/// problems can be reported as violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDocument {
    pub schema_version: i64,
    pub block_id: String,
    pub base_version: Option<Uuid>,
    pub assets: Vec<AssetDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetDocument {
    pub asset_id: String,
    pub kind: String,
    pub path: String,
    pub content_hash: String,
    pub size_bytes: u64,
}

impl From<&PackManifest> for ManifestDocument {
    fn from(m: &PackManifest) -> Self {
        ManifestDocument {
            schema_version: m.schema_version.into(),
            block_id: m.block_id.to_string(),
            base_version: m.base_version,
            assets: m
                .assets
                .iter()
                .map(|a| AssetDocument {
                    asset_id: a.asset_id.clone(),
                    kind: a.kind.to_string(),
                    path: a.path.clone(),
                    content_hash: a.content_hash.to_string(),
                    size_bytes: a.size_bytes,
                })
                .collect(),
        }
    }
}

/// Why a path was refused by [`normalize_path`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad path {path:?}: {reason}")]
pub struct BadPath {
    pub path: String,
    pub reason: &'static str,
}

/// Canonical form of a relative asset path: `.` segments and repeated
/// slashes collapsed. Anything that could escape a workspace root is refused.
pub fn normalize_path(p: &str) -> Result<String, BadPath> {
    let bad = |reason| BadPath {
        path: p.to_string(),
        reason,
    };
    if p.contains('\\') {
        return Err(bad("backslash"));
    }
    if p.contains('\0') {
        return Err(bad("NUL byte"));
    }
    if p.starts_with('/') {
        return Err(bad("absolute path"));
    }
    let mut segments = Vec::new();
    for seg in p.split('/') {
        match seg {
            "" | "." => continue,
            ".." => return Err(bad("parent segment")),
            s => segments.push(s),
        }
    }
    if segments.is_empty() {
        return Err(bad("empty path"));
    }
    let out = segments.join("/");
    if out.len() > MAX_PATH_BYTES {
        return Err(bad("longer than 240 bytes"));
    }
    Ok(out)
}

fn check_manifest_path(p: &str) -> Option<String> {
    match normalize_path(p) {
        Err(e) => Some(e.reason.to_string()),
        Ok(n) if n != p => Some(format!("not in normalized form (expected {n:?})")),
        Ok(n) if n.split('/').next() == Some(RESERVED_SEGMENT) => {
            Some(format!("{RESERVED_SEGMENT} is reserved"))
        }
        Ok(_) => None,
    }
}

/// Structural checks on an untrusted manifest document. With
/// `target_block == None` the block id is not compared.
pub fn validate_document(doc: &ManifestDocument, target_block: Option<Uuid>) -> Vec<Violation> {
    use ViolationCode::*;
    // (position, violation); position 0 is the manifest itself.
    let mut found: Vec<(usize, Violation)> = Vec::new();

    if doc.schema_version != i64::from(MANIFEST_SCHEMA_VERSION) {
        found.push((
            0,
            Violation::new(
                BadSchemaVersion,
                format!("schema_version must be 1, got {}", doc.schema_version),
                None,
            ),
        ));
    }
    if let Some(target) = target_block {
        let matches = Uuid::parse_str(&doc.block_id).is_ok_and(|id| id == target);
        if !matches {
            found.push((
                0,
                Violation::new(
                    BlockIdMismatch,
                    format!("manifest names block {:?}, upload targets {target}", doc.block_id),
                    None,
                ),
            ));
        }
    }
    if doc.assets.len() > MAX_ASSETS {
        found.push((
            0,
            Violation::new(
                ManifestTooLarge,
                format!("{} assets exceeds the limit of {MAX_ASSETS}", doc.assets.len()),
                None,
            ),
        ));
    }

    let mut ids: HashSet<&str> = HashSet::new();
    let mut paths: HashMap<&str, usize> = HashMap::new();
    for (i, a) in doc.assets.iter().enumerate() {
        let pos = i + 1;
        let locus = Some(a.asset_id.as_str());
        if !validate_asset_id(&a.asset_id) {
            found.push((
                pos,
                Violation::new(BadAssetId, format!("asset_id {:?} is not a slug", a.asset_id), locus),
            ));
        }
        if !ids.insert(&a.asset_id) {
            found.push((
                pos,
                Violation::new(DupAssetId, format!("asset_id {:?} appears more than once", a.asset_id), locus),
            ));
        }
        match check_manifest_path(&a.path) {
            Some(reason) => found.push((
                pos,
                Violation::new(BadPath, format!("path {:?}: {reason}", a.path), locus),
            )),
            None => {
                if *paths.entry(&a.path).or_insert(pos) != pos {
                    found.push((
                        pos,
                        Violation::new(DupPath, format!("path {:?} appears more than once", a.path), locus),
                    ));
                }
            }
        }
        if !is_hex_digest(&a.content_hash) {
            found.push((
                pos,
                Violation::new(
                    BadHashFormat,
                    format!("content_hash {:?} is not 64 lowercase hex chars", a.content_hash),
                    locus,
                ),
            ));
        }
        if a.kind.parse::<AssetKind>().is_err() {
            found.push((
                pos,
                Violation::new(UnknownKind, format!("unknown asset kind {:?}", a.kind), locus),
            ));
        }
    }

    // A file cannot also be a directory of another asset.
    for (i, a) in doc.assets.iter().enumerate() {
        let pos = i + 1;
        if paths.get(a.path.as_str()) != Some(&pos) {
            continue;
        }
        let mut prefix_end = 0;
        while let Some(off) = a.path[prefix_end..].find('/') {
            prefix_end += off;
            if let Some(&other) = paths.get(&a.path[..prefix_end]) {
                let later = pos.max(other);
                let asset = &doc.assets[later - 1];
                found.push((
                    later,
                    Violation::new(
                        BadPath,
                        format!("path {:?} conflicts with file {:?}", a.path, &a.path[..prefix_end]),
                        Some(asset.asset_id.as_str()),
                    ),
                ));
            }
            prefix_end += 1;
        }
    }

    found.sort_by(|(pa, va), (pb, vb)| pa.cmp(pb).then(va.code.cmp(&vb.code)));
    found.into_iter().map(|(_, v)| v).collect()
}

/// Structural validation of a manifest destined for `target_block`.
pub fn validate_structure(m: &PackManifest, target_block: Uuid) -> Vec<Violation> {
    validate_document(&ManifestDocument::from(m), Some(target_block))
}

/// Invariants a manifest must meet regardless of where it is submitted.
pub fn structural_violations(m: &PackManifest) -> Vec<Violation> {
    validate_document(&ManifestDocument::from(m), None)
}

/// Validates `doc` and, when clean, converts it into a typed manifest.
pub fn parse_manifest(
    doc: &ManifestDocument,
    target_block: Uuid,
) -> Result<PackManifest, Vec<Violation>> {
    let violations = validate_document(doc, Some(target_block));
    if !violations.is_empty() {
        return Err(violations);
    }
    let assets = doc
        .assets
        .iter()
        .map(|a| AssetEntry {
            asset_id: a.asset_id.clone(),
            kind: a.kind.parse().expect("checked above"),
            path: a.path.clone(),
            content_hash: BlobKey::parse(&a.content_hash).expect("checked above"),
            size_bytes: a.size_bytes,
        })
        .collect();
    Ok(PackManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        block_id: target_block,
        base_version: doc.base_version,
        assets,
    })
}

/// Read-only view of stored blob lengths.
pub trait BlobLookup {
    fn blob_len(&self, key: &BlobKey) -> Option<u64>;
}

impl BlobLookup for HashMap<BlobKey, u64> {
    fn blob_len(&self, key: &BlobKey) -> Option<u64> {
        self.get(key).copied()
    }
}

impl BlobLookup for BTreeMap<BlobKey, u64> {
    fn blob_len(&self, key: &BlobKey) -> Option<u64> {
        self.get(key).copied()
    }
}

/// Every referenced blob must be stored with exactly the declared length.
pub fn validate_presence(m: &PackManifest, store: &dyn BlobLookup) -> Vec<Violation> {
    let mut out = Vec::new();
    for a in &m.assets {
        let locus = Some(a.asset_id.as_str());
        match store.blob_len(&a.content_hash) {
            None => out.push(Violation::new(
                ViolationCode::MissingBlob,
                format!("blob {} has not been uploaded", a.content_hash),
                locus,
            )),
            Some(len) if len != a.size_bytes => out.push(Violation::new(
                ViolationCode::SizeMismatch,
                format!(
                    "blob {} is {len} bytes, manifest declares {}",
                    a.content_hash, a.size_bytes
                ),
                locus,
            )),
            Some(_) => {}
        }
    }
    out
}
