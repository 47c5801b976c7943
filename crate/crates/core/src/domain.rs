//! Persistent domain types and the pure helpers shared by every module.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MAX_NAME_LEN: usize = 64;

/// Returned when a closed enumeration is handed a value it does not know.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} {value:?}")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! closed_enum {
    ($name:ident, $label:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(ParseEnumError { kind: $label, value: other.to_string() }),
                }
            }
        }
    };
}

closed_enum!(Role, "role", {
    Visitor => "visitor",
    Editor => "editor",
    Administrator => "administrator",
});

closed_enum!(VersionState, "version state", {
    Pending => "pending",
    Approved => "approved",
    Rejected => "rejected",
});

closed_enum!(AssetKind, "asset kind", {
    StaticMesh => "static_mesh",
    Texture => "texture",
    Animation => "animation",
    Blueprint => "blueprint",
});

impl VersionState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, VersionState::Pending)
    }
}

/// SHA-256 digest of a blob, as 64 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlobKey(String);

impl BlobKey {
    pub fn parse(s: &str) -> Option<Self> {
        is_hex_digest(s).then(|| BlobKey(s.to_string()))
    }

    pub fn of(bytes: &[u8]) -> Self {
        BlobKey(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Two-character fan-out directory name.
    pub fn prefix(&self) -> &str {
        &self.0[..2]
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for BlobKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for BlobKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BlobKey::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("malformed sha256 digest {s:?}")))
    }
}

pub fn is_hex_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// `^[a-z0-9_]{3,32}$`
pub fn validate_username(name: &str) -> bool {
    (3..=32).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// `^[a-z0-9_\-]{1,64}$`
pub fn validate_asset_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub fn validate_name(name: &str) -> Result<()> {
    let n = name.chars().count();
    if n == 0 || n > MAX_NAME_LEN {
        return Err(Error::InvalidRequest(format!(
            "name must be 1-{MAX_NAME_LEN} characters, got {n}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: Uuid,
    pub username: String,
    pub password_digest: String,
    pub role: Role,
    pub created_at: DateTime<Utc>,
}

/// What the outside world may see of an account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountView {
    pub user_id: Uuid,
    pub username: String,
    pub role: Role,
    pub created_at: DateTime<Utc>,
}

impl From<&UserAccount> for AccountView {
    fn from(a: &UserAccount) -> Self {
        AccountView {
            user_id: a.user_id,
            username: a.username.clone(),
            role: a.role,
            created_at: a.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionToken {
    pub token: String,
    pub user_id: Uuid,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: Uuid,
    pub name: String,
    pub head_version: Option<Uuid>,
    pub created_by: Uuid,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub map_id: Uuid,
    pub name: String,
    pub head_version: Option<Uuid>,
    pub created_by: Uuid,
    pub created_at: DateTime<Utc>,
}

/// One instance of a block inside a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub block_id: Uuid,
    /// Meters.
    pub position: [f64; 3],
    /// Unit quaternion, (w, x, y, z).
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
}

impl Placement {
    pub fn identity(block_id: Uuid) -> Self {
        Placement {
            block_id,
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlacementViolation {
    NonFinite,
    NonUnitRotation,
    NonPositiveScale,
}

pub const ROTATION_NORM_TOLERANCE: f64 = 1e-6;

pub fn validate_placement(p: &Placement) -> Vec<PlacementViolation> {
    let mut out = Vec::new();
    let all = p.position.iter().chain(&p.rotation).chain(&p.scale);
    if all.clone().any(|c| !c.is_finite()) {
        out.push(PlacementViolation::NonFinite);
    }
    if p.rotation.iter().all(|c| c.is_finite()) {
        let norm = p.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > ROTATION_NORM_TOLERANCE {
            out.push(PlacementViolation::NonUnitRotation);
        }
    }
    if p.scale.iter().any(|c| c.is_finite() && *c <= 0.0) {
        out.push(PlacementViolation::NonPositiveScale);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetEntry {
    pub asset_id: String,
    pub kind: AssetKind,
    pub path: String,
    pub content_hash: BlobKey,
    pub size_bytes: u64,
}

/// Declarative description of a block's content. Parsing is strict: unknown
/// kinds or malformed digests are rejected by serde. Use
/// [`crate::validate::ManifestDocument`] for untrusted input that should be
/// reported as violations instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackManifest {
    pub schema_version: u32,
    pub block_id: Uuid,
    pub base_version: Option<Uuid>,
    pub assets: Vec<AssetEntry>,
}

impl PackManifest {
    pub fn empty(block_id: Uuid, base_version: Option<Uuid>) -> Self {
        PackManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            block_id,
            base_version,
            assets: Vec::new(),
        }
    }
}

/// Deterministic serialization: compact UTF-8 JSON, object keys sorted,
/// assets sorted by `asset_id`.
pub fn canonical_manifest_bytes(m: &PackManifest) -> Result<Vec<u8>> {
    let violations = crate::validate::structural_violations(m);
    if !violations.is_empty() {
        return Err(Error::StructuralInvalid(violations));
    }
    let mut sorted = m.clone();
    sorted.assets.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    let value = serde_json::to_value(&sorted).map_err(|e| Error::Storage(e.to_string()))?;
    let mut out = Vec::with_capacity(256);
    write_canonical(&value, &mut out);
    Ok(out)
}

fn write_canonical(v: &serde_json::Value, out: &mut Vec<u8>) {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend(serde_json::to_vec(k).expect("string serializes"));
                out.push(b':');
                write_canonical(&map[k], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        scalar => out.extend(serde_json::to_vec(scalar).expect("scalar serializes")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockVersion {
    pub version_id: Uuid,
    pub block_id: Uuid,
    pub seq: u64,
    pub base_version: Option<Uuid>,
    pub manifest: PackManifest,
    pub state: VersionState,
    pub author: Uuid,
    pub submitted_at: DateTime<Utc>,
    pub decided_by: Option<Uuid>,
    pub decided_at: Option<DateTime<Utc>>,
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapVersion {
    pub version_id: Uuid,
    pub map_id: Uuid,
    pub seq: u64,
    pub placements: Vec<Placement>,
    pub state: VersionState,
    pub author: Uuid,
    pub submitted_at: DateTime<Utc>,
    pub decided_by: Option<Uuid>,
    pub decided_at: Option<DateTime<Utc>>,
    pub reason: Option<String>,
}

/// A block or map version, tagged with `"kind"` on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VersionRecord {
    Block(BlockVersion),
    Map(MapVersion),
}

impl VersionRecord {
    pub fn version_id(&self) -> Uuid {
        match self {
            VersionRecord::Block(v) => v.version_id,
            VersionRecord::Map(v) => v.version_id,
        }
    }

    pub fn target_id(&self) -> Uuid {
        match self {
            VersionRecord::Block(v) => v.block_id,
            VersionRecord::Map(v) => v.map_id,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            VersionRecord::Block(v) => v.seq,
            VersionRecord::Map(v) => v.seq,
        }
    }

    pub fn state(&self) -> VersionState {
        match self {
            VersionRecord::Block(v) => v.state,
            VersionRecord::Map(v) => v.state,
        }
    }

    pub fn author(&self) -> Uuid {
        match self {
            VersionRecord::Block(v) => v.author,
            VersionRecord::Map(v) => v.author,
        }
    }

    pub fn submitted_at(&self) -> DateTime<Utc> {
        match self {
            VersionRecord::Block(v) => v.submitted_at,
            VersionRecord::Map(v) => v.submitted_at,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            VersionRecord::Block(_) => "block",
            VersionRecord::Map(_) => "map",
        }
    }
}

/// An exclusive, time-limited editing claim on one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockRecord {
    pub lock_id: Uuid,
    pub block_id: Uuid,
    pub holder: Uuid,
    pub holder_username: String,
    pub acquired_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub renew_count: u32,
    pub ttl_seconds: u64,
}

impl LockRecord {
    /// Expiry is exclusive: a lock is dead at `expires_at`.
    pub fn is_live(&self, now: DateTime<Utc>) -> bool {
        now < self.expires_at
    }
}

/// Per-block (and per-map) versions the client last synced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    #[serde(default)]
    pub blocks: BTreeMap<Uuid, Uuid>,
    #[serde(default)]
    pub maps: BTreeMap<Uuid, Uuid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncDelta {
    pub block_id: Uuid,
    pub old_version: Option<Uuid>,
    pub new_version: Uuid,
    pub manifest: PackManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDelta {
    pub map_id: Uuid,
    pub old_version: Option<Uuid>,
    pub new_version: Uuid,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncResponse {
    pub deltas: Vec<SyncDelta>,
    #[serde(default)]
    pub map_deltas: Vec<MapDelta>,
    pub unknown_ids: Vec<Uuid>,
}

impl ClientState {
    /// Record every delta as applied and forget ids the server does not know.
    pub fn apply(&mut self, sync: &SyncResponse) {
        for id in &sync.unknown_ids {
            self.blocks.remove(id);
            self.maps.remove(id);
        }
        for d in &sync.deltas {
            self.blocks.insert(d.block_id, d.new_version);
        }
        for d in &sync.map_deltas {
            self.maps.insert(d.map_id, d.new_version);
        }
    }
}
