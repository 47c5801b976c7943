use chrono::{DateTime, Utc};
use uuid::Uuid;

use crate::domain::{BlobKey, Role};
use crate::validate::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the service can report. Each variant maps to one stable
/// machine code (see [`Error::code`]) that travels unchanged over the wire.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("authentication required")]
    Unauthenticated,
    #[error("role {role} may not perform {action}")]
    Forbidden { role: Role, action: String },
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("username {0:?} is already taken")]
    UsernameTaken(String),
    #[error("password must be at least 8 characters")]
    WeakPassword,
    #[error("username {0:?} must match ^[a-z0-9_]{{3,32}}$")]
    InvalidUsername(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("block is locked by {holder} until {expires_at}")]
    LockHeld {
        holder: String,
        expires_at: DateTime<Utc>,
    },
    #[error("lock has expired")]
    LockExpired,
    #[error("caller does not hold this lock")]
    NotHolder,
    #[error("lock is for block {lock_block}, not {target}")]
    WrongBlock { lock_block: Uuid, target: Uuid },
    #[error("requested lock ttl {requested}s exceeds maximum {max}s")]
    TtlTooLong { requested: u64, max: u64 },

    #[error("unknown block {block_id}{}", placement_index.map(|i| format!(" (placement {i})")).unwrap_or_default())]
    UnknownBlock {
        block_id: String,
        placement_index: Option<usize>,
    },
    #[error("unknown map {0}")]
    UnknownMap(String),
    #[error("unknown lock")]
    UnknownLock,
    #[error("unknown version {0}")]
    UnknownVersion(String),
    #[error("unknown blob {0}")]
    UnknownBlob(BlobKey),

    #[error("content validation failed with {} violation(s)", .0.len())]
    ValidationFailed(Vec<Violation>),
    #[error("manifest is structurally invalid ({} violation(s))", .0.len())]
    StructuralInvalid(Vec<Violation>),
    #[error("base version {} does not match current head {}", fmt_opt(.base), fmt_opt(.head))]
    StaleBase {
        base: Option<Uuid>,
        head: Option<Uuid>,
    },
    #[error("version {0} has already been decided")]
    AlreadyDecided(Uuid),

    #[error("claimed hash {claimed} does not match content hash {computed}")]
    HashMismatch { claimed: String, computed: String },
    #[error("blob exceeds maximum size of {max} bytes")]
    BlobTooLarge { max: u64 },
    #[error("stored blob {0} failed digest verification")]
    CorruptBlob(BlobKey),

    #[error("storage failure: {0}")]
    Storage(String),
}

fn fmt_opt(v: &Option<Uuid>) -> String {
    v.map(|u| u.to_string()).unwrap_or_else(|| "(none)".into())
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Unauthenticated => "UNAUTHENTICATED",
            Error::Forbidden { .. } => "FORBIDDEN",
            Error::InvalidCredentials => "INVALID_CREDENTIALS",
            Error::UsernameTaken(_) => "USERNAME_TAKEN",
            Error::WeakPassword => "WEAK_PASSWORD",
            Error::InvalidUsername(_) => "INVALID_USERNAME",
            Error::InvalidRequest(_) => "INVALID_REQUEST",
            Error::LockHeld { .. } => "LOCK_HELD",
            Error::LockExpired => "LOCK_EXPIRED",
            Error::NotHolder => "NOT_HOLDER",
            Error::WrongBlock { .. } => "WRONG_BLOCK",
            Error::TtlTooLong { .. } => "TTL_TOO_LONG",
            Error::UnknownBlock { .. } => "UNKNOWN_BLOCK",
            Error::UnknownMap(_) => "UNKNOWN_MAP",
            Error::UnknownLock => "UNKNOWN_LOCK",
            Error::UnknownVersion(_) => "UNKNOWN_VERSION",
            Error::UnknownBlob(_) => "UNKNOWN_BLOB",
            Error::ValidationFailed(_) => "VALIDATION_FAILED",
            Error::StructuralInvalid(_) => "STRUCTURAL_INVALID",
            Error::StaleBase { .. } => "STALE_BASE",
            Error::AlreadyDecided(_) => "ALREADY_DECIDED",
            Error::HashMismatch { .. } => "HASH_MISMATCH",
            Error::BlobTooLarge { .. } => "BLOB_TOO_LARGE",
            Error::CorruptBlob(_) => "CORRUPT_BLOB",
            Error::Storage(_) => "STORAGE_FAILURE",
        }
    }

    pub(crate) fn forbidden(role: Role, action: crate::auth::PermissionAction) -> Self {
        Error::Forbidden {
            role,
            action: action.as_str().to_string(),
        }
    }

    pub(crate) fn unknown_block(id: impl ToString) -> Self {
        Error::UnknownBlock {
            block_id: id.to_string(),
            placement_index: None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Storage(e.to_string())
    }
}
