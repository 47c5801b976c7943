use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Map, Value};
use sigil_core::Error;

/// Wraps a core error so handlers can use `?`. Rendered as
/// `{"error":{"code":..,"message":..[,"violations":[..]][,"details":{..}]}}`.
#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "UNAUTHENTICATED" | "INVALID_CREDENTIALS" => StatusCode::UNAUTHORIZED,
        "FORBIDDEN" => StatusCode::FORBIDDEN,
        "LOCK_HELD" | "STALE_BASE" | "ALREADY_DECIDED" | "HASH_MISMATCH" | "NOT_HOLDER"
        | "LOCK_EXPIRED" | "WRONG_BLOCK" | "USERNAME_TAKEN" => StatusCode::CONFLICT,
        "VALIDATION_FAILED" | "TTL_TOO_LONG" | "WEAK_PASSWORD" | "INVALID_USERNAME"
        | "STRUCTURAL_INVALID" => StatusCode::UNPROCESSABLE_ENTITY,
        "BLOB_TOO_LARGE" => StatusCode::PAYLOAD_TOO_LARGE,
        "INVALID_REQUEST" => StatusCode::BAD_REQUEST,
        "STORAGE_FAILURE" => StatusCode::SERVICE_UNAVAILABLE,
        "METHOD_NOT_ALLOWED" => StatusCode::METHOD_NOT_ALLOWED,
        c if c.starts_with("UNKNOWN_") || c == "NOT_FOUND" => StatusCode::NOT_FOUND,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn envelope(code: &str, message: &str, extra: Map<String, Value>) -> Value {
    let mut error = Map::new();
    error.insert("code".into(), code.into());
    error.insert("message".into(), message.into());
    error.extend(extra);
    json!({ "error": error })
}

pub fn error_response(code: &str, message: &str) -> Response {
    (status_for(code), Json(envelope(code, message, Map::new()))).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = &self.0;
        let mut extra = Map::new();
        let details = match e {
            Error::ValidationFailed(v) | Error::StructuralInvalid(v) => {
                extra.insert("violations".into(), json!(v));
                None
            }
            Error::LockHeld { holder, expires_at } => {
                Some(json!({ "holder": holder, "expires_at": expires_at }))
            }
            Error::StaleBase { base, head } => Some(json!({ "base": base, "head": head })),
            Error::UnknownBlock {
                block_id,
                placement_index,
            } => Some(json!({ "block_id": block_id, "placement_index": placement_index })),
            Error::HashMismatch { claimed, computed } => {
                Some(json!({ "claimed": claimed, "computed": computed }))
            }
            Error::TtlTooLong { requested, max } => {
                Some(json!({ "requested": requested, "max": max }))
            }
            Error::WrongBlock { lock_block, target } => {
                Some(json!({ "lock_block": lock_block, "target": target }))
            }
            _ => None,
        };
        if let Some(d) = details {
            extra.insert("details".into(), d);
        }
        if matches!(e, Error::Storage(_) | Error::CorruptBlob(_)) {
            tracing::error!(error = %e, "request failed");
        }
        let body = envelope(e.code(), &e.to_string(), extra);
        (status_for(e.code()), Json(body)).into_response()
    }
}
