//! Route table and request handlers.
//!
//! Every handler except login authenticates the bearer token, checks the
//! role against the endpoint's permission, and only then parses the body or
//! touches state.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use http_body_util::{BodyExt, LengthLimitError, Limited};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sigil_core::auth::{authorize, PermissionAction};
use sigil_core::validate::{ManifestDocument, Violation, ViolationCode, MAX_MANIFEST_BYTES};
use sigil_core::versions::Verdict;
use sigil_core::{
    AccountView, BlobKey, BlockRecord, ClientState, Error, LockRecord, MapRecord, PackManifest,
    Placement, Role, Sigil, UserAccount,
};
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::error::{error_response, ApiError, ApiResult};

/// Bodies other than blobs and manifests.
const JSON_BODY_LIMIT: usize = 4 * 1024 * 1024;
/// Slack for the submission wrapper around a maximal manifest.
const SUBMISSION_OVERHEAD: usize = 4096;

pub struct AppState {
    pub sigil: Sigil,
}

type AppRef = Arc<AppState>;

/// Runs a core call on the blocking pool; core calls may fsync or hash.
async fn run<T, F>(state: &AppRef, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Sigil) -> sigil_core::Result<T> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state.sigil))
        .await
        .map_err(|e| ApiError(Error::Storage(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

/// The authenticated caller.
pub struct Caller(pub UserAccount);

impl Caller {
    fn require(&self, action: PermissionAction) -> ApiResult<()> {
        if authorize(&self.0, action) {
            Ok(())
        } else {
            Err(ApiError(Error::Forbidden {
                role: self.0.role,
                action: action.as_str().to_string(),
            }))
        }
    }
}

fn bearer_token(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
        .filter(|t| !t.is_empty())
}

impl FromRequestParts<AppRef> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppRef) -> Result<Self, Self::Rejection> {
        let token = bearer_token(&parts.headers)
            .ok_or(ApiError(Error::Unauthenticated))?
            .to_string();
        let account = run(state, move |s| s.authenticate(&token)).await?;
        Ok(Caller(account))
    }
}

/// Reads at most `limit` bytes; `None` if the body is longer.
async fn read_limited(body: Body, limit: usize) -> ApiResult<Option<Bytes>> {
    match Limited::new(body, limit).collect().await {
        Ok(collected) => Ok(Some(collected.to_bytes())),
        Err(e) if e.is::<LengthLimitError>() => Ok(None),
        Err(e) => Err(ApiError(Error::InvalidRequest(format!("request body: {e}")))),
    }
}

/// A request body capped at [`JSON_BODY_LIMIT`]. Handlers take it as the
/// last extractor so authentication runs before anything is read.
pub struct RawBody(pub Bytes);

impl FromRequest<AppRef> for RawBody {
    type Rejection = ApiError;

    async fn from_request(req: Request, _: &AppRef) -> Result<Self, Self::Rejection> {
        read_limited(req.into_body(), JSON_BODY_LIMIT)
            .await?
            .map(RawBody)
            .ok_or_else(|| ApiError(Error::InvalidRequest("request body too large".into())))
    }
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError(Error::InvalidRequest(e.to_string())))
}

/// Like [`parse_json`] but an empty body means `T::default()`.
fn parse_optional_json<T: DeserializeOwned + Default>(body: &[u8]) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse_json(body)
    }
}

fn parse_id(raw: &str, unknown: impl FnOnce(String) -> Error) -> ApiResult<Uuid> {
    Uuid::parse_str(raw).map_err(|_| ApiError(unknown(raw.to_string())))
}

fn block_id(raw: &str) -> ApiResult<Uuid> {
    parse_id(raw, |id| Error::UnknownBlock {
        block_id: id,
        placement_index: None,
    })
}

fn map_id(raw: &str) -> ApiResult<Uuid> {
    parse_id(raw, Error::UnknownMap)
}

fn version_id(raw: &str) -> ApiResult<Uuid> {
    parse_id(raw, Error::UnknownVersion)
}

fn blob_key(raw: &str) -> ApiResult<BlobKey> {
    BlobKey::parse(raw).ok_or_else(|| {
        ApiError(Error::InvalidRequest(format!(
            "{raw:?} is not a 64-character lowercase sha256 digest"
        )))
    })
}

pub fn router(state: AppRef) -> Router {
    Router::new()
        .route("/api/v1/auth/login", post(login))
        .route("/api/v1/auth/logout", post(logout))
        .route("/api/v1/users", post(create_user).get(list_users))
        .route("/api/v1/maps", get(list_maps).post(create_map))
        .route("/api/v1/maps/{id}/head", get(map_head))
        .route("/api/v1/maps/{id}/versions", get(map_versions).post(submit_map_version))
        .route("/api/v1/blocks", get(list_blocks).post(create_block))
        .route("/api/v1/blocks/{id}/head", get(block_head))
        .route("/api/v1/blocks/{id}/versions", get(block_versions).post(submit_block_version))
        .route("/api/v1/blocks/{id}/lock", post(acquire_lock).delete(release_lock))
        .route("/api/v1/blocks/{id}/lock/renew", post(renew_lock))
        .route("/api/v1/blocks/{id}/editproject", get(edit_project))
        .route("/api/v1/review/pending", get(pending))
        .route("/api/v1/versions/{id}/approve", post(approve))
        .route("/api/v1/versions/{id}/reject", post(reject))
        .route("/api/v1/blobs/{sha256}", put(put_blob).get(get_blob).head(head_blob))
        .route("/api/v1/sync", post(sync))
        .fallback(|| async { error_response("NOT_FOUND", "no such endpoint") })
        .method_not_allowed_fallback(|| async {
            error_response("METHOD_NOT_ALLOWED", "method not allowed on this endpoint")
        })
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
    password: String,
}

#[derive(Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub role: Role,
    pub user_id: Uuid,
    pub username: String,
}

async fn login(State(state): State<AppRef>, RawBody(body): RawBody) -> ApiResult<Response> {
    let req: LoginRequest = parse_json(&body)?;
    let username = req.username.clone();
    let (session, account) = run(&state, move |s| {
        let session = s.login(&req.username, &req.password)?;
        let account = s.account(session.user_id).ok_or(Error::InvalidCredentials)?;
        Ok((session, account))
    })
    .await?;
    let resp = LoginResponse {
        token: session.token,
        expires_at: session.expires_at,
        role: account.role,
        user_id: account.user_id,
        username,
    };
    Ok(Json(resp).into_response())
}

async fn logout(State(state): State<AppRef>, headers: HeaderMap, _caller: Caller) -> ApiResult<StatusCode> {
    let token = bearer_token(&headers).unwrap_or_default().to_string();
    run(&state, move |s| s.logout(&token)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct CreateUserRequest {
    username: String,
    password: String,
    role: Role,
}

async fn create_user(State(state): State<AppRef>, caller: Caller, RawBody(body): RawBody) -> ApiResult<Response> {
    caller.require(PermissionAction::ManageUsers)?;
    let req: CreateUserRequest = parse_json(&body)?;
    let account = run(&state, move |s| {
        s.register_user(&caller.0, &req.username, &req.password, req.role)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(AccountView::from(&account))).into_response())
}

async fn list_users(State(state): State<AppRef>, caller: Caller) -> ApiResult<Json<Vec<AccountView>>> {
    caller.require(PermissionAction::ManageUsers)?;
    Ok(Json(run(&state, move |s| s.list_users(&caller.0)).await?))
}

#[derive(Deserialize)]
struct NameRequest {
    name: String,
}

#[derive(Serialize, Deserialize)]
pub struct MapSummary {
    #[serde(flatten)]
    pub record: MapRecord,
    pub head_seq: Option<u64>,
}

async fn list_maps(State(state): State<AppRef>, caller: Caller) -> ApiResult<Json<Vec<MapSummary>>> {
    caller.require(PermissionAction::ViewContent)?;
    let out = run(&state, |s| {
        Ok(s.list_maps()
            .into_iter()
            .map(|record| {
                let head_seq = s.map_head(record.map_id).ok().flatten().map(|v| v.seq);
                MapSummary { record, head_seq }
            })
            .collect())
    })
    .await?;
    Ok(Json(out))
}

async fn create_map(State(state): State<AppRef>, caller: Caller, RawBody(body): RawBody) -> ApiResult<Response> {
    caller.require(PermissionAction::CreateMap)?;
    let req: NameRequest = parse_json(&body)?;
    let rec = run(&state, move |s| s.create_map(&caller.0, &req.name)).await?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn map_head(State(state): State<AppRef>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let id = map_id(&id)?;
    Ok(Json(run(&state, move |s| s.map_head(id)).await?).into_response())
}

async fn map_versions(State(state): State<AppRef>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let id = map_id(&id)?;
    Ok(Json(run(&state, move |s| s.map_history(id)).await?).into_response())
}

#[derive(Deserialize)]
struct MapVersionRequest {
    placements: Vec<Placement>,
}

async fn submit_map_version(
    State(state): State<AppRef>,
    caller: Caller,
    Path(id): Path<String>,
    RawBody(body): RawBody,
) -> ApiResult<Response> {
    caller.require(PermissionAction::SubmitMapVersion)?;
    let id = map_id(&id)?;
    let req: MapVersionRequest = parse_json(&body)?;
    let v = run(&state, move |s| s.submit_map_version(&caller.0, id, req.placements)).await?;
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct BlockSummary {
    #[serde(flatten)]
    pub record: BlockRecord,
    pub head_seq: Option<u64>,
    pub lock: Option<LockRecord>,
}

async fn list_blocks(State(state): State<AppRef>, caller: Caller) -> ApiResult<Json<Vec<BlockSummary>>> {
    caller.require(PermissionAction::ViewContent)?;
    let out = run(&state, |s| {
        let locks = s.live_locks();
        Ok(s.list_blocks()
            .into_iter()
            .map(|record| {
                let head_seq = s.head(record.block_id).ok().flatten().map(|v| v.seq);
                let lock = locks.iter().find(|l| l.block_id == record.block_id).cloned();
                BlockSummary {
                    record,
                    head_seq,
                    lock,
                }
            })
            .collect())
    })
    .await?;
    Ok(Json(out))
}

async fn create_block(State(state): State<AppRef>, caller: Caller, RawBody(body): RawBody) -> ApiResult<Response> {
    caller.require(PermissionAction::CreateBlock)?;
    let req: NameRequest = parse_json(&body)?;
    let rec = run(&state, move |s| s.create_block(&caller.0, &req.name)).await?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn block_head(State(state): State<AppRef>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let id = block_id(&id)?;
    Ok(Json(run(&state, move |s| s.head(id)).await?).into_response())
}

async fn block_versions(State(state): State<AppRef>, caller: Caller, Path(id): Path<String>) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let id = block_id(&id)?;
    Ok(Json(run(&state, move |s| s.history(id)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitRequest {
    lock_id: Uuid,
    manifest: ManifestDocument,
    #[serde(default)]
    message: Option<String>,
}

async fn submit_block_version(
    State(state): State<AppRef>,
    caller: Caller,
    Path(id): Path<String>,
    body: Body,
) -> ApiResult<Response> {
    caller.require(PermissionAction::SubmitBlockVersion)?;
    let id = block_id(&id)?;
    let body = read_limited(body, MAX_MANIFEST_BYTES + SUBMISSION_OVERHEAD)
        .await?
        .ok_or_else(|| {
            ApiError(Error::ValidationFailed(vec![Violation {
                code: ViolationCode::ManifestTooLarge,
                detail: format!("manifest document exceeds {MAX_MANIFEST_BYTES} bytes"),
                locus: None,
            }]))
        })?;
    let req: SubmitRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError(Error::InvalidRequest(e.to_string())))?;
    let v = run(&state, move |s| {
        s.submit_block_version(&caller.0, id, &req.manifest, req.lock_id, req.message)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

#[derive(Deserialize, Default)]
struct AcquireRequest {
    ttl_seconds: Option<u64>,
}

async fn acquire_lock(
    State(state): State<AppRef>,
    caller: Caller,
    Path(id): Path<String>,
    RawBody(body): RawBody,
) -> ApiResult<Json<LockRecord>> {
    caller.require(PermissionAction::LockBlock)?;
    let id = block_id(&id)?;
    let req: AcquireRequest = parse_optional_json(&body)?;
    Ok(Json(
        run(&state, move |s| s.acquire_lock(&caller.0, id, req.ttl_seconds)).await?,
    ))
}

#[derive(Deserialize, Default)]
struct LockRef {
    lock_id: Option<Uuid>,
}

async fn renew_lock(
    State(state): State<AppRef>,
    caller: Caller,
    Path(id): Path<String>,
    RawBody(body): RawBody,
) -> ApiResult<Json<LockRecord>> {
    caller.require(PermissionAction::LockBlock)?;
    let id = block_id(&id)?;
    let req: LockRef = parse_optional_json(&body)?;
    Ok(Json(
        run(&state, move |s| {
            let lock_id = s.resolve_block_lock(id, req.lock_id)?;
            s.renew_lock(&caller.0, lock_id)
        })
        .await?,
    ))
}

async fn release_lock(
    State(state): State<AppRef>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<StatusCode> {
    if !authorize(&caller.0, PermissionAction::BreakLock) {
        caller.require(PermissionAction::LockBlock)?;
    }
    let id = block_id(&id)?;
    let lock_id = q
        .get("lock_id")
        .map(|raw| parse_id(raw, |_| Error::UnknownLock))
        .transpose()?;
    run(&state, move |s| {
        let lock_id = s.resolve_block_lock(id, lock_id)?;
        s.release_lock(&caller.0, lock_id)
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Serialize, Deserialize)]
pub struct EditProject {
    pub block: BlockRecord,
    pub base_version: Option<Uuid>,
    /// Head manifest rebased onto the head, ready to be edited and pushed.
    pub manifest: PackManifest,
    pub lock: LockRecord,
}

async fn edit_project(
    State(state): State<AppRef>,
    caller: Caller,
    Path(id): Path<String>,
) -> ApiResult<Json<EditProject>> {
    caller.require(PermissionAction::LockBlock)?;
    let id = block_id(&id)?;
    let project = run(&state, move |s| {
        let block = s.block(id)?;
        let lock = s
            .lock_status(id)?
            .filter(|l| l.holder == caller.0.user_id)
            .ok_or(Error::NotHolder)?;
        let head = s.head(id)?;
        let base_version = head.as_ref().map(|h| h.version_id);
        let manifest = match head {
            Some(h) => PackManifest {
                base_version,
                ..h.manifest
            },
            None => PackManifest::empty(id, None),
        };
        Ok(EditProject {
            block,
            base_version,
            manifest,
            lock,
        })
    })
    .await?;
    Ok(Json(project))
}

#[derive(Serialize, Deserialize)]
pub struct PendingItem {
    pub version_id: Uuid,
    pub kind: String,
    pub target_id: Uuid,
    pub target_name: String,
    pub seq: u64,
    pub author: Uuid,
    pub author_name: String,
    pub submitted_at: DateTime<Utc>,
}

async fn pending(State(state): State<AppRef>, caller: Caller) -> ApiResult<Json<Vec<PendingItem>>> {
    caller.require(PermissionAction::DecideVersion)?;
    let out = run(&state, move |s| {
        let versions = s.pending_versions(&caller.0)?;
        let blocks = s.list_blocks();
        let maps = s.list_maps();
        Ok(versions
            .into_iter()
            .map(|v| {
                let target = v.target_id();
                let target_name = blocks
                    .iter()
                    .find(|b| b.block_id == target)
                    .map(|b| b.name.clone())
                    .or_else(|| maps.iter().find(|m| m.map_id == target).map(|m| m.name.clone()))
                    .unwrap_or_default();
                PendingItem {
                    version_id: v.version_id(),
                    kind: v.kind_str().to_string(),
                    target_id: target,
                    target_name,
                    seq: v.seq(),
                    author: v.author(),
                    author_name: s.account(v.author()).map(|a| a.username).unwrap_or_default(),
                    submitted_at: v.submitted_at(),
                }
            })
            .collect())
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize, Default)]
struct DecisionRequest {
    reason: Option<String>,
}

async fn decide(state: AppRef, caller: Caller, id: String, verdict: Verdict, body: Bytes) -> ApiResult<Response> {
    caller.require(PermissionAction::DecideVersion)?;
    let id = version_id(&id)?;
    let req: DecisionRequest = parse_optional_json(&body)?;
    let v = run(&state, move |s| s.decide_version(&caller.0, id, verdict, req.reason)).await?;
    Ok(Json(v).into_response())
}

async fn approve(State(state): State<AppRef>, caller: Caller, Path(id): Path<String>, RawBody(body): RawBody) -> ApiResult<Response> {
    decide(state, caller, id, Verdict::Approve, body).await
}

async fn reject(State(state): State<AppRef>, caller: Caller, Path(id): Path<String>, RawBody(body): RawBody) -> ApiResult<Response> {
    decide(state, caller, id, Verdict::Reject, body).await
}

#[derive(Serialize, Deserialize)]
pub struct PutBlobResponse {
    pub key: BlobKey,
    pub size_bytes: u64,
    pub created: bool,
}

async fn put_blob(
    State(state): State<AppRef>,
    caller: Caller,
    Path(raw): Path<String>,
    headers: HeaderMap,
    body: Body,
) -> ApiResult<Response> {
    caller.require(PermissionAction::SubmitBlockVersion)?;
    let claimed = blob_key(&raw)?;
    let max = state.sigil.blobs().max_blob_size();
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > max) {
        return Err(ApiError(Error::BlobTooLarge { max }));
    }

    // The writer hashes and fsyncs, so it lives on the blocking pool and
    // is fed chunks as they arrive.
    let (tx, mut rx) = mpsc::channel::<Bytes>(8);
    let store_state = state.clone();
    let task = tokio::task::spawn_blocking(move || {
        let mut writer = store_state.sigil.blobs().writer()?;
        while let Some(chunk) = rx.blocking_recv() {
            writer.write_chunk(&chunk)?;
        }
        writer.finish(&claimed)
    });
    let mut body = body;
    let mut body_error = None;
    while let Some(frame) = body.frame().await {
        match frame {
            Ok(frame) => {
                if let Ok(data) = frame.into_data() {
                    if tx.send(data).await.is_err() {
                        break;
                    }
                }
            }
            Err(e) => {
                body_error = Some(e.to_string());
                break;
            }
        }
    }
    drop(tx);
    let result = task
        .await
        .map_err(|e| ApiError(Error::Storage(format!("worker failed: {e}"))))?;
    if let Some(e) = body_error {
        // An aborted upload must not be stored even if its prefix hashed.
        return Err(ApiError(Error::InvalidRequest(format!("request body: {e}"))));
    }
    let outcome = result?;
    let resp = PutBlobResponse {
        key: outcome.key,
        size_bytes: outcome.size_bytes,
        created: outcome.created,
    };
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn get_blob(State(state): State<AppRef>, caller: Caller, Path(raw): Path<String>) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let key = blob_key(&raw)?;
    let bytes = run(&state, move |s| s.get_blob(&key)).await?;
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"))],
        bytes,
    )
        .into_response())
}

async fn head_blob(State(state): State<AppRef>, caller: Caller, Path(raw): Path<String>) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let key = blob_key(&raw)?;
    match state.sigil.blobs().len_of(&key) {
        Some(len) => Ok((
            StatusCode::OK,
            [
                (header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream")),
                (header::CONTENT_LENGTH, HeaderValue::from(len)),
            ],
        )
            .into_response()),
        None => Err(ApiError(Error::UnknownBlob(key))),
    }
}

async fn sync(State(state): State<AppRef>, caller: Caller, RawBody(body): RawBody) -> ApiResult<Response> {
    caller.require(PermissionAction::ViewContent)?;
    let client: ClientState = parse_optional_json(&body)?;
    Ok(Json(run(&state, move |s| Ok(s.compute_sync(&client))).await?).into_response())
}
