//! Command implementations. Each returns an [`Output`] with a text and a
//! JSON rendering, or a [`CliError`] that decides the exit code.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;
use sigil_core::validate::validate_structure;
use sigil_core::{
    BlobKey, BlockRecord, BlockVersion, LockRecord, MapRecord, MapVersion, PackManifest, Placement,
    VersionRecord,
};
use uuid::Uuid;

use crate::client::{normalize_server_url, Client};
use crate::credentials::{default_config_dir, read_password_line, Credentials, StoredSession};
use crate::error::{CliError, CliResult};
use crate::fsutil::{absent_or_empty, contained, place_file};
use crate::mirror::{self, MirrorState};
use crate::transfer;
use crate::workspace::{self, ControlFile, CONTROL_DIR};
use crate::{BlocksCmd, Cli, Command, LockCmd, LockTarget, MapsCmd, Output, ReviewCmd, DEFAULT_SERVER};

struct Ctx {
    server: Option<String>,
    config_dir: PathBuf,
}

impl Ctx {
    fn credentials(&self) -> CliResult<Credentials> {
        Credentials::load(&self.config_dir)
    }

    /// `--server`, else `fallback`, else the only server with credentials,
    /// else the default.
    fn server_url(&self, fallback: Option<&str>) -> CliResult<String> {
        if let Some(s) = self.server.as_deref().or(fallback) {
            return Ok(normalize_server_url(s));
        }
        let creds = self.credentials()?;
        Ok(normalize_server_url(creds.sole_server().unwrap_or(DEFAULT_SERVER)))
    }

    fn session(&self, server: &str) -> CliResult<StoredSession> {
        self.credentials()?.session_for(server).cloned().ok_or_else(|| {
            CliError::new("NOT_LOGGED_IN", format!("not logged in to {server}"))
                .with_hint(format!("run `sigil --server {server} login <username>`"))
        })
    }

    fn client(&self, fallback: Option<&str>) -> CliResult<(Client, StoredSession)> {
        let server = self.server_url(fallback)?;
        let session = self.session(&server)?;
        Ok((Client::new(&server, Some(session.token.clone())), session))
    }
}

pub fn execute(cli: Cli) -> CliResult<Output> {
    let ctx = Ctx {
        server: cli.server,
        config_dir: cli.config_dir.unwrap_or_else(default_config_dir),
    };
    match cli.command {
        Command::Login { username, password } => login(&ctx, &username, password),
        Command::Logout => logout(&ctx),
        Command::Blocks { action } => blocks(&ctx, action.unwrap_or(BlocksCmd::List)),
        Command::Maps { action } => maps(&ctx, action.unwrap_or(MapsCmd::List)),
        Command::Lock { action } => lock(&ctx, action),
        Command::Checkout { block, directory, ttl } => checkout(&ctx, block, &directory, ttl),
        Command::Push {
            directory,
            message,
            kinds,
        } => push(&ctx, &directory, message, kinds),
        Command::Release { directory } => release(&ctx, &directory),
        Command::Sync { directory } => sync(&ctx, &directory),
        Command::Review { action } => review(&ctx, action),
    }
}

#[derive(Deserialize)]
struct LoginReply {
    token: String,
    expires_at: String,
    role: sigil_core::Role,
}

fn login(ctx: &Ctx, username: &str, password: Option<String>) -> CliResult<Output> {
    let server = ctx.server_url(None)?;
    let password = match password {
        Some(p) => p,
        None => read_password_line()?,
    };
    let client = Client::new(&server, None);
    let reply: LoginReply = client.typed(
        "POST",
        "/auth/login",
        Some(&json!({"username": username, "password": password})),
    )?;
    let mut creds = ctx.credentials()?;
    creds.servers.insert(
        server.clone(),
        StoredSession {
            token: reply.token,
            username: username.to_string(),
            role: reply.role,
            expires_at: reply.expires_at.clone(),
        },
    );
    creds.save(&ctx.config_dir)?;
    Ok(Output::new(
        format!("logged in to {server} as {username} ({}), session expires {}", reply.role, reply.expires_at),
        json!({"server": server, "username": username, "role": reply.role, "expires_at": reply.expires_at}),
    ))
}

fn logout(ctx: &Ctx) -> CliResult<Output> {
    let server = ctx.server_url(None)?;
    let mut creds = ctx.credentials()?;
    let Some(session) = creds.servers.remove(&server) else {
        let mut out = Output::new("", json!({"server": server, "logged_out": false}));
        out.warning = Some(format!("not logged in to {server}"));
        return Ok(out);
    };
    let client = Client::new(&server, Some(session.token));
    let remote = client.json("POST", "/auth/logout", None);
    creds.save(&ctx.config_dir)?;
    let mut out = Output::new(
        format!("logged out of {server}"),
        json!({"server": server, "logged_out": true}),
    );
    match remote {
        Ok(_) => {}
        // The token is gone locally either way.
        Err(e) if e.code == "UNAUTHENTICATED" => {}
        Err(e) => out.warning = Some(format!("server did not confirm logout: {e}")),
    }
    Ok(out)
}

#[derive(Deserialize, serde::Serialize)]
struct BlockSummary {
    #[serde(flatten)]
    record: BlockRecord,
    head_seq: Option<u64>,
    lock: Option<LockRecord>,
}

#[derive(Deserialize, serde::Serialize)]
struct MapSummary {
    #[serde(flatten)]
    record: MapRecord,
    head_seq: Option<u64>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
}

fn blocks(ctx: &Ctx, action: BlocksCmd) -> CliResult<Output> {
    let (client, _) = ctx.client(None)?;
    match action {
        BlocksCmd::List => {
            let list: Vec<BlockSummary> = client.typed("GET", "/blocks", None)?;
            let mut text = format!("{:<36}  {:<24}  {:>4}  LOCK\n", "BLOCK", "NAME", "HEAD");
            for b in &list {
                let lock = b
                    .lock
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |l| format!("{} until {}", l.holder_username, l.expires_at));
                let _ = writeln!(text, "{:<36}  {:<24}  {:>4}  {lock}", b.record.block_id, b.record.name, opt(&b.head_seq));
            }
            Ok(Output::new(text, serde_json::to_value(&list).expect("serializes")))
        }
        BlocksCmd::Create { name } => {
            let rec: BlockRecord = client.typed("POST", "/blocks", Some(&json!({"name": name})))?;
            Ok(Output::new(
                format!("created block {} ({})", rec.name, rec.block_id),
                serde_json::to_value(&rec).expect("serializes"),
            ))
        }
        BlocksCmd::History { block } => {
            let list: Vec<BlockVersion> = client.typed("GET", &format!("/blocks/{block}/versions"), None)?;
            let mut text = format!("{:>4}  {:<36}  {:<8}  {:>6}  SUBMITTED\n", "SEQ", "VERSION", "STATE", "ASSETS");
            for v in &list {
                let _ = writeln!(
                    text,
                    "{:>4}  {:<36}  {:<8}  {:>6}  {}",
                    v.seq,
                    v.version_id,
                    v.state,
                    v.manifest.assets.len(),
                    v.submitted_at
                );
            }
            Ok(Output::new(text, serde_json::to_value(&list).expect("serializes")))
        }
    }
}

fn maps(ctx: &Ctx, action: MapsCmd) -> CliResult<Output> {
    let (client, _) = ctx.client(None)?;
    match action {
        MapsCmd::List => {
            let list: Vec<MapSummary> = client.typed("GET", "/maps", None)?;
            let mut text = format!("{:<36}  {:<24}  HEAD\n", "MAP", "NAME");
            for m in &list {
                let _ = writeln!(text, "{:<36}  {:<24}  {}", m.record.map_id, m.record.name, opt(&m.head_seq));
            }
            Ok(Output::new(text, serde_json::to_value(&list).expect("serializes")))
        }
        MapsCmd::Create { name } => {
            let rec: MapRecord = client.typed("POST", "/maps", Some(&json!({"name": name})))?;
            Ok(Output::new(
                format!("created map {} ({})", rec.name, rec.map_id),
                serde_json::to_value(&rec).expect("serializes"),
            ))
        }
        MapsCmd::History { map } => {
            let list: Vec<MapVersion> = client.typed("GET", &format!("/maps/{map}/versions"), None)?;
            let mut text = format!("{:>4}  {:<36}  {:<8}  {:>10}\n", "SEQ", "VERSION", "STATE", "PLACEMENTS");
            for v in &list {
                let _ = writeln!(text, "{:>4}  {:<36}  {:<8}  {:>10}", v.seq, v.version_id, v.state, v.placements.len());
            }
            Ok(Output::new(text, serde_json::to_value(&list).expect("serializes")))
        }
        MapsCmd::Submit { map, placements } => {
            let text = fs::read_to_string(&placements)
                .map_err(|e| CliError::io(&placements.display().to_string(), e))?;
            let parsed: Vec<Placement> = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", placements.display())))?;
            let v: MapVersion = client.typed(
                "POST",
                &format!("/maps/{map}/versions"),
                Some(&json!({"placements": parsed})),
            )?;
            Ok(Output::new(
                format!("submitted map version {} (seq {}, pending review)", v.version_id, v.seq),
                serde_json::to_value(&v).expect("serializes"),
            ))
        }
    }
}

fn describe_lock(l: &LockRecord) -> String {
    format!(
        "lock {} on block {} held by {} until {}",
        l.lock_id, l.block_id, l.holder_username, l.expires_at
    )
}

fn lock(ctx: &Ctx, action: LockCmd) -> CliResult<Output> {
    let (client, _) = ctx.client(None)?;
    let lock_body = |lock_id: Option<Uuid>| json!({ "lock_id": lock_id });
    match action {
        LockCmd::Acquire { block, ttl } => {
            let l: LockRecord = client.typed(
                "POST",
                &format!("/blocks/{block}/lock"),
                Some(&json!({ "ttl_seconds": ttl })),
            )?;
            Ok(Output::new(describe_lock(&l), serde_json::to_value(&l).expect("serializes")))
        }
        LockCmd::Renew(LockTarget { block, lock_id }) => {
            let l: LockRecord = client.typed(
                "POST",
                &format!("/blocks/{block}/lock/renew"),
                Some(&lock_body(lock_id)),
            )?;
            Ok(Output::new(describe_lock(&l), serde_json::to_value(&l).expect("serializes")))
        }
        LockCmd::Release(LockTarget { block, lock_id }) => {
            let path = match lock_id {
                Some(id) => format!("/blocks/{block}/lock?lock_id={id}"),
                None => format!("/blocks/{block}/lock"),
            };
            client.json("DELETE", &path, None)?;
            Ok(Output::new(
                format!("released lock on block {block}"),
                json!({"block_id": block, "released": true}),
            ))
        }
        LockCmd::Status { block } => {
            let list: Vec<BlockSummary> = client.typed("GET", "/blocks", None)?;
            let entry = list
                .into_iter()
                .find(|b| b.record.block_id == block)
                .ok_or_else(|| CliError::new("UNKNOWN_BLOCK", format!("unknown block {block}")))?;
            let text = match &entry.lock {
                Some(l) => describe_lock(l),
                None => format!("block {block} is not locked"),
            };
            Ok(Output::new(text, json!({ "block_id": block, "lock": entry.lock })))
        }
    }
}

#[derive(Deserialize)]
struct EditProject {
    block: BlockRecord,
    base_version: Option<Uuid>,
    manifest: PackManifest,
    lock: LockRecord,
}

/// Removes what checkout created: the directory itself if it did not exist
/// before, otherwise its contents.
fn discard_workspace(dir: &Path, created: bool) {
    if created {
        let _ = fs::remove_dir_all(dir);
        return;
    }
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            let _ = if p.is_dir() && !p.is_symlink() {
                fs::remove_dir_all(&p)
            } else {
                fs::remove_file(&p)
            };
        }
    }
}

fn lock_hint(e: CliError) -> CliError {
    match e.code.as_str() {
        "LOCK_HELD" => e.with_hint("wait for the holder to release it or for the lock to expire"),
        "LOCK_EXPIRED" | "UNKNOWN_LOCK" | "NOT_HOLDER" => {
            e.with_hint("the lock is gone; check the block out again to re-lock it")
        }
        "STALE_BASE" => e.with_hint("another version was approved meanwhile; sync and check the block out again"),
        _ => e,
    }
}

fn checkout(ctx: &Ctx, block: Uuid, dir: &Path, ttl: Option<u64>) -> CliResult<Output> {
    if !absent_or_empty(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))? {
        return Err(CliError::usage(format!("{} is not empty", dir.display())));
    }
    let (client, session) = ctx.client(None)?;
    let mut reused = false;
    match client.typed::<LockRecord>("POST", &format!("/blocks/{block}/lock"), Some(&json!({"ttl_seconds": ttl}))) {
        Ok(_) => {}
        Err(e) if e.code == "LOCK_HELD" && e.details["holder"].as_str() == Some(session.username.as_str()) => {
            reused = true;
        }
        Err(e) => return Err(lock_hint(e)),
    }
    let project: EditProject = client
        .typed("GET", &format!("/blocks/{block}/editproject"), None)
        .map_err(lock_hint)?;

    let created = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    let result = materialize(&client, dir, &project.manifest);
    if let Err(e) = result {
        discard_workspace(dir, created);
        return Err(e);
    }

    let server = client.base().to_string();
    let control = ControlFile {
        format: workspace::FORMAT,
        server_url: server,
        block_id: block,
        lock_id: project.lock.lock_id,
        base_version: project.base_version,
        manifest: project.manifest.clone(),
        released: false,
        pushed: Vec::new(),
    };
    if let Err(e) = control.save(dir) {
        discard_workspace(dir, created);
        return Err(e);
    }
    let n = project.manifest.assets.len();
    let text = format!(
        "checked out block {} ({block}) into {}: {n} asset(s), base {}\n{}{}",
        project.block.name,
        dir.display(),
        opt(&project.base_version),
        describe_lock(&project.lock),
        if reused { " (reused)" } else { "" },
    );
    Ok(Output::new(
        text,
        json!({
            "block_id": block,
            "directory": dir,
            "base_version": project.base_version,
            "assets": n,
            "lock": project.lock,
            "lock_reused": reused,
        }),
    ))
}

/// Downloads and verifies every blob of `m`, then places the files.
fn materialize(client: &Client, dir: &Path, m: &PackManifest) -> CliResult<()> {
    let mut targets = Vec::with_capacity(m.assets.len());
    for a in &m.assets {
        let dest = contained(dir, &a.path).ok_or_else(|| {
            CliError::new("CORRUPT_DOWNLOAD", format!("manifest names unsafe path {:?}", a.path))
        })?;
        targets.push((dest, a.content_hash.clone()));
    }
    let unique: BTreeMap<BlobKey, u64> = m.assets.iter().map(|a| (a.content_hash.clone(), a.size_bytes)).collect();
    let wanted: Vec<(BlobKey, u64)> = unique.into_iter().collect();
    let staging = dir.join(CONTROL_DIR).join("staging");
    fs::create_dir_all(&staging).map_err(|e| CliError::io(&staging.display().to_string(), e))?;
    transfer::for_each(&wanted, transfer::MAX_CONCURRENT, |(key, size)| {
        client.download_blob(key, *size, &staging.join(key.as_str()))
    })?;
    for (dest, key) in &targets {
        place_file(&staging.join(key.as_str()), dest, key)
            .map_err(|e| CliError::io(&dest.display().to_string(), e))?;
    }
    fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging.display().to_string(), e))?;
    Ok(())
}

fn push(ctx: &Ctx, dir: &Path, message: Option<String>, kinds: Vec<(String, sigil_core::AssetKind)>) -> CliResult<Output> {
    let mut control = ControlFile::load(dir)?;
    if control.released {
        return Err(CliError::new("LOCK_RELEASED", "this workspace's lock was released")
            .with_hint("check the block out again to make further edits"));
    }
    let (client, _) = ctx.client(Some(&control.server_url))?;
    let block = control.block_id;

    // One renewal up front so a slow upload does not outlive the lock.
    let renewed: LockRecord = client
        .typed(
            "POST",
            &format!("/blocks/{block}/lock/renew"),
            Some(&json!({"lock_id": control.lock_id})),
        )
        .map_err(lock_hint)?;

    let files = workspace::scan(dir)?;
    let mut kind_map = workspace::load_kinds(dir)?;
    kind_map.extend(kinds.iter().cloned());
    let manifest = workspace::build_manifest(&control.manifest, control.base_version, &files, &kind_map)?;
    let violations = validate_structure(&manifest, block);
    if !violations.is_empty() {
        let mut e = CliError::new(
            "VALIDATION_FAILED",
            format!("workspace content is invalid ({} violation(s))", violations.len()),
        );
        e.violations = violations
            .iter()
            .map(|v| serde_json::to_value(v).expect("violation serializes"))
            .collect();
        return Err(e);
    }

    let mut unique: BTreeMap<BlobKey, PathBuf> = BTreeMap::new();
    for f in &files {
        unique.entry(f.key.clone()).or_insert_with(|| f.abs.clone());
    }
    let jobs: Vec<(BlobKey, PathBuf)> = unique.into_iter().collect();
    let uploaded = transfer::for_each(&jobs, transfer::MAX_CONCURRENT, |(key, path)| {
        if client.has_blob(key)? {
            return Ok(false);
        }
        client.put_blob(key, path)?;
        Ok(true)
    })?;
    let uploaded = uploaded.into_iter().filter(|u| *u).count();

    let version: BlockVersion = client
        .typed(
            "POST",
            &format!("/blocks/{block}/versions"),
            Some(&json!({"lock_id": control.lock_id, "manifest": manifest, "message": message})),
        )
        .map_err(lock_hint)?;
    control.pushed.push(version.version_id);
    control.save(dir)?;
    workspace::remember_kinds(dir, &kinds)?;
    let text = format!(
        "pushed version {} (seq {}, pending review): {} asset(s), uploaded {uploaded} of {} blob(s)\nlock held until {}",
        version.version_id,
        version.seq,
        manifest.assets.len(),
        jobs.len(),
        renewed.expires_at,
    );
    Ok(Output::new(
        text,
        json!({
            "version_id": version.version_id,
            "seq": version.seq,
            "state": version.state,
            "assets": manifest.assets.len(),
            "blobs_uploaded": uploaded,
            "blobs_total": jobs.len(),
            "lock_expires_at": renewed.expires_at,
        }),
    ))
}

fn release(ctx: &Ctx, dir: &Path) -> CliResult<Output> {
    let mut control = ControlFile::load(dir)?;
    let block = control.block_id;
    let json_out = |warning: bool| json!({"block_id": block, "released": true, "warning": warning});
    if control.released {
        let mut out = Output::new("", json_out(true));
        out.warning = Some("lock was already released".into());
        return Ok(out);
    }
    let (client, _) = ctx.client(Some(&control.server_url))?;
    let path = format!("/blocks/{block}/lock?lock_id={}", control.lock_id);
    let mut warning = None;
    match client.json("DELETE", &path, None) {
        Ok(_) => {}
        Err(e) if e.code == "UNKNOWN_LOCK" => {
            warning = Some("lock had already expired or been released".to_string());
        }
        Err(e) => return Err(e),
    }
    control.released = true;
    control.save(dir)?;
    let mut out = Output::new(format!("released lock on block {block}"), json_out(warning.is_some()));
    out.warning = warning;
    Ok(out)
}

fn sync(ctx: &Ctx, dir: &Path) -> CliResult<Output> {
    if ControlFile::exists(dir) {
        return Err(CliError::usage(format!(
            "{} is an edit workspace; sync into a separate directory",
            dir.display()
        )));
    }
    let existing = MirrorState::load(dir)?;
    if existing.is_none() && !absent_or_empty(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))? {
        return Err(CliError::usage(format!(
            "{} is neither empty nor a sync mirror",
            dir.display()
        )));
    }
    let (client, _) = ctx.client(existing.as_ref().map(|s| s.server_url.as_str()))?;
    let mut state = existing.unwrap_or_else(|| MirrorState {
        format: mirror::FORMAT,
        server_url: client.base().to_string(),
        ..MirrorState::default()
    });
    fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
    let report = mirror::sync(&client, dir, &mut state)?;
    if !dir.join(CONTROL_DIR).join("mirror.json").exists() {
        state.save(dir)?;
    }
    let text = if report.is_noop() {
        "already up to date".to_string()
    } else {
        let mut t = String::new();
        for c in &report.blocks {
            let _ = writeln!(t, "block {}: {} -> {}", c.id, opt(&c.old_version), c.new_version);
        }
        for c in &report.maps {
            let _ = writeln!(t, "map {}: {} -> {}", c.id, opt(&c.old_version), c.new_version);
        }
        for id in &report.removed {
            let _ = writeln!(t, "removed {id} (no longer on the server)");
        }
        let _ = write!(
            t,
            "{} file(s) written, {} removed, {} blob(s) downloaded",
            report.files_written, report.files_removed, report.blobs_downloaded
        );
        t
    };
    Ok(Output::new(text, serde_json::to_value(&report).expect("serializes")))
}

#[derive(Deserialize, serde::Serialize)]
struct PendingItem {
    version_id: Uuid,
    kind: String,
    target_id: Uuid,
    target_name: String,
    seq: u64,
    author_name: String,
    submitted_at: String,
}

fn review(ctx: &Ctx, action: ReviewCmd) -> CliResult<Output> {
    let (client, _) = ctx.client(None)?;
    let (version, verdict, reason) = match action {
        ReviewCmd::List => {
            let list: Vec<PendingItem> = client.typed("GET", "/review/pending", None)?;
            let mut text = format!(
                "{:<36}  {:<5}  {:<24}  {:>4}  {:<16}  SUBMITTED\n",
                "VERSION", "KIND", "TARGET", "SEQ", "AUTHOR"
            );
            for p in &list {
                let _ = writeln!(
                    text,
                    "{:<36}  {:<5}  {:<24}  {:>4}  {:<16}  {}",
                    p.version_id, p.kind, p.target_name, p.seq, p.author_name, p.submitted_at
                );
            }
            if list.is_empty() {
                text = "no pending versions".into();
            }
            return Ok(Output::new(text, serde_json::to_value(&list).expect("serializes")));
        }
        ReviewCmd::Approve { version, reason } => (version, "approve", reason),
        ReviewCmd::Reject { version, reason } => (version, "reject", Some(reason)),
    };
    let rec: VersionRecord = client
        .typed(
            "POST",
            &format!("/versions/{version}/{verdict}"),
            Some(&json!({ "reason": reason })),
        )
        .map_err(lock_hint)?;
    Ok(Output::new(
        format!(
            "{} {} version {} (seq {})",
            rec.state(),
            rec.kind_str(),
            rec.version_id(),
            rec.seq()
        ),
        serde_json::to_value(&rec).expect("serializes"),
    ))
}
