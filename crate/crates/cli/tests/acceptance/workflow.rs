//! Scripted CLI run: login, checkout, modify one asset, push, approve as an
//! administrator, sync as a visitor. The synced bytes must hash-equal the
//! pushed bytes and the whole script must finish in under 10 seconds.

use std::fs;
use std::time::Instant;

use crate::common::{sha256_hex, World, PASSWORD};
use crate::support::ensure;

const BUDGET_SECS: f64 = 10.0;

pub fn run() -> Result<String, String> {
    let w = World::start();
    let sigil = &w.server.state.sigil;
    let root = sigil.authenticate(&sigil.login("root", PASSWORD).unwrap().token).unwrap();
    sigil.register_user(&root, "edna", PASSWORD, "editor".parse().unwrap()).unwrap();
    sigil.register_user(&root, "vera", PASSWORD, "visitor".parse().unwrap()).unwrap();
    let scratch = tempfile::tempdir().unwrap();
    let ws = scratch.path().join("plaza");
    let second = scratch.path().join("plaza-2");
    let mirror = scratch.path().join("mirror");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();

    let start = Instant::now();
    let step = |who: &str, args: &[&str]| -> Result<crate::common::Run, String> {
        let r = w.sigil(who, args);
        ensure!(r.code == 0, "`sigil {}` as {who} exited {}: {}{}", args.join(" "), r.code, r.stdout, r.stderr);
        Ok(r)
    };

    step("root", &["login", "root", "--password", PASSWORD])?;
    let block = step("root", &["--json", "blocks", "create", "plaza"])?.json()["block_id"]
        .as_str()
        .unwrap()
        .to_string();
    step("edna", &["login", "edna", "--password", PASSWORD])?;

    // Seed the block with two assets and get them approved.
    step("edna", &["checkout", &block, &s(&ws)])?;
    fs::create_dir_all(ws.join("meshes")).unwrap();
    fs::write(ws.join("meshes/fountain.mesh"), b"fountain mesh v1").unwrap();
    fs::write(ws.join("stone.png"), b"stone texture").unwrap();
    let v1 = step(
        "edna",
        &["--json", "push", &s(&ws), "-m", "initial", "--kind", "meshes/fountain.mesh=static_mesh", "--kind", "stone.png=texture"],
    )?
    .json()["version_id"]
        .as_str()
        .unwrap()
        .to_string();
    step("root", &["review", "approve", &v1])?;
    step("edna", &["release", &s(&ws)])?;

    // The edit cycle proper: fresh checkout, change one asset, push.
    step("edna", &["checkout", &block, &s(&second)])?;
    let edited = b"fountain mesh v2 with a wider basin".to_vec();
    fs::write(second.join("meshes/fountain.mesh"), &edited).unwrap();
    let pushed = step("edna", &["--json", "push", &s(&second), "-m", "wider basin"])?.json();
    ensure!(pushed["blobs_uploaded"] == 1, "expected one upload, got {}", pushed["blobs_uploaded"]);
    let v2 = pushed["version_id"].as_str().unwrap().to_string();
    let pending = step("root", &["--json", "review", "list"])?.json();
    ensure!(
        pending.as_array().is_some_and(|p| p.iter().any(|v| v["version_id"] == v2.as_str())),
        "pushed version is not pending review"
    );
    step("root", &["review", "approve", &v2])?;
    step("edna", &["release", &s(&second)])?;

    step("vera", &["login", "vera", "--password", PASSWORD])?;
    step("vera", &["sync", &s(&mirror)])?;
    let synced = fs::read(mirror.join("blocks").join(&block).join("meshes/fountain.mesh"))
        .map_err(|e| format!("synced file missing: {e}"))?;
    let secs = start.elapsed().as_secs_f64();

    ensure!(
        sha256_hex(&synced) == sha256_hex(&edited),
        "synced bytes hash {} but pushed bytes hash {}",
        sha256_hex(&synced),
        sha256_hex(&edited)
    );
    let untouched = fs::read(mirror.join("blocks").join(&block).join("stone.png")).unwrap();
    ensure!(untouched == b"stone texture", "unchanged asset differs after sync");
    ensure!(secs < BUDGET_SECS, "took {secs:.2}s, budget {BUDGET_SECS}s");
    Ok(format!("login/checkout/edit/push/approve/sync, synced sha256 matches pushed, {secs:.2}s"))
}
