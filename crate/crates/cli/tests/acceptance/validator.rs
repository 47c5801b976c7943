//! Malformed manifests submitted over HTTP, each of which must be refused
//! with 422 VALIDATION_FAILED and exactly the expected violation code, and
//! well-formed ones, which must be accepted as pending versions.

use std::collections::BTreeSet;

use serde_json::{json, Value};
use sigil_core::{BlobKey, Role};
use uuid::Uuid;

use crate::common::{World, PASSWORD};
use crate::support::{ensure, Http};

struct Fixture {
    block: Uuid,
    lock: Uuid,
}

fn asset(id: &str, kind: &str, path: &str, hash: &str, size: u64) -> Value {
    json!({ "asset_id": id, "kind": kind, "path": path, "content_hash": hash, "size_bytes": size })
}

type Case<'a> = (&'static str, &'static str, Box<dyn Fn(&Fixture) -> Value + 'a>);

pub fn run() -> Result<String, String> {
    let w = World::start();
    let sigil = &w.server.state.sigil;
    let admin = sigil.authenticate(&sigil.login("root", PASSWORD).unwrap().token).unwrap();
    let editor = sigil.register_user(&admin, "edna", PASSWORD, Role::Editor).unwrap();
    let token = sigil.login("edna", PASSWORD).unwrap().token;
    let http = Http::new(&format!("{}/api/v1", w.url()));

    let body = b"a stored asset body".to_vec();
    let key = BlobKey::of(&body);
    sigil.put_blob(&editor, &key, &body).unwrap();
    let h = key.as_str().to_string();
    let n = body.len() as u64;
    let absent = BlobKey::of(b"never uploaded").as_str().to_string();
    let ok = |id: &str, path: &str| asset(id, "texture", path, &h, n);

    let fresh = || {
        let block = sigil.create_block(&admin, "corpus").unwrap().block_id;
        let lock = sigil.acquire_lock(&editor, block, Some(3600)).unwrap().lock_id;
        Fixture { block, lock }
    };
    let manifest = |f: &Fixture, assets: Vec<Value>| {
        json!({ "schema_version": 1, "block_id": f.block, "base_version": null, "assets": assets })
    };
    let submit = |f: &Fixture, m: Value| {
        let req = json!({ "lock_id": f.lock, "manifest": m });
        http.json("POST", &format!("/blocks/{}/versions", f.block), Some(&token), &req)
    };

    let long = "d/".repeat(119) + "xyz"; // 241 bytes
    let many: Vec<Value> = (0..1025).map(|i| ok(&format!("a{i}"), &format!("f/{i}.png"))).collect();
    let bad: Vec<Case> = vec![
        ("duplicate asset_id", "DUP_ASSET_ID", Box::new(|f| manifest(f, vec![ok("a", "x.png"), ok("a", "y.png")]))),
        ("duplicate path", "DUP_PATH", Box::new(|f| manifest(f, vec![ok("a", "x.png"), ok("b", "x.png")]))),
        ("traversal path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "../escape.png")]))),
        ("traversal inside path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "tex/../../x.png")]))),
        ("absolute path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "/etc/passwd")]))),
        ("backslash path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "tex\\x.png")]))),
        ("empty path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "")]))),
        ("double slash path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "tex//x.png")]))),
        ("dot segment path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "./x.png")]))),
        ("NUL in path", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "x\u{0}.png")]))),
        ("reserved workspace dir", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", ".sigil/x.png")]))),
        ("path over 240 bytes", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", &long)]))),
        ("file is also a directory", "BAD_PATH", Box::new(|f| manifest(f, vec![ok("a", "tex"), ok("b", "tex/x.png")]))),
        ("hash of 63 chars", "BAD_HASH_FORMAT", Box::new(|f| manifest(f, vec![asset("a", "texture", "x.png", &h[..63], n)]))),
        ("uppercase hash", "BAD_HASH_FORMAT", Box::new(|f| manifest(f, vec![asset("a", "texture", "x.png", &h.to_uppercase(), n)]))),
        ("non-hex hash", "BAD_HASH_FORMAT", Box::new(|f| manifest(f, vec![asset("a", "texture", "x.png", &"g".repeat(64), n)]))),
        ("unknown kind", "UNKNOWN_KIND", Box::new(|f| manifest(f, vec![asset("a", "sound", "x.ogg", &h, n)]))),
        ("wrong block_id", "BLOCK_ID_MISMATCH", Box::new(|f| {
            let mut m = manifest(f, vec![ok("a", "x.png")]);
            m["block_id"] = json!(Uuid::new_v4());
            m
        })),
        ("missing blob", "MISSING_BLOB", Box::new(|f| manifest(f, vec![asset("a", "texture", "x.png", &absent, 14)]))),
        ("size mismatch", "SIZE_MISMATCH", Box::new(|f| manifest(f, vec![asset("a", "texture", "x.png", &h, n + 1)]))),
        ("schema_version 2", "BAD_SCHEMA_VERSION", Box::new(|f| {
            let mut m = manifest(f, vec![ok("a", "x.png")]);
            m["schema_version"] = json!(2);
            m
        })),
        ("schema_version 0", "BAD_SCHEMA_VERSION", Box::new(|f| {
            let mut m = manifest(f, vec![]);
            m["schema_version"] = json!(0);
            m
        })),
        ("1025 assets", "MANIFEST_TOO_LARGE", Box::new(|f| manifest(f, many.clone()))),
        ("asset_id not a slug", "BAD_ASSET_ID", Box::new(|f| manifest(f, vec![ok("Bad Id!", "x.png")]))),
    ];

    let mut failures = Vec::new();
    for (name, code, build) in &bad {
        let f = fresh();
        let r = submit(&f, build(&f));
        let codes: BTreeSet<String> = r.body["error"]["violations"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|v| v["code"].as_str().map(String::from))
            .collect();
        let want = BTreeSet::from([code.to_string()]);
        if r.status != 422 || r.code() != "VALIDATION_FAILED" || codes != want {
            failures.push(format!("{name}: got {} {} {codes:?}, want 422 {code}", r.status, r.code()));
        }
        let stored = sigil.history(f.block).unwrap().len();
        if stored != 0 {
            failures.push(format!("{name}: rejected manifest left {stored} version(s)"));
        }
    }

    // A body above the manifest byte limit is refused before it is parsed.
    let f = fresh();
    let padding = "x".repeat(sigil_core::validate::MAX_MANIFEST_BYTES + 8192);
    let req = json!({ "lock_id": f.lock, "manifest": manifest(&f, vec![]), "message": padding });
    let r = http.json("POST", &format!("/blocks/{}/versions", f.block), Some(&token), &req);
    let oversized = r.body["error"]["violations"][0]["code"].as_str().unwrap_or("");
    if r.status != 422 || oversized != "MANIFEST_TOO_LARGE" {
        failures.push(format!("oversized body: got {} {oversized}", r.status));
    }
    let bad_count = bad.len() + 1;

    let full: Vec<Value> = (0..1024).map(|i| ok(&format!("a{i}"), &format!("t/{:02}/{i}.png", i % 16))).collect();
    let good: Vec<(&str, Value)> = vec![
        ("empty", json!([])),
        ("single asset", json!([ok("hero", "hero.png")])),
        (
            "every kind, nested",
            json!([
                asset("mesh", "static_mesh", "meshes/hall/hall.mesh", &h, n),
                asset("tex", "texture", "textures/hall/albedo.png", &h, n),
                asset("anim", "animation", "anim/door_open.anim", &h, n),
                asset("bp", "blueprint", "logic/door.bp", &h, n),
            ]),
        ),
        ("unicode path", json!([ok("sign", "textures/straße/schild-é.png")])),
        ("same blob under many paths", json!([ok("a1", "a/x.png"), ok("a2", "b/x.png"), ok("a-3", "c/x.png")])),
        ("1024 assets", Value::Array(full)),
    ];
    for (name, assets) in &good {
        let f = fresh();
        let mut m = manifest(&f, vec![]);
        m["assets"] = assets.clone();
        let r = submit(&f, m);
        if r.status != 201 || r.body["state"] != "pending" {
            failures.push(format!("{name}: got {} {} {}", r.status, r.code(), r.body["error"]["violations"]));
        }
    }

    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(format!(
        "{bad_count} malformed manifests refused with the expected code, {} well-formed accepted",
        good.len()
    ))
}
