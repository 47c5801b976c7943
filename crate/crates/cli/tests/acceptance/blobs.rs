//! Blob store integrity over HTTP: a PUT whose claimed hash is wrong is
//! refused with 409 and leaves no file behind; 1,000 random blobs scrub
//! clean; a byte flipped on disk is caught by a paranoid read and by scrub.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use sigil_core::{BlobKey, Role};

use crate::common::{World, PASSWORD};
use crate::support::{ensure, Http};

const BLOBS: usize = 1000;

fn files_under(dir: &Path) -> usize {
    let Ok(entries) = fs::read_dir(dir) else { return 0 };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() { files_under(&p) } else { 1 }
        })
        .sum()
}

pub fn run() -> Result<String, String> {
    let w = World::start_with(|o| o.core.paranoid_reads = true);
    let sigil = &w.server.state.sigil;
    let admin = sigil.authenticate(&sigil.login("root", PASSWORD).unwrap().token).unwrap();
    sigil.register_user(&admin, "edna", PASSWORD, Role::Editor).unwrap();
    let token = sigil.login("edna", PASSWORD).unwrap().token;
    let http = Http::new(&format!("{}/api/v1", w.url()));
    let root = sigil.blobs().root().to_path_buf();
    let mut rng = StdRng::seed_from_u64(0x5eed);

    // Wrong claimed hash.
    let before = files_under(&root);
    let bytes = b"the real content".to_vec();
    let actual = BlobKey::of(&bytes);
    let claimed = BlobKey::of(b"something else entirely");
    let r = http.call("PUT", &format!("/blobs/{}", claimed.as_str()), Some(&token), Some(&bytes));
    ensure!(r.status == 409 && r.code() == "HASH_MISMATCH", "wrong hash gave {} {}", r.status, r.code());
    ensure!(!sigil.has_blob(&claimed) && !sigil.has_blob(&actual), "mismatched upload was stored");
    ensure!(files_under(&root) == before, "mismatched upload left files in the blob store");
    let r = http.call("GET", &format!("/blobs/{}", claimed.as_str()), Some(&token), None);
    ensure!(r.status == 404, "GET of refused blob gave {}", r.status);

    // Random blobs round-trip and scrub clean.
    let mut keys = Vec::with_capacity(BLOBS);
    for i in 0..BLOBS {
        let len = match i % 10 {
            0 => 0,
            1 => rng.random_range(64 * 1024..256 * 1024),
            _ => rng.random_range(1..4096),
        };
        let mut data = vec![0u8; len];
        rng.fill_bytes(&mut data);
        // Distinct even when two draws collide.
        data.extend_from_slice(&(i as u64).to_le_bytes());
        let key = BlobKey::of(&data);
        let r = http.call("PUT", &format!("/blobs/{}", key.as_str()), Some(&token), Some(&data));
        ensure!(r.status == 201, "PUT {i} gave {} {}", r.status, r.code());
        keys.push((key, data));
    }
    for (key, data) in keys.iter().step_by(10) {
        let got = sigil.get_blob(key).map_err(|e| e.to_string())?;
        ensure!(&got == data, "blob {} read back different bytes", key.as_str());
    }
    let scrub = sigil.blobs().scrub().map_err(|e| e.to_string())?;
    ensure!(scrub.checked >= BLOBS, "scrub checked only {} blobs", scrub.checked);
    ensure!(scrub.corrupt.is_empty(), "scrub flagged {} blobs", scrub.corrupt.len());

    // Flip one byte on disk.
    let (victim, data) = keys.iter().find(|(_, d)| d.len() > 100).unwrap();
    let path = sigil.blobs().path_of(victim);
    let mut on_disk = fs::read(&path).unwrap();
    on_disk[data.len() / 2] ^= 0x01;
    fs::write(&path, &on_disk).unwrap();
    let local = sigil.get_blob(victim).map_err(|e| e.code());
    ensure!(local == Err("CORRUPT_BLOB"), "paranoid read returned {:?}", local.map(|b| b.len()));
    let r = http.call("GET", &format!("/blobs/{}", victim.as_str()), Some(&token), None);
    ensure!(r.code() == "CORRUPT_BLOB", "HTTP read of flipped blob gave {} {}", r.status, r.code());
    let scrub = sigil.blobs().scrub().map_err(|e| e.to_string())?;
    ensure!(scrub.corrupt == vec![victim.clone()], "scrub after flip reported {:?}", scrub.corrupt);

    Ok(format!(
        "wrong hash -> 409, nothing stored; {BLOBS} random blobs scrub clean; flipped byte caught by paranoid read and scrub"
    ))
}
