//! 100 random approval histories over blocks and maps. At random points
//! clients that are empty, stale or carrying ids the server never issued
//! sync; each delta is checked against independently tracked heads, and
//! after applying the response a second sync must be empty.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sigil_core::versions::Verdict;
use sigil_core::{ClientState, PackManifest, Placement, Role, Sigil, SyncResponse};
use uuid::Uuid;

use crate::support::{ensure, Store};

const HISTORIES: u64 = 100;
const STEPS: usize = 60;

pub fn run() -> Result<String, String> {
    let mut syncs = 0;
    let mut deltas = 0;
    for seed in 0..HISTORIES {
        let (s, d) = history(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        syncs += s;
        deltas += d;
    }
    Ok(format!(
        "{HISTORIES} histories, {syncs} client syncs carrying {deltas} deltas; every second sync empty"
    ))
}

/// Heads as the test believes them to be, maintained from API results only.
#[derive(Default)]
struct Heads {
    blocks: BTreeMap<Uuid, Uuid>,
    maps: BTreeMap<Uuid, Uuid>,
}

fn history(seed: u64) -> Result<(usize, usize), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let store = Store::new(|_| {});
    let s = &store.sigil;
    let admin = &store.admin;
    let editor = store.user("edna", Role::Editor);

    let blocks: Vec<Uuid> = (0..rng.random_range(1..=6))
        .map(|i| s.create_block(admin, &format!("block-{i}")).unwrap().block_id)
        .collect();
    let maps: Vec<Uuid> = (0..rng.random_range(0..=3))
        .map(|i| s.create_map(admin, &format!("map-{i}")).unwrap().map_id)
        .collect();
    let mut heads = Heads::default();
    let mut clients: Vec<ClientState> = vec![ClientState::default()];
    let mut syncs = 0;
    let mut delta_count = 0;

    for _ in 0..STEPS {
        match rng.random_range(0..10) {
            0..=4 => {
                let b = blocks[rng.random_range(0..blocks.len())];
                let lock = s.acquire_lock(&editor, b, None).unwrap();
                let base = heads.blocks.get(&b).copied();
                let v = s.submit_manifest(&editor, &PackManifest::empty(b, base), lock.lock_id).unwrap();
                s.release_lock(&editor, lock.lock_id).unwrap();
                if rng.random_bool(0.7) {
                    s.decide_version(admin, v.version_id, Verdict::Approve, None).unwrap();
                    heads.blocks.insert(b, v.version_id);
                } else {
                    s.decide_version(admin, v.version_id, Verdict::Reject, Some("no".into())).unwrap();
                }
            }
            5..=6 if !maps.is_empty() => {
                let m = maps[rng.random_range(0..maps.len())];
                let placements: Vec<Placement> = (0..rng.random_range(0..4))
                    .map(|_| Placement::identity(blocks[rng.random_range(0..blocks.len())]))
                    .collect();
                let v = s.submit_map_version(admin, m, placements).unwrap();
                if rng.random_bool(0.7) {
                    s.decide_version(admin, v.version_id, Verdict::Approve, None).unwrap();
                    heads.maps.insert(m, v.version_id);
                } else {
                    s.decide_version(admin, v.version_id, Verdict::Reject, None).unwrap();
                }
            }
            _ => {
                let mut client = match rng.random_range(0..4) {
                    0 => ClientState::default(),
                    1 => clients[rng.random_range(0..clients.len())].clone(),
                    2 => {
                        // Ids this server never issued, mixed into a real state.
                        let mut c = clients[rng.random_range(0..clients.len())].clone();
                        c.blocks.insert(Uuid::new_v4(), Uuid::new_v4());
                        c.maps.insert(Uuid::new_v4(), Uuid::new_v4());
                        c
                    }
                    _ => {
                        // Known ids at versions that are not the head.
                        let mut c = ClientState::default();
                        for b in heads.blocks.keys() {
                            c.blocks.insert(*b, Uuid::new_v4());
                        }
                        c
                    }
                };
                delta_count += sync_once(s, &heads, &mut client)?;
                syncs += 1;
                clients.push(client);
            }
        }
    }
    // Every client ever seen, one last time against the final heads.
    for mut c in clients {
        delta_count += sync_once(s, &heads, &mut c)?;
        syncs += 1;
    }
    Ok((syncs, delta_count))
}

fn sync_once(s: &Sigil, heads: &Heads, client: &mut ClientState) -> Result<usize, String> {
    let before = client.clone();
    let first = s.compute_sync(client);
    check_deltas(s, heads, &before, &first)?;
    client.apply(&first);
    ensure!(client.blocks == heads.blocks, "client blocks differ from heads after apply");
    ensure!(client.maps == heads.maps, "client maps differ from heads after apply");

    let second = s.compute_sync(client);
    ensure!(
        second.deltas.is_empty() && second.map_deltas.is_empty() && second.unknown_ids.is_empty(),
        "second sync not empty: {} deltas, {} map deltas, {} unknown ids",
        second.deltas.len(),
        second.map_deltas.len(),
        second.unknown_ids.len()
    );
    Ok(first.deltas.len() + first.map_deltas.len())
}

fn check_deltas(s: &Sigil, heads: &Heads, client: &ClientState, r: &SyncResponse) -> Result<(), String> {
    let want_blocks: Vec<Uuid> = heads
        .blocks
        .iter()
        .filter(|(b, v)| client.blocks.get(b) != Some(v))
        .map(|(b, _)| *b)
        .collect();
    let got_blocks: Vec<Uuid> = r.deltas.iter().map(|d| d.block_id).collect();
    ensure!(got_blocks == want_blocks, "block deltas {got_blocks:?}, expected {want_blocks:?}");
    for d in &r.deltas {
        ensure!(d.old_version == client.blocks.get(&d.block_id).copied(), "delta old_version wrong");
        ensure!(Some(&d.new_version) == heads.blocks.get(&d.block_id), "delta new_version is not the head");
        let head = s.head(d.block_id).unwrap().unwrap();
        ensure!(d.manifest == head.manifest, "delta manifest is not the head manifest");
    }

    let want_maps: Vec<Uuid> = heads
        .maps
        .iter()
        .filter(|(m, v)| client.maps.get(m) != Some(v))
        .map(|(m, _)| *m)
        .collect();
    let got_maps: Vec<Uuid> = r.map_deltas.iter().map(|d| d.map_id).collect();
    ensure!(got_maps == want_maps, "map deltas {got_maps:?}, expected {want_maps:?}");
    for d in &r.map_deltas {
        let head = s.map_head(d.map_id).unwrap().unwrap();
        ensure!(d.new_version == head.version_id && d.placements == head.placements, "map delta is not the head");
    }

    let mut want_unknown: Vec<Uuid> = client
        .blocks
        .keys()
        .filter(|id| s.block(**id).is_err())
        .chain(client.maps.keys().filter(|id| s.map_head(**id).is_err()))
        .copied()
        .collect();
    let mut got_unknown = r.unknown_ids.clone();
    want_unknown.sort();
    got_unknown.sort();
    ensure!(got_unknown == want_unknown, "unknown_ids {got_unknown:?}, expected {want_unknown:?}");
    Ok(())
}
