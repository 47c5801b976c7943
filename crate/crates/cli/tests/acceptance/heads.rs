//! 500 random interleavings of submit/approve/reject over 4 blocks, each
//! replayed against a model that knows when STALE_BASE and ALREADY_DECIDED
//! must be raised. After every step the per-block head seq must not have
//! gone backwards (and must have risen if the head moved) and every history
//! must extend the previous one, with only pending entries changing state.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sigil_core::{
    AssetEntry, AssetKind, BlobKey, BlockVersion, PackManifest, Role, VersionState,
    MANIFEST_SCHEMA_VERSION,
};
use sigil_core::versions::Verdict;
use uuid::Uuid;

use crate::support::{ensure, Store};

const INTERLEAVINGS: u64 = 500;
const BLOCKS: usize = 4;
const STEPS: usize = 40;

#[derive(Default)]
struct ModelBlock {
    head: Option<Uuid>,
    head_seq: u64,
    /// (version_id, base, state) in seq order.
    versions: Vec<(Uuid, Option<Uuid>, VersionState)>,
}

#[derive(Default)]
struct Tally {
    submitted: usize,
    approved: usize,
    rejected: usize,
    stale: usize,
    already: usize,
}

pub fn run() -> Result<String, String> {
    let mut t = Tally::default();
    for seed in 0..INTERLEAVINGS {
        interleave(seed, &mut t).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    ensure!(t.stale > 0 && t.already > 0, "workload never produced STALE_BASE or ALREADY_DECIDED");
    Ok(format!(
        "{INTERLEAVINGS} interleavings x {STEPS} steps on {BLOCKS} blocks: {} submitted, {} approved, {} rejected, {} STALE_BASE, {} ALREADY_DECIDED, all as predicted",
        t.submitted, t.approved, t.rejected, t.stale, t.already
    ))
}

fn interleave(seed: u64, t: &mut Tally) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let store = Store::new(|_| {});
    let s = &store.sigil;
    let editor = store.user("edna", Role::Editor);

    let pool: Vec<(BlobKey, u64)> = (0..3)
        .map(|i| {
            let bytes = format!("asset body {seed}/{i}").into_bytes();
            let key = BlobKey::of(&bytes);
            s.put_blob(&editor, &key, &bytes).unwrap();
            (key, bytes.len() as u64)
        })
        .collect();

    let mut blocks = Vec::new();
    let mut locks = Vec::new();
    for i in 0..BLOCKS {
        let b = s.create_block(&store.admin, &format!("block-{i}")).unwrap();
        locks.push(s.acquire_lock(&editor, b.block_id, Some(7_200)).unwrap().lock_id);
        blocks.push(b.block_id);
    }
    let mut model: Vec<ModelBlock> = (0..BLOCKS).map(|_| ModelBlock::default()).collect();
    let mut seen: Vec<Vec<BlockVersion>> = vec![Vec::new(); BLOCKS];
    let mut owner: HashMap<Uuid, usize> = HashMap::new();

    for step in 0..STEPS {
        let b = rng.random_range(0..BLOCKS);
        let roll = rng.random_range(0..100);
        let ctx = |what: &str| format!("step {step} on block {b}: {what}");
        if roll < 45 || model[b].versions.is_empty() {
            // Base: usually the head, sometimes an older version or garbage.
            let base = match rng.random_range(0..10) {
                0..=5 => model[b].head,
                6..=7 if !model[b].versions.is_empty() => {
                    Some(model[b].versions[rng.random_range(0..model[b].versions.len())].0)
                }
                8 => None,
                _ => Some(Uuid::new_v4()),
            };
            let manifest = manifest(&mut rng, blocks[b], base, &pool);
            let expect_stale = base != model[b].head;
            match s.submit_manifest(&editor, &manifest, locks[b]) {
                Ok(v) => {
                    ensure!(!expect_stale, "{}", ctx("stale submission accepted"));
                    let want_seq = model[b].versions.len() as u64 + 1;
                    ensure!(v.seq == want_seq, "{}", ctx(&format!("seq {} want {want_seq}", v.seq)));
                    model[b].versions.push((v.version_id, base, VersionState::Pending));
                    owner.insert(v.version_id, b);
                    t.submitted += 1;
                }
                Err(e) if e.code() == "STALE_BASE" => {
                    ensure!(expect_stale, "{}", ctx("fresh submission refused as STALE_BASE"));
                    t.stale += 1;
                }
                Err(e) => return Err(ctx(&format!("submit failed: {e}"))),
            }
        } else {
            let versions = &model[b].versions;
            let idx = rng.random_range(0..versions.len());
            let (vid, base, state) = versions[idx];
            let verdict = if roll < 80 { Verdict::Approve } else { Verdict::Reject };
            let expected = if state.is_terminal() {
                Err("ALREADY_DECIDED")
            } else if verdict == Verdict::Approve && base != model[b].head {
                Err("STALE_BASE")
            } else {
                Ok(())
            };
            let got = s.decide_version(&store.admin, vid, verdict, None).map(|_| ()).map_err(|e| e.code());
            ensure!(got == expected, "{}", ctx(&format!("{verdict:?} gave {got:?}, model {expected:?}")));
            match got {
                Ok(()) => {
                    let m = &mut model[b];
                    if verdict == Verdict::Approve {
                        m.versions[idx].2 = VersionState::Approved;
                        m.head = Some(vid);
                        m.head_seq = idx as u64 + 1;
                        t.approved += 1;
                    } else {
                        m.versions[idx].2 = VersionState::Rejected;
                        t.rejected += 1;
                    }
                }
                Err("STALE_BASE") => t.stale += 1,
                Err(_) => t.already += 1,
            }
        }
        check_store(s, &blocks, &model, &mut seen).map_err(|e| ctx(&e))?;
    }
    Ok(())
}

fn manifest(rng: &mut StdRng, block: Uuid, base: Option<Uuid>, pool: &[(BlobKey, u64)]) -> PackManifest {
    let n = rng.random_range(0..=pool.len());
    PackManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        block_id: block,
        base_version: base,
        assets: pool[..n]
            .iter()
            .enumerate()
            .map(|(i, (key, size))| AssetEntry {
                asset_id: format!("a{i}"),
                kind: AssetKind::ALL[i % AssetKind::ALL.len()],
                path: format!("dir{}/file{i}.bin", rng.random_range(0..3)),
                content_hash: key.clone(),
                size_bytes: *size,
            })
            .collect(),
    }
}

fn check_store(
    s: &sigil_core::Sigil,
    blocks: &[Uuid],
    model: &[ModelBlock],
    seen: &mut [Vec<BlockVersion>],
) -> Result<(), String> {
    for (b, id) in blocks.iter().enumerate() {
        let history = s.history(*id).map_err(|e| e.to_string())?;
        let prev = &seen[b];
        ensure!(history.len() >= prev.len(), "history of block {b} shrank");
        for (old, new) in prev.iter().zip(&history) {
            let same_identity = old.version_id == new.version_id
                && old.seq == new.seq
                && old.base_version == new.base_version
                && old.manifest == new.manifest;
            ensure!(same_identity, "history entry seq {} of block {b} was rewritten", old.seq);
            let legal = old.state == new.state || old.state == VersionState::Pending;
            ensure!(legal, "seq {} of block {b} left terminal state {}", old.seq, old.state);
        }
        for (i, v) in history.iter().enumerate() {
            ensure!(v.seq == i as u64 + 1, "block {b} history has seq {} at position {i}", v.seq);
            ensure!(v.state == model[b].versions[i].2, "block {b} seq {} state differs from model", v.seq);
        }

        let head = s.head(*id).map_err(|e| e.to_string())?;
        let head_seq = head.as_ref().map_or(0, |h| h.seq);
        let prev_head = prev
            .iter()
            .filter(|v| v.state == VersionState::Approved)
            .map(|v| v.seq)
            .max()
            .unwrap_or(0);
        ensure!(head.as_ref().map(|h| h.version_id) == model[b].head, "block {b} head differs from model");
        ensure!(head_seq == model[b].head_seq, "block {b} head seq {head_seq} != model {}", model[b].head_seq);
        ensure!(head_seq >= prev_head, "block {b} head seq went back from {prev_head} to {head_seq}");
        // Every approval that ever happened must be strictly below the head.
        let approved: Vec<u64> = history
            .iter()
            .filter(|v| v.state == VersionState::Approved)
            .map(|v| v.seq)
            .collect();
        ensure!(approved.windows(2).all(|w| w[0] < w[1]), "approved seqs not increasing");
        ensure!(approved.last().copied().unwrap_or(0) == head_seq, "head is not the latest approval");
        seen[b] = history;
    }
    Ok(())
}
