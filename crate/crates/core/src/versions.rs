//! Version submission, moderation, head tracking, history and sync.
//!
//! Each block and map has a linear history. A submission appends a pending
//! version whose `seq` is assigned at the commit point. An administrator's
//! approval moves the head; rejection leaves it alone. Nothing is ever
//! removed from history.
//!
//! A block submission names the head it was based on. That base is checked
//! twice, at submission and again at approval, because a version can sit
//! pending while another one is approved ahead of it.

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::auth::{require, PermissionAction};
use crate::domain::{
    validate_placement, BlockVersion, ClientState, MapDelta, MapVersion, PackManifest, Placement,
    SyncDelta, SyncResponse, UserAccount, VersionRecord, VersionState,
};
use crate::error::{Error, Result};
use crate::failpoint::CrashPoint;
use crate::locks::check_submit_lock;
use crate::state::Mutation;
use crate::validate::{parse_manifest, validate_presence, ManifestDocument, Violation};
use crate::Sigil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Reject,
}

impl Sigil {
    /// Submits new content for a locked block. The manifest arrives as an
    /// untrusted document; every structural and presence problem is
    /// reported together as `VALIDATION_FAILED`.
    pub fn submit_block_version(
        &self,
        actor: &UserAccount,
        block_id: Uuid,
        doc: &ManifestDocument,
        lock_id: Uuid,
        message: Option<String>,
    ) -> Result<BlockVersion> {
        require(actor, PermissionAction::SubmitBlockVersion)?;
        let now = self.clock.now();
        self.read(|s| {
            if !s.blocks.contains_key(&block_id) {
                return Err(Error::unknown_block(block_id));
            }
            check_submit_lock(s, lock_id, block_id, actor.user_id, now)
        })?;

        let manifest = parse_manifest(doc, block_id).map_err(Error::ValidationFailed)?;
        let missing = validate_presence(&manifest, &self.blobs);
        if !missing.is_empty() {
            return Err(Error::ValidationFailed(missing));
        }

        self.write(|state, now| {
            let entry = state
                .blocks
                .get(&block_id)
                .ok_or_else(|| Error::unknown_block(block_id))?;
            check_submit_lock(state, lock_id, block_id, actor.user_id, now)?;
            let head = entry.record.head_version;
            if manifest.base_version != head {
                return Err(Error::StaleBase {
                    base: manifest.base_version,
                    head,
                });
            }
            let version = BlockVersion {
                version_id: Uuid::new_v4(),
                block_id,
                seq: entry.versions.len() as u64 + 1,
                base_version: manifest.base_version,
                manifest: manifest.clone(),
                state: VersionState::Pending,
                author: actor.user_id,
                submitted_at: now,
                decided_by: None,
                decided_at: None,
                reason: None,
                message: message.clone(),
            };
            Ok((Some(Mutation::AppendBlockVersion(version.clone())), version))
        })
    }

    /// Convenience wrapper for already typed manifests.
    pub fn submit_manifest(
        &self,
        actor: &UserAccount,
        manifest: &PackManifest,
        lock_id: Uuid,
    ) -> Result<BlockVersion> {
        self.submit_block_version(
            actor,
            manifest.block_id,
            &ManifestDocument::from(manifest),
            lock_id,
            None,
        )
    }

    pub fn submit_map_version(
        &self,
        actor: &UserAccount,
        map_id: Uuid,
        placements: Vec<Placement>,
    ) -> Result<MapVersion> {
        require(actor, PermissionAction::SubmitMapVersion)?;
        self.write(|state, now| {
            let entry = state
                .maps
                .get(&map_id)
                .ok_or_else(|| Error::UnknownMap(map_id.to_string()))?;
            if let Some((i, p)) = placements
                .iter()
                .enumerate()
                .find(|(_, p)| !state.blocks.contains_key(&p.block_id))
            {
                return Err(Error::UnknownBlock {
                    block_id: p.block_id.to_string(),
                    placement_index: Some(i),
                });
            }
            let violations: Vec<Violation> = placements
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    validate_placement(p).into_iter().map(move |v| Violation {
                        code: v.into(),
                        detail: format!("placement {i}: {v:?}"),
                        locus: Some(format!("placements[{i}]")),
                    })
                })
                .collect();
            if !violations.is_empty() {
                return Err(Error::ValidationFailed(violations));
            }
            let version = MapVersion {
                version_id: Uuid::new_v4(),
                map_id,
                seq: entry.versions.len() as u64 + 1,
                placements: placements.clone(),
                state: VersionState::Pending,
                author: actor.user_id,
                submitted_at: now,
                decided_by: None,
                decided_at: None,
                reason: None,
            };
            Ok((Some(Mutation::AppendMapVersion(version.clone())), version))
        })
    }

    /// Approves or rejects a pending block or map version.
    pub fn decide_version(
        &self,
        actor: &UserAccount,
        version_id: Uuid,
        verdict: Verdict,
        reason: Option<String>,
    ) -> Result<VersionRecord> {
        require(actor, PermissionAction::DecideVersion)?;
        let decided = self.write(|state, now| {
            let record = state
                .versions
                .get(&version_id)
                .ok_or_else(|| Error::UnknownVersion(version_id.to_string()))?;
            if record.state().is_terminal() {
                return Err(Error::AlreadyDecided(version_id));
            }
            let new_state = match verdict {
                Verdict::Approve => VersionState::Approved,
                Verdict::Reject => VersionState::Rejected,
            };
            if verdict == Verdict::Approve {
                match record {
                    VersionRecord::Block(v) => {
                        let head = state.blocks[&v.block_id].record.head_version;
                        if v.base_version != head {
                            return Err(Error::StaleBase {
                                base: v.base_version,
                                head,
                            });
                        }
                        let missing = validate_presence(&v.manifest, &self.blobs);
                        if !missing.is_empty() {
                            return Err(Error::ValidationFailed(missing));
                        }
                    }
                    VersionRecord::Map(v) => {
                        // Maps carry no base; keep heads monotone instead.
                        let head = state.maps[&v.map_id].record.head_version;
                        let head_seq = head.and_then(|h| state.map_version(&h)).map_or(0, |h| h.seq);
                        if v.seq <= head_seq {
                            return Err(Error::StaleBase {
                                base: None,
                                head,
                            });
                        }
                    }
                }
            }
            let mut updated = record.clone();
            match &mut updated {
                VersionRecord::Block(v) => {
                    v.state = new_state;
                    v.decided_by = Some(actor.user_id);
                    v.decided_at = Some(now);
                    v.reason = reason.clone();
                }
                VersionRecord::Map(v) => {
                    v.state = new_state;
                    v.decided_by = Some(actor.user_id);
                    v.decided_at = Some(now);
                    v.reason = reason.clone();
                }
            }
            let m = Mutation::Decide {
                version_id,
                state: new_state,
                decided_by: actor.user_id,
                decided_at: now,
                reason: reason.clone(),
            };
            Ok((Some(m), updated))
        })?;
        if verdict == Verdict::Approve {
            self.failpoints.check(CrashPoint::AfterApprove);
        }
        Ok(decided)
    }

    pub fn get_version(&self, version_id: Uuid) -> Result<VersionRecord> {
        self.read(|s| s.versions.get(&version_id).cloned())
            .ok_or_else(|| Error::UnknownVersion(version_id.to_string()))
    }

    /// The approved head of a block, if anything was ever approved.
    pub fn head(&self, block_id: Uuid) -> Result<Option<BlockVersion>> {
        self.read(|s| {
            let entry = s.blocks.get(&block_id).ok_or_else(|| Error::unknown_block(block_id))?;
            Ok(entry
                .record
                .head_version
                .and_then(|h| s.block_version(&h).cloned()))
        })
    }

    /// All versions of a block in ascending seq order.
    pub fn history(&self, block_id: Uuid) -> Result<Vec<BlockVersion>> {
        self.read(|s| {
            let entry = s.blocks.get(&block_id).ok_or_else(|| Error::unknown_block(block_id))?;
            Ok(entry
                .versions
                .iter()
                .filter_map(|v| s.block_version(v).cloned())
                .collect())
        })
    }

    pub fn map_head(&self, map_id: Uuid) -> Result<Option<MapVersion>> {
        self.read(|s| {
            let entry = s
                .maps
                .get(&map_id)
                .ok_or_else(|| Error::UnknownMap(map_id.to_string()))?;
            Ok(entry.record.head_version.and_then(|h| s.map_version(&h).cloned()))
        })
    }

    pub fn map_history(&self, map_id: Uuid) -> Result<Vec<MapVersion>> {
        self.read(|s| {
            let entry = s
                .maps
                .get(&map_id)
                .ok_or_else(|| Error::UnknownMap(map_id.to_string()))?;
            Ok(entry
                .versions
                .iter()
                .filter_map(|v| s.map_version(v).cloned())
                .collect())
        })
    }

    /// Pending block and map versions, oldest first.
    pub fn pending_versions(&self, actor: &UserAccount) -> Result<Vec<VersionRecord>> {
        require(actor, PermissionAction::DecideVersion)?;
        Ok(self.read(|s| {
            let mut out: Vec<VersionRecord> = s
                .versions
                .values()
                .filter(|v| v.state() == VersionState::Pending)
                .cloned()
                .collect();
            out.sort_by(|a, b| {
                a.submitted_at()
                    .cmp(&b.submitted_at())
                    .then(a.target_id().cmp(&b.target_id()))
                    .then(a.seq().cmp(&b.seq()))
            });
            out.truncate(crate::LIST_CAP);
            out
        }))
    }

    /// What a client must download to match every current head. Computed
    /// from one consistent snapshot.
    pub fn compute_sync(&self, client: &ClientState) -> SyncResponse {
        self.read(|s| {
            let mut out = SyncResponse::default();
            for (id, entry) in &s.blocks {
                let Some(head) = entry.record.head_version else {
                    continue;
                };
                let old = client.blocks.get(id).copied();
                if old == Some(head) {
                    continue;
                }
                let manifest = s
                    .block_version(&head)
                    .expect("head refers to a stored version")
                    .manifest
                    .clone();
                out.deltas.push(SyncDelta {
                    block_id: *id,
                    old_version: old,
                    new_version: head,
                    manifest,
                });
            }
            for (id, entry) in &s.maps {
                let Some(head) = entry.record.head_version else {
                    continue;
                };
                let old = client.maps.get(id).copied();
                if old == Some(head) {
                    continue;
                }
                let placements = s
                    .map_version(&head)
                    .expect("head refers to a stored version")
                    .placements
                    .clone();
                out.map_deltas.push(MapDelta {
                    map_id: *id,
                    old_version: old,
                    new_version: head,
                    placements,
                });
            }
            out.unknown_ids = client
                .blocks
                .keys()
                .filter(|id| !s.blocks.contains_key(id))
                .chain(client.maps.keys().filter(|id| !s.maps.contains_key(id)))
                .copied()
                .collect();
            out
        })
    }
}
