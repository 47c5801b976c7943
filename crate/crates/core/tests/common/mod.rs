#![allow(dead_code)]

use std::sync::Arc;

use sigil_core::{
    AssetEntry, AssetKind, BlobKey, Config, Durability, ManualClock, PackManifest, Role, Sigil,
    UserAccount,
};
use uuid::Uuid;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub clock: Arc<ManualClock>,
    pub sigil: Sigil,
    pub admin: UserAccount,
    pub alice: UserAccount,
    pub bob: UserAccount,
    pub visitor: UserAccount,
}

pub fn config(dir: &std::path::Path) -> Config {
    let mut config = Config::new(dir);
    config.durability = Durability::Buffered;
    config.password_iterations = 1;
    config
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::at_epoch();
    let sigil = Sigil::open_with_clock(config(dir.path()), clock.clone()).unwrap();
    let admin = sigil.bootstrap_admin("admin", "adminpass").unwrap().unwrap();
    let alice = sigil.register_user(&admin, "alice", "password1", Role::Editor).unwrap();
    let bob = sigil.register_user(&admin, "bob", "password1", Role::Editor).unwrap();
    let visitor = sigil.register_user(&admin, "vera", "password1", Role::Visitor).unwrap();
    Fixture { dir, clock, sigil, admin, alice, bob, visitor }
}

impl Fixture {
    pub fn block(&self) -> Uuid {
        self.sigil.create_block(&self.admin, "block").unwrap().block_id
    }

    /// Uploads `bytes` and returns the matching manifest entry.
    pub fn asset(&self, id: &str, path: &str, bytes: &[u8]) -> AssetEntry {
        let key = BlobKey::of(bytes);
        self.sigil.put_blob(&self.alice, &key, bytes).unwrap();
        AssetEntry {
            asset_id: id.into(),
            kind: AssetKind::StaticMesh,
            path: path.into(),
            content_hash: key,
            size_bytes: bytes.len() as u64,
        }
    }

    pub fn manifest(&self, block: Uuid, base: Option<Uuid>, content: &str) -> PackManifest {
        let mut m = PackManifest::empty(block, base);
        m.assets.push(self.asset("mesh", "meshes/mesh.bin", content.as_bytes()));
        m
    }
}
