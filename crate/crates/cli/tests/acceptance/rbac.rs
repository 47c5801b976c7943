//! Every endpoint requested by every role and without a token. Each cell
//! gets fresh fixtures arranged so that the request would succeed if the
//! caller is allowed, so the only thing that can vary is authorization.
//! Expected: 401 without a token (except login), 403 when the role lacks
//! the permission, the endpoint's success code otherwise.

use serde_json::{json, Value};
use sigil_core::{BlobKey, PackManifest, Role, Sigil, UserAccount};
use uuid::Uuid;

use crate::common::{World, PASSWORD};
use crate::support::{ensure, Http};

#[derive(Clone, Copy, PartialEq, Debug)]
enum Who {
    Anonymous,
    Visitor,
    Editor,
    Admin,
}

const COLUMNS: [Who; 4] = [Who::Anonymous, Who::Visitor, Who::Editor, Who::Admin];

/// Least privileged caller an endpoint admits.
#[derive(Clone, Copy)]
enum Min {
    Public,
    Any,
    Editor,
    Admin,
}

struct Req {
    method: &'static str,
    path: String,
    body: Option<Vec<u8>>,
}

struct Cell<'a> {
    w: &'a World,
    admin: &'a UserAccount,
    editor: &'a UserAccount,
    /// The account making the request, if any.
    caller: Option<&'a UserAccount>,
    who: Who,
}

impl Cell<'_> {
    fn sigil(&self) -> &Sigil {
        &self.w.server.state.sigil
    }

    fn block(&self) -> Uuid {
        self.sigil().create_block(self.admin, &format!("b-{}", &Uuid::new_v4().to_string()[..8])).unwrap().block_id
    }

    /// Someone who may hold locks: the caller if it can, else the editor.
    fn locker(&self) -> &UserAccount {
        match self.who {
            Who::Editor | Who::Admin => self.caller.unwrap(),
            _ => self.editor,
        }
    }

    fn locked_block(&self) -> (Uuid, Uuid) {
        let b = self.block();
        let lock = self.sigil().acquire_lock(self.locker(), b, None).unwrap();
        (b, lock.lock_id)
    }

    fn pending_version(&self) -> Uuid {
        let b = self.block();
        let lock = self.sigil().acquire_lock(self.editor, b, None).unwrap();
        let v = self.sigil().submit_manifest(self.editor, &PackManifest::empty(b, None), lock.lock_id).unwrap();
        v.version_id
    }

    fn map(&self) -> Uuid {
        self.sigil().create_map(self.admin, &format!("m-{}", &Uuid::new_v4().to_string()[..8])).unwrap().map_id
    }

    fn blob(&self) -> (BlobKey, Vec<u8>) {
        let bytes = Uuid::new_v4().as_bytes().to_vec();
        (BlobKey::of(&bytes), bytes)
    }
}

fn body(v: Value) -> Option<Vec<u8>> {
    Some(serde_json::to_vec(&v).unwrap())
}

fn req(method: &'static str, path: String, body: Option<Vec<u8>>) -> Req {
    Req { method, path, body }
}

type Endpoint = (&'static str, Min, u16, fn(&Cell) -> Req);

const ENDPOINTS: &[Endpoint] = &[
    ("POST /auth/login", Min::Public, 200, |c| {
        let username = match c.caller {
            Some(u) => u.username.clone(),
            None => "root".into(),
        };
        req("POST", "/auth/login".into(), body(json!({ "username": username, "password": PASSWORD })))
    }),
    ("POST /auth/logout", Min::Any, 204, |_| req("POST", "/auth/logout".into(), None)),
    ("POST /users", Min::Admin, 201, |_| {
        let name = format!("u{}", &Uuid::new_v4().simple().to_string()[..12]);
        req("POST", "/users".into(), body(json!({ "username": name, "password": "long-enough", "role": "visitor" })))
    }),
    ("GET /users", Min::Admin, 200, |_| req("GET", "/users".into(), None)),
    ("GET /maps", Min::Any, 200, |_| req("GET", "/maps".into(), None)),
    ("POST /maps", Min::Admin, 201, |_| req("POST", "/maps".into(), body(json!({ "name": "harbour" })))),
    ("GET /maps/{id}/head", Min::Any, 200, |c| req("GET", format!("/maps/{}/head", c.map()), None)),
    ("GET /maps/{id}/versions", Min::Any, 200, |c| req("GET", format!("/maps/{}/versions", c.map()), None)),
    ("POST /maps/{id}/versions", Min::Admin, 201, |c| {
        let placement = sigil_core::Placement::identity(c.block());
        req("POST", format!("/maps/{}/versions", c.map()), body(json!({ "placements": [placement] })))
    }),
    ("GET /blocks", Min::Any, 200, |_| req("GET", "/blocks".into(), None)),
    ("POST /blocks", Min::Admin, 201, |_| req("POST", "/blocks".into(), body(json!({ "name": "tower" })))),
    ("GET /blocks/{id}/head", Min::Any, 200, |c| req("GET", format!("/blocks/{}/head", c.block()), None)),
    ("GET /blocks/{id}/versions", Min::Any, 200, |c| req("GET", format!("/blocks/{}/versions", c.block()), None)),
    ("POST /blocks/{id}/lock", Min::Editor, 200, |c| {
        req("POST", format!("/blocks/{}/lock", c.block()), body(json!({ "ttl_seconds": 600 })))
    }),
    ("POST /blocks/{id}/lock/renew", Min::Editor, 200, |c| {
        let (b, lock) = c.locked_block();
        req("POST", format!("/blocks/{b}/lock/renew"), body(json!({ "lock_id": lock })))
    }),
    ("DELETE /blocks/{id}/lock", Min::Editor, 204, |c| {
        // Administrators break someone else's lock; editors release their own.
        let b = c.block();
        let holder = if c.who == Who::Admin { c.editor } else { c.locker() };
        let lock = c.sigil().acquire_lock(holder, b, None).unwrap();
        req("DELETE", format!("/blocks/{b}/lock?lock_id={}", lock.lock_id), None)
    }),
    ("GET /blocks/{id}/editproject", Min::Editor, 200, |c| {
        let (b, _) = c.locked_block();
        req("GET", format!("/blocks/{b}/editproject"), None)
    }),
    ("POST /blocks/{id}/versions", Min::Editor, 201, |c| {
        let (b, lock) = c.locked_block();
        let manifest = PackManifest::empty(b, None);
        req("POST", format!("/blocks/{b}/versions"), body(json!({ "lock_id": lock, "manifest": manifest })))
    }),
    ("GET /review/pending", Min::Admin, 200, |_| req("GET", "/review/pending".into(), None)),
    ("POST /versions/{id}/approve", Min::Admin, 200, |c| {
        req("POST", format!("/versions/{}/approve", c.pending_version()), None)
    }),
    ("POST /versions/{id}/reject", Min::Admin, 200, |c| {
        req("POST", format!("/versions/{}/reject", c.pending_version()), body(json!({ "reason": "not yet" })))
    }),
    ("PUT /blobs/{sha256}", Min::Editor, 201, |c| {
        let (key, bytes) = c.blob();
        req("PUT", format!("/blobs/{}", key.as_str()), Some(bytes))
    }),
    ("GET /blobs/{sha256}", Min::Any, 200, |c| {
        let (key, bytes) = c.blob();
        c.sigil().put_blob(c.editor, &key, &bytes).unwrap();
        req("GET", format!("/blobs/{}", key.as_str()), None)
    }),
    ("HEAD /blobs/{sha256}", Min::Any, 200, |c| {
        let (key, bytes) = c.blob();
        c.sigil().put_blob(c.editor, &key, &bytes).unwrap();
        req("HEAD", format!("/blobs/{}", key.as_str()), None)
    }),
    ("POST /sync", Min::Any, 200, |_| req("POST", "/sync".into(), body(json!({ "blocks": {}, "maps": {} })))),
];

fn expected(min: Min, who: Who, success: u16) -> u16 {
    let rank = |w: Who| match w {
        Who::Anonymous => 0,
        Who::Visitor => 1,
        Who::Editor => 2,
        Who::Admin => 3,
    };
    let needed = match min {
        Min::Public => return success,
        Min::Any => 1,
        Min::Editor => 2,
        Min::Admin => 3,
    };
    match who {
        Who::Anonymous => 401,
        w if rank(w) < needed => 403,
        _ => success,
    }
}

pub fn run() -> Result<String, String> {
    let w = World::start();
    let sigil = &w.server.state.sigil;
    let admin = sigil.authenticate(&sigil.login("root", PASSWORD).unwrap().token).unwrap();
    let editor = sigil.register_user(&admin, "edna", PASSWORD, Role::Editor).unwrap();
    let visitor = sigil.register_user(&admin, "vera", PASSWORD, Role::Visitor).unwrap();
    let http = Http::new(&format!("{}/api/v1", w.url()));

    let mut deviations = Vec::new();
    let mut cells = 0;
    for (name, min, success, build) in ENDPOINTS {
        for who in COLUMNS {
            let caller = match who {
                Who::Anonymous => None,
                Who::Visitor => Some(&visitor),
                Who::Editor => Some(&editor),
                Who::Admin => Some(&admin),
            };
            // A session per cell so that logout cannot affect later cells.
            let token = caller.map(|u| sigil.login(&u.username, PASSWORD).unwrap().token);
            let cell = Cell { w: &w, admin: &admin, editor: &editor, caller, who };
            let r = build(&cell);
            let reply = http.call(r.method, &r.path, token.as_deref(), r.body.as_deref());
            let want = expected(*min, who, *success);
            cells += 1;
            if reply.status != want {
                deviations.push(format!("{name} as {who:?}: got {} {}, want {want}", reply.status, reply.code()));
            } else if want >= 400 && r.method != "HEAD" {
                let code = reply.code();
                let ok = match want {
                    401 => code == "UNAUTHENTICATED",
                    _ => code == "FORBIDDEN",
                };
                if !ok {
                    deviations.push(format!("{name} as {who:?}: status {want} but code {code:?}"));
                }
            }
        }
    }
    ensure!(deviations.is_empty(), "{} deviation(s): {}", deviations.len(), deviations.join("; "));
    Ok(format!("{} endpoints x 4 callers = {cells} cells, 0 deviations", ENDPOINTS.len()))
}
