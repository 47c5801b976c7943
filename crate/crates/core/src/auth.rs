//! Identity and the three-role permission model.

use base64::engine::general_purpose::{STANDARD_NO_PAD, URL_SAFE_NO_PAD};
use base64::Engine;
use chrono::Duration;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::domain::{validate_username, AccountView, Role, SessionToken, UserAccount};
use crate::error::{Error, Result};
use crate::state::{Mutation, SessionRecord};
use crate::Sigil;

pub const MIN_PASSWORD_LEN: usize = 8;
pub const DEFAULT_PASSWORD_ITERATIONS: u32 = 100_000;
const DIGEST_SCHEME: &str = "pbkdf2-sha256";
const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermissionAction {
    ViewContent,
    LockBlock,
    SubmitBlockVersion,
    CreateBlock,
    CreateMap,
    SubmitMapVersion,
    DecideVersion,
    ManageUsers,
    BreakLock,
}

impl PermissionAction {
    pub const ALL: &'static [PermissionAction] = &[
        PermissionAction::ViewContent,
        PermissionAction::LockBlock,
        PermissionAction::SubmitBlockVersion,
        PermissionAction::CreateBlock,
        PermissionAction::CreateMap,
        PermissionAction::SubmitMapVersion,
        PermissionAction::DecideVersion,
        PermissionAction::ManageUsers,
        PermissionAction::BreakLock,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PermissionAction::ViewContent => "view_content",
            PermissionAction::LockBlock => "lock_block",
            PermissionAction::SubmitBlockVersion => "submit_block_version",
            PermissionAction::CreateBlock => "create_block",
            PermissionAction::CreateMap => "create_map",
            PermissionAction::SubmitMapVersion => "submit_map_version",
            PermissionAction::DecideVersion => "decide_version",
            PermissionAction::ManageUsers => "manage_users",
            PermissionAction::BreakLock => "break_lock",
        }
    }
}

/// Visitors only view; editors also lock and submit block content;
/// administrators may do everything.
pub fn role_permits(role: Role, action: PermissionAction) -> bool {
    use PermissionAction::*;
    match role {
        Role::Visitor => matches!(action, ViewContent),
        Role::Editor => matches!(action, ViewContent | LockBlock | SubmitBlockVersion),
        Role::Administrator => true,
    }
}

pub fn authorize(account: &UserAccount, action: PermissionAction) -> bool {
    role_permits(account.role, action)
}

pub(crate) fn require(account: &UserAccount, action: PermissionAction) -> Result<()> {
    if authorize(account, action) {
        Ok(())
    } else {
        Err(Error::forbidden(account.role, action))
    }
}

/// Self-describing salted digest: `pbkdf2-sha256$<iterations>$<salt>$<hash>`,
/// salt and hash in unpadded standard base64.
pub fn hash_password(password: &str, iterations: u32) -> String {
    let mut salt = [0u8; SALT_LEN];
    rand::rng().fill_bytes(&mut salt);
    let mut out = [0u8; HASH_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut out);
    format!(
        "{DIGEST_SCHEME}${iterations}${}${}",
        STANDARD_NO_PAD.encode(salt),
        STANDARD_NO_PAD.encode(out)
    )
}

pub fn verify_password(password: &str, digest: &str) -> bool {
    let mut parts = digest.split('$');
    let (Some(DIGEST_SCHEME), Some(iter), Some(salt), Some(hash), None) = (
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
    ) else {
        return false;
    };
    let (Ok(iterations), Ok(salt), Ok(expected)) = (
        iter.parse::<u32>(),
        STANDARD_NO_PAD.decode(salt),
        STANDARD_NO_PAD.decode(hash),
    ) else {
        return false;
    };
    let mut out = vec![0u8; expected.len()];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut out);
    constant_time_eq(&out, &expected)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// 256 random bits, base64url without padding (43 chars).
pub fn generate_token() -> String {
    let mut raw = [0u8; 32];
    rand::rng().fill_bytes(&mut raw);
    URL_SAFE_NO_PAD.encode(raw)
}

/// Sessions are stored under the digest of their token, never the token.
pub fn token_digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

impl Sigil {
    /// Creates the first administrator when the store has no accounts.
    /// Returns `None` if accounts already exist.
    pub fn bootstrap_admin(&self, username: &str, password: &str) -> Result<Option<UserAccount>> {
        if !self.read(|s| s.users.is_empty()) {
            return Ok(None);
        }
        let account = self.new_account(username, password, Role::Administrator)?;
        self.write(|state, _| {
            if !state.users.is_empty() {
                return Ok((None, None));
            }
            Ok((Some(Mutation::CreateUser(account.clone())), Some(account)))
        })
    }

    pub fn register_user(
        &self,
        actor: &UserAccount,
        username: &str,
        password: &str,
        role: Role,
    ) -> Result<UserAccount> {
        require(actor, PermissionAction::ManageUsers)?;
        let account = self.new_account(username, password, role)?;
        if self.read(|s| s.usernames.contains_key(username)) {
            return Err(Error::UsernameTaken(username.to_string()));
        }
        // Uniqueness is re-checked at the commit point.
        self.write(|state, _| {
            if state.usernames.contains_key(&account.username) {
                return Err(Error::UsernameTaken(account.username.clone()));
            }
            Ok((Some(Mutation::CreateUser(account.clone())), account))
        })
    }

    fn new_account(&self, username: &str, password: &str, role: Role) -> Result<UserAccount> {
        if !validate_username(username) {
            return Err(Error::InvalidUsername(username.to_string()));
        }
        if password.chars().count() < MIN_PASSWORD_LEN {
            return Err(Error::WeakPassword);
        }
        Ok(UserAccount {
            user_id: Uuid::new_v4(),
            username: username.to_string(),
            password_digest: hash_password(password, self.config.password_iterations),
            role,
            created_at: self.clock.now(),
        })
    }

    pub fn login(&self, username: &str, password: &str) -> Result<SessionToken> {
        let account = self.read(|s| s.account_by_name(username).cloned());
        let ok = match &account {
            Some(a) => verify_password(password, &a.password_digest),
            None => {
                // Burn the same work as a real check so timing does not
                // reveal whether the name exists.
                verify_password(password, &self.dummy_digest);
                false
            }
        };
        let account = match (ok, account) {
            (true, Some(a)) => a,
            _ => return Err(Error::InvalidCredentials),
        };
        let ttl = Duration::seconds(self.config.session_ttl_secs as i64);
        self.write(|state, now| {
            let token = loop {
                let t = generate_token();
                if !state.sessions.contains_key(&token_digest(&t)) {
                    break t;
                }
            };
            let session = SessionToken {
                token: token.clone(),
                user_id: account.user_id,
                issued_at: now,
                expires_at: now + ttl,
            };
            let record = SessionRecord {
                token_digest: token_digest(&token),
                user_id: account.user_id,
                issued_at: now,
                expires_at: session.expires_at,
            };
            Ok((Some(Mutation::CreateSession(record)), session))
        })
    }

    pub fn authenticate(&self, token: &str) -> Result<UserAccount> {
        let now = self.clock.now();
        let digest = token_digest(token);
        self.read(|s| {
            let session = s.sessions.get(&digest).ok_or(Error::Unauthenticated)?;
            if now >= session.expires_at {
                return Err(Error::Unauthenticated);
            }
            s.users.get(&session.user_id).cloned().ok_or(Error::Unauthenticated)
        })
    }

    /// Idempotent: unknown tokens are a successful no-op.
    pub fn logout(&self, token: &str) -> Result<()> {
        let digest = token_digest(token);
        self.write(|state, _| {
            if !state.sessions.contains_key(&digest) {
                return Ok((None, ()));
            }
            Ok((Some(Mutation::DeleteSession { token_digest: digest.clone() }), ()))
        })
    }

    pub fn list_users(&self, actor: &UserAccount) -> Result<Vec<AccountView>> {
        require(actor, PermissionAction::ManageUsers)?;
        Ok(self.read(|s| {
            let mut users: Vec<AccountView> = s.users.values().map(AccountView::from).collect();
            users.sort_by(|a, b| a.username.cmp(&b.username));
            users
        }))
    }
}
