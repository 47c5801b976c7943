//! Session tokens, one per server, in `<config dir>/credentials.json`.
//!
//! The file is written with owner-only permissions and never inside a
//! workspace.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sigil_core::Role;

use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;

pub const FORMAT: u32 = 1;
const FILE_NAME: &str = "credentials.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSession {
    pub token: String,
    pub username: String,
    pub role: Role,
    pub expires_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Credentials {
    pub format: u32,
    /// Keyed by normalized server URL.
    pub servers: BTreeMap<String, StoredSession>,
}

impl Default for Credentials {
    fn default() -> Self {
        Credentials {
            format: FORMAT,
            servers: BTreeMap::new(),
        }
    }
}

/// `$XDG_CONFIG_HOME/sigil`, else `$HOME/.config/sigil`.
pub fn default_config_dir() -> PathBuf {
    if let Some(x) = std::env::var_os("XDG_CONFIG_HOME").filter(|v| !v.is_empty()) {
        return PathBuf::from(x).join("sigil");
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".config").join("sigil")
}

impl Credentials {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(FILE_NAME)
    }

    pub fn load(dir: &Path) -> CliResult<Credentials> {
        let path = Self::path(dir);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Credentials::default()),
            Err(e) => return Err(CliError::io(&path.display().to_string(), e)),
        };
        let creds: Credentials = serde_json::from_str(&text).map_err(|e| {
            CliError::new("BAD_CONFIG", format!("{} is not a credentials file: {e}", path.display()))
        })?;
        if creds.format != FORMAT {
            return Err(CliError::new(
                "BAD_CONFIG",
                format!("{} has unsupported format {}", path.display(), creds.format),
            ));
        }
        Ok(creds)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        let path = Self::path(dir);
        let mut bytes = serde_json::to_vec_pretty(self).expect("credentials serialize");
        bytes.push(b'\n');
        write_atomic(&path, &bytes, true).map_err(|e| CliError::io(&path.display().to_string(), e))
    }

    /// The session for `server`, or the only stored one when `server` is
    /// not given.
    pub fn session_for(&self, server: &str) -> Option<&StoredSession> {
        self.servers.get(server)
    }

    pub fn sole_server(&self) -> Option<&str> {
        match self.servers.len() {
            1 => self.servers.keys().next().map(String::as_str),
            _ => None,
        }
    }
}

/// Reads one line (a password) from stdin without the trailing newline.
pub fn read_password_line() -> CliResult<String> {
    let mut line = String::new();
    std::io::stdout().flush().ok();
    std::io::stdin()
        .read_line(&mut line)
        .map_err(|e| CliError::io("stdin", e))?;
    Ok(line.trim_end_matches(['\r', '\n']).to_string())
}
