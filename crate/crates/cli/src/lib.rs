//! Command-line client: log in, lock a block, check it out into a local
//! workspace, push edits, moderate, and keep a synced mirror.
//!
//! Exit codes: 0 success, 2 auth/permission, 3 transport, 4 lock conflict,
//! 5 validation, 64 usage, 1 anything else.

pub mod client;
pub mod commands;
pub mod credentials;
pub mod error;
pub mod fsutil;
pub mod mirror;
pub mod transfer;
pub mod workspace;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sigil_core::AssetKind;
use uuid::Uuid;

use crate::error::{exit, CliError};

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8640";

#[derive(Parser, Debug)]
#[command(name = "sigil", version, about = "Client for the sigil content versioning service")]
pub struct Cli {
    /// Server base URL. Defaults to the workspace's server, the only server
    /// with stored credentials, or http://127.0.0.1:8640.
    #[arg(long, global = true, env = "SIGIL_SERVER")]
    pub server: Option<String>,

    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Where credentials are kept.
    #[arg(long, global = true, env = "SIGIL_CONFIG_DIR")]
    pub config_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Authenticate and store a session token.
    Login {
        username: String,
        /// Password; read from SIGIL_PASSWORD or one line of stdin if absent.
        #[arg(long, env = "SIGIL_PASSWORD", hide_env_values = true)]
        password: Option<String>,
    },
    /// End the session and forget its token.
    Logout,
    /// List or create blocks.
    Blocks {
        #[command(subcommand)]
        action: Option<BlocksCmd>,
    },
    /// List, create or place maps.
    Maps {
        #[command(subcommand)]
        action: Option<MapsCmd>,
    },
    /// Manage block locks directly.
    Lock {
        #[command(subcommand)]
        action: LockCmd,
    },
    /// Lock a block and download it into an empty directory.
    Checkout {
        block: Uuid,
        directory: PathBuf,
        /// Lock lifetime in seconds.
        #[arg(long)]
        ttl: Option<u64>,
    },
    /// Upload the workspace as a new pending version.
    Push {
        #[arg(default_value = ".")]
        directory: PathBuf,
        #[arg(short, long)]
        message: Option<String>,
        /// Kind of a new file, as PATH=KIND. Repeatable.
        #[arg(long = "kind", value_parser = parse_kind)]
        kinds: Vec<(String, AssetKind)>,
    },
    /// Release the workspace's lock.
    Release {
        #[arg(default_value = ".")]
        directory: PathBuf,
    },
    /// Download every approved head into a mirror directory.
    Sync {
        #[arg(default_value = ".")]
        directory: PathBuf,
    },
    /// Moderate pending versions (administrators).
    Review {
        #[command(subcommand)]
        action: ReviewCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum BlocksCmd {
    List,
    Create { name: String },
    /// Version history of a block.
    History { block: Uuid },
}

#[derive(Subcommand, Debug)]
pub enum MapsCmd {
    List,
    Create { name: String },
    History { map: Uuid },
    /// Submit a map version from a JSON file holding a placement array.
    Submit { map: Uuid, placements: PathBuf },
}

#[derive(Subcommand, Debug)]
pub enum LockCmd {
    Acquire {
        block: Uuid,
        #[arg(long)]
        ttl: Option<u64>,
    },
    Renew(LockTarget),
    Release(LockTarget),
    Status { block: Uuid },
}

#[derive(Args, Debug)]
pub struct LockTarget {
    pub block: Uuid,
    /// Defaults to the block's current lock.
    #[arg(long)]
    pub lock_id: Option<Uuid>,
}

#[derive(Subcommand, Debug)]
pub enum ReviewCmd {
    List,
    Approve {
        version: Uuid,
        #[arg(long)]
        reason: Option<String>,
    },
    Reject {
        version: Uuid,
        #[arg(long)]
        reason: String,
    },
}

fn parse_kind(s: &str) -> Result<(String, AssetKind), String> {
    let (path, kind) = s.split_once('=').ok_or("expected PATH=KIND")?;
    let kind = kind.parse::<AssetKind>().map_err(|e| e.to_string())?;
    Ok((path.to_string(), kind))
}

/// What a command prints: `text` normally, `json` under `--json`.
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
    /// Printed to stderr in text mode.
    pub warning: Option<String>,
}

impl Output {
    pub fn new(text: impl Into<String>, json: serde_json::Value) -> Self {
        Output {
            text: text.into(),
            json,
            warning: None,
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
            } else {
                let _ = write!(stdout, "{rendered}");
            }
            return code;
        }
    };
    let json = cli.json;
    match commands::execute(cli) {
        Ok(out) => {
            if json {
                let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&out.json).unwrap_or_default());
            } else {
                if let Some(w) = &out.warning {
                    let _ = writeln!(stderr, "warning: {w}");
                }
                if !out.text.is_empty() {
                    let _ = writeln!(stdout, "{}", out.text.trim_end());
                }
            }
            exit::OK
        }
        Err(e) => report(&e, json, stdout, stderr),
    }
}

fn report(e: &CliError, json: bool, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8 {
    if json {
        let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&e.to_json()).unwrap_or_default());
    } else {
        let _ = writeln!(stderr, "error: {e}");
    }
    e.exit_code()
}
