#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sigil_core::{Config, Durability};
use sigil_server::{RunningServer, ServerOptions};
use tempfile::TempDir;

pub const PASSWORD: &str = "correct-horse";

pub fn server_options(dir: &Path) -> ServerOptions {
    let mut core = Config::new(dir);
    core.password_iterations = 1;
    core.durability = Durability::Buffered;
    let mut opts = ServerOptions::new(core);
    opts.bind = "127.0.0.1:0".parse().unwrap();
    opts.bootstrap_admin = Some(("root".into(), PASSWORD.into()));
    opts
}

/// A live server plus one config directory per simulated person.
pub struct World {
    pub data: TempDir,
    pub home: TempDir,
    pub server: RunningServer,
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", self.stdout))
    }
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Run {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

impl World {
    pub fn start() -> Self {
        Self::start_with(|_| {})
    }

    pub fn start_with(tweak: impl FnOnce(&mut ServerOptions)) -> Self {
        let data = tempfile::tempdir().unwrap();
        let mut opts = server_options(data.path());
        tweak(&mut opts);
        let server = sigil_server::spawn(opts).unwrap();
        World {
            data,
            home: tempfile::tempdir().unwrap(),
            server,
        }
    }

    pub fn url(&self) -> String {
        self.server.base_url()
    }

    pub fn config_dir(&self, who: &str) -> PathBuf {
        self.home.path().join(who)
    }

    /// Runs the `sigil` binary as `who`.
    pub fn sigil(&self, who: &str, args: &[&str]) -> Run {
        Command::new(env!("CARGO_BIN_EXE_sigil"))
            .arg("--server")
            .arg(self.url())
            .arg("--config-dir")
            .arg(self.config_dir(who))
            .args(args)
            .env_remove("SIGIL_SERVER")
            .env_remove("SIGIL_CONFIG_DIR")
            .env_remove("SIGIL_PASSWORD")
            .output()
            .expect("run sigil")
            .into()
    }

    pub fn ok(&self, who: &str, args: &[&str]) -> Run {
        let r = self.sigil(who, args);
        assert_eq!(r.code, 0, "sigil {args:?} failed: {}{}", r.stdout, r.stderr);
        r
    }

    pub fn login(&self, who: &str) {
        self.ok(who, &["login", who, "--password", PASSWORD]);
    }

    /// Creates an account via the admin and logs it in.
    pub fn person(&self, who: &str, role: &str) {
        let sigil = &self.server.state.sigil;
        let admin = sigil.authenticate(&sigil.login("root", PASSWORD).unwrap().token).unwrap();
        sigil
            .register_user(&admin, who, PASSWORD, role.parse().unwrap())
            .unwrap();
        self.login(who);
    }

    pub fn create_block(&self, name: &str) -> String {
        self.login("root");
        let r = self.ok("root", &["--json", "blocks", "create", name]);
        r.json()["block_id"].as_str().unwrap().to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    sigil_core::BlobKey::of(bytes).as_str().to_string()
}
