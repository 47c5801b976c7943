use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use sigil_core::{Config, Sigil};
use sigil_server::ServerOptions;
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(name = "sigil-server", version, about = "Content versioning server")]
struct Args {
    /// Directory holding metadata and blobs.
    #[arg(long, env = "SIGIL_DATA_DIR", global = true, default_value = "./sigil-data")]
    data_dir: PathBuf,

    #[arg(long, env = "SIGIL_BIND", default_value = "127.0.0.1:8640")]
    bind: SocketAddr,

    /// USER:PASSWORD of the first administrator, used only on an empty store.
    #[arg(long, env = "SIGIL_BOOTSTRAP_ADMIN")]
    bootstrap_admin: Option<String>,

    /// Largest accepted blob in bytes.
    #[arg(long, env = "SIGIL_MAX_BLOB_SIZE", global = true)]
    max_blob_size: Option<u64>,

    /// Session lifetime in seconds.
    #[arg(long, env = "SIGIL_SESSION_TTL")]
    session_ttl: Option<u64>,

    /// Default lock lifetime in seconds.
    #[arg(long, env = "SIGIL_LOCK_TTL")]
    lock_ttl: Option<u64>,

    /// Upper bound on requested lock lifetimes in seconds.
    #[arg(long, env = "SIGIL_MAX_LOCK_TTL")]
    max_lock_ttl: Option<u64>,

    /// Re-verify blob digests on every read.
    #[arg(long, env = "SIGIL_PARANOID_READS", global = true, action = clap::ArgAction::Set, default_value_t = false)]
    paranoid_reads: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify every stored blob against its digest and exit.
    Scrub,
    /// Delete blobs no version references and exit. Run with the server stopped.
    Gc,
}

fn config(args: &Args) -> Config {
    let mut c = Config::new(&args.data_dir);
    if let Some(v) = args.max_blob_size {
        c.max_blob_size = v;
    }
    if let Some(v) = args.session_ttl {
        c.session_ttl_secs = v;
    }
    if let Some(v) = args.lock_ttl {
        c.lock_ttl_secs = v;
    }
    if let Some(v) = args.max_lock_ttl {
        c.max_lock_ttl_secs = v;
    }
    c.paranoid_reads = args.paranoid_reads;
    c
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SIGIL_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();
    let result = match args.command {
        Some(Command::Scrub) => scrub(&args),
        Some(Command::Gc) => gc(&args),
        None => run(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("sigil-server: {e}");
            ExitCode::FAILURE
        }
    }
}

fn scrub(args: &Args) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let sigil = Sigil::open(config(args))?;
    let report = sigil.blobs().scrub()?;
    println!("checked {} blob(s)", report.checked);
    for key in &report.corrupt {
        println!("corrupt {key}");
    }
    for path in &report.stray {
        println!("stray {}", path.display());
    }
    Ok(if report.corrupt.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn gc(args: &Args) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let sigil = Sigil::open(config(args))?;
    let report = sigil.collect_garbage()?;
    println!("removed {} blob(s), {} byte(s)", report.removed.len(), report.bytes_freed);
    Ok(ExitCode::SUCCESS)
}

fn run(args: &Args) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut opts = ServerOptions::new(config(args));
    opts.bind = args.bind;
    if let Some(spec) = &args.bootstrap_admin {
        let (user, pass) = spec
            .split_once(':')
            .ok_or("--bootstrap-admin expects USER:PASSWORD")?;
        opts.bootstrap_admin = Some((user.to_string(), pass.to_string()));
    }
    let state = sigil_server::open_state(&opts)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = TcpListener::bind(opts.bind).await?;
        tracing::info!(addr = %listener.local_addr()?, data_dir = %args.data_dir.display(), "listening");
        sigil_server::serve(state, listener, Duration::from_secs(60), shutdown_signal()).await
    })?;
    tracing::info!("stopped");
    Ok(ExitCode::SUCCESS)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
