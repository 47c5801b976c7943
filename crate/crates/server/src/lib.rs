//! HTTP/JSON front end for a [`sigil_core::Sigil`] store.
//!
//! All endpoints live under `/api/v1`. Errors use one envelope:
//! `{"error": {"code": "...", "message": "...", ...}}`.

pub mod api;
pub mod error;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use sigil_core::{Config, Sigil};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub use crate::api::AppState;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub core: Config,
    pub bind: SocketAddr,
    /// `(username, password)` for the first administrator; ignored once any
    /// account exists.
    pub bootstrap_admin: Option<(String, String)>,
    /// How often expired locks and sessions are dropped from storage.
    pub sweep_interval: Duration,
}

impl ServerOptions {
    pub fn new(core: Config) -> Self {
        ServerOptions {
            core,
            bind: SocketAddr::from(([127, 0, 0, 1], 8640)),
            bootstrap_admin: None,
            sweep_interval: Duration::from_secs(60),
        }
    }
}

/// Opens the store and creates the bootstrap administrator if needed.
pub fn open_state(opts: &ServerOptions) -> sigil_core::Result<Arc<AppState>> {
    let sigil = Sigil::open(opts.core.clone())?;
    if let Some((user, pass)) = &opts.bootstrap_admin {
        if let Some(admin) = sigil.bootstrap_admin(user, pass)? {
            tracing::info!(username = %admin.username, "created bootstrap administrator");
        }
    }
    Ok(Arc::new(AppState { sigil }))
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    sweep_interval: Duration,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = tokio::spawn(sweep_loop(state.clone(), sweep_interval));
    let app = api::router(state);
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

async fn sweep_loop(state: Arc<AppState>, every: Duration) {
    let mut tick = tokio::time::interval(every);
    tick.tick().await;
    loop {
        tick.tick().await;
        let s = state.clone();
        match tokio::task::spawn_blocking(move || s.sigil.sweep_expired()).await {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => tracing::warn!(error = %e, "sweep failed"),
            Err(e) => tracing::warn!(error = %e, "sweep task failed"),
        }
    }
}

/// A server running on its own runtime thread.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl RunningServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting, waits for in-flight requests and releases the data
    /// directory.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Starts a server in the background. Binding to port 0 picks a free port;
/// the chosen address is in [`RunningServer::addr`].
pub fn spawn(opts: ServerOptions) -> std::io::Result<RunningServer> {
    let state = open_state(&opts).map_err(std::io::Error::other)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let listener = runtime.block_on(TcpListener::bind(opts.bind))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let served = state.clone();
    let interval = opts.sweep_interval;
    let thread = std::thread::Builder::new()
        .name("sigil-server".into())
        .spawn(move || {
            let result = runtime.block_on(serve(served, listener, interval, async {
                let _ = rx.await;
            }));
            runtime.shutdown_timeout(Duration::from_secs(5));
            result
        })?;
    Ok(RunningServer {
        addr,
        state,
        stop: Some(tx),
        thread: Some(thread),
    })
}
