//! The control plane: authoritative task lifecycle, device registry with a TTL
//! cache, the pull-based agent protocol and a server-sent event stream.
//!
//! The service only ever accepts connections. Nothing in this crate opens a
//! connection toward an agent or compute resource.

pub mod api;
pub mod auth;
pub mod config;
pub mod conformance;
pub mod events;
pub mod journal;
pub mod registry;
pub mod store;

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;
use vqpu_core::clock::{Clock, SystemClock};

pub use auth::{ApiKeys, Principal, Role};
pub use config::ServerConfig;
pub use events::EventHub;
pub use registry::DeviceRegistry;
pub use store::TaskStore;

/// Everything a request handler can reach.
pub struct AppState {
    pub config: ServerConfig,
    pub keys: ApiKeys,
    pub events: Arc<EventHub>,
    pub registry: Arc<DeviceRegistry>,
    pub store: Arc<TaskStore>,
}

impl AppState {
    /// Opens the journal, event log and audit log named in `config` (or runs
    /// fully in memory when paths are absent) and restores prior state.
    pub fn open(config: ServerConfig, clock: Arc<dyn Clock>) -> io::Result<Arc<Self>> {
        let keys = match &config.api_keys_file {
            Some(path) => ApiKeys::load(path).map_err(io::Error::other)?,
            None => ApiKeys::development(),
        };
        let events = Arc::new(match &config.event_log_path {
            Some(p) => EventHub::open(clock.clone(), p, config.replay_window, config.subscriber_capacity)?,
            None => EventHub::in_memory(clock.clone()).with_limits(config.replay_window, config.subscriber_capacity),
        });
        let mut registry = DeviceRegistry::new(clock.clone(), events.clone(), config.cache_ttl());
        let mut store = TaskStore::new(clock, events.clone());
        if let Some(path) = &config.store_path {
            let (journal, recovered) = journal::Journal::open(path)?;
            let journal = Arc::new(journal);
            registry = registry.with_journal(journal.clone(), &recovered);
            store = store.with_journal(journal, &recovered);
            let mut audit = path.clone().into_os_string();
            audit.push(".audit");
            store = store.with_audit_log(journal::LineLog::open(std::path::Path::new(&audit))?);
        }
        Ok(Arc::new(Self { config, keys, events, registry: Arc::new(registry), store: Arc::new(store) }))
    }
}

/// Serves `state` on `listener` until `shutdown` resolves.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, api::router(state)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Starts a server in the background, for embedding and tests.
pub fn spawn(config: ServerConfig, clock: Arc<dyn Clock>) -> io::Result<ServerHandle> {
    let state = AppState::open(config.clone(), clock)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
    let listener = runtime.block_on(TcpListener::bind(config.bind_addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let serve_state = state.clone();
    let thread = std::thread::Builder::new().name("vqpu-server".into()).spawn(move || {
        runtime.block_on(async move {
            if let Err(e) = serve(serve_state, listener, async {
                let _ = rx.await;
            })
            .await
            {
                tracing::error!("server stopped: {e}");
            }
        });
        runtime.shutdown_timeout(std::time::Duration::from_secs(1));
    })?;
    Ok(ServerHandle { addr, state, shutdown: Some(tx), thread: Some(thread) })
}

async fn termination() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Process entry point for `vqpu-server`. Returns the exit code.
pub fn main_from_env() -> i32 {
    let config = match ServerConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 2;
        }
    };
    if config.api_keys_file.is_none() {
        eprintln!("VQPU_API_KEYS_FILE not set; using development keys dev-user, dev-agent, dev-admin");
    }
    let state = match AppState::open(config.clone(), Arc::new(SystemClock)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot open state: {e}");
            return 2;
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot start runtime: {e}");
            return 1;
        }
    };
    runtime.block_on(async move {
        let listener = match TcpListener::bind(config.bind_addr).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("cannot bind {}: {e}", config.bind_addr);
                return 1;
            }
        };
        let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
        println!("listening on {addr}");
        use std::io::Write as _;
        let _ = io::stdout().flush();
        match serve(state, listener, termination()).await {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("server error: {e}");
                1
            }
        }
    })
}
