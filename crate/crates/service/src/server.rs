use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::Router;
use cellvista_discover::{DiscoverClient, DiscoverConfig};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::api::{router, AppState};
use crate::error::ServeError;

pub const DEFAULT_PORT: u16 = 8040;
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub discover: DiscoverConfig,
    /// Built viewer bundle, served at `/` when set.
    pub static_dir: Option<PathBuf>,
}

impl ServeConfig {
    /// Local defaults with the listing cache under the data directory.
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        ServeConfig {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            discover: DiscoverConfig::new(data_dir.join(CACHE_DIR)),
            data_dir,
            static_dir: None,
        }
    }
}

/// A bound but not yet running server. No stores are opened until a
/// request needs one.
pub struct Server {
    listener: TcpListener,
    app: Router,
    addr: SocketAddr,
}

fn check_writable(dir: &std::path::Path) -> Result<(), ServeError> {
    let unwritable = |source| ServeError::DataDirUnwritable {
        path: dir.to_path_buf(),
        source,
    };
    if !dir.is_dir() {
        return Err(unwritable(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "not a directory",
        )));
    }
    let probe = dir.join(format!(".write-probe-{}", std::process::id()));
    std::fs::write(&probe, b"").map_err(unwritable)?;
    let _ = std::fs::remove_file(&probe);
    Ok(())
}

impl Server {
    pub async fn bind(config: ServeConfig) -> Result<Server, ServeError> {
        check_writable(&config.data_dir)?;
        let listener = TcpListener::bind((config.host.as_str(), config.port))
            .await
            .map_err(|source| {
                if source.kind() == std::io::ErrorKind::AddrInUse {
                    ServeError::PortInUse {
                        host: config.host.clone(),
                        port: config.port,
                    }
                } else {
                    ServeError::Bind {
                        host: config.host.clone(),
                        port: config.port,
                        source,
                    }
                }
            })?;
        let addr = listener.local_addr().map_err(|source| ServeError::Bind {
            host: config.host.clone(),
            port: config.port,
            source,
        })?;
        let discover = DiscoverClient::new(config.discover)?;
        let state = Arc::new(AppState::new(config.data_dir, discover));
        let mut app = router(state);
        if let Some(dir) = config.static_dir {
            app = app.fallback_service(ServeDir::new(dir));
        }
        Ok(Server {
            listener,
            app,
            addr,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn run(self) -> std::io::Result<()> {
        axum::serve(self.listener, self.app).await
    }

    /// Runs in the background until the returned handle is dropped.
    pub fn spawn(self) -> RunningServer {
        let (tx, rx) = oneshot::channel::<()>();
        let addr = self.addr;
        let task = tokio::spawn(async move {
            axum::serve(self.listener, self.app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        });
        RunningServer {
            addr,
            shutdown: Some(tx),
            task,
        }
    }
}

pub struct RunningServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        (&mut self.task).await.unwrap_or(Ok(()))
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
