//! HTTP API and pipeline commands for cellvista.

pub mod api;
pub mod error;
pub mod jobs;
pub mod pipeline;
pub mod server;
pub mod session;
pub mod wire;

pub use error::{ApiError, ErrorCode, ServeError};
pub use server::{RunningServer, ServeConfig, Server, DEFAULT_PORT};
