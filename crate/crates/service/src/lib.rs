//! HTTP inference service and command line for guided image completion.

pub mod api;
pub mod cli;
pub mod config;
pub mod openapi;
pub mod registry;

pub use api::{router, AppState, ApiError};
pub use config::ServiceConfig;
pub use registry::{LoadedModel, Registry};
