//! HTTP job service for skipforge: submit edits and sweeps, poll their state,
//! fetch images, metrics and CSV results. Every run is persisted so it can be
//! replayed from its stored `request.json`.

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod schema;
pub mod store;

use std::sync::Arc;

use axum::Router;
use tower_http::services::{ServeDir, ServeFile};

pub use api::AppState;
pub use config::ServiceConfig;
pub use error::ServiceError;
use jobs::{CheckpointRegistry, JobQueue};
use store::RunStore;

/// Opens the store (recovering interrupted runs), starts the workers and
/// builds the router. Must be called inside a Tokio runtime.
pub fn build(config: &ServiceConfig) -> Result<(AppState, Router), ServiceError> {
    config.validate()?;
    let store = Arc::new(RunStore::open(&config.store_root)?);
    let registry = Arc::new(CheckpointRegistry::new(config.checkpoint_dir.clone(), config.default_checkpoint.clone()));
    let queue = JobQueue::start(store.clone(), registry.clone(), config.workers, config.sweep_workers);
    let state = AppState { store, registry, queue };
    let mut router = api::routes(state.clone());
    if let Some(dir) = config.static_dir.as_ref().filter(|d| d.is_dir()) {
        router = router.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(dir.join("index.html"))));
    }
    Ok((state, router))
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let (_, router) = build(&config)?;
    let listener = tokio::net::TcpListener::bind(config.addr()).await?;
    tracing::info!(addr = %listener.local_addr()?, "skipforge service listening");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
