//! Command-line tools and the `/v1` HTTP job service for segmentation-guided
//! diffusion editing.

pub mod api;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod ops;
pub mod payload;
pub mod workspace;

use std::sync::Arc;

use config::Config;
use jobs::JobManager;
use workspace::Workspace;

/// Opens the workspace and builds the router with its worker pool.
pub fn app(cfg: &Config) -> pixguide::Result<axum::Router> {
    let ws = Arc::new(Workspace::open(&cfg.root)?);
    let jobs = JobManager::new(ws, cfg.worker_count());
    Ok(api::router(api::AppState {
        jobs,
        policy: cfg.policy.policy(),
        previews: cfg.previews,
    }))
}

pub async fn serve(cfg: Config) -> pixguide::Result<()> {
    let app = app(&cfg)?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", cfg.port)).await?;
    log::info!(
        "serving {} on {} with {} workers",
        cfg.root.display(),
        listener.local_addr()?,
        cfg.worker_count()
    );
    axum::serve(listener, app).await?;
    Ok(())
}
