use std::process::ExitCode;
use std::sync::Arc;

use cagg_service::{serve, AppState, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();

    let config = match ServiceConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            tracing::error!("{e}");
            return ExitCode::from(2);
        }
    };
    let engine = match config.build_engine() {
        Ok(e) => Arc::new(e),
        Err(e) => {
            tracing::error!("cannot start engine: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut state = AppState::new(engine);
    if let Some(token) = &config.token {
        state = state.with_token(token.clone());
    }
    let listener = match tokio::net::TcpListener::bind(&config.listen_addr).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!(addr = %config.listen_addr, "cannot bind: {e}");
            return ExitCode::FAILURE;
        }
    };
    tracing::info!(addr = %config.listen_addr, "gate service listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    match serve(listener, state, shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("server error: {e}");
            ExitCode::FAILURE
        }
    }
}
