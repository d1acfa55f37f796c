//! JSON-over-HTTP parse endpoint.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use navparse::inference::PredictionDocument;
use navparse::{ModelBundle, SiteSchema};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{elapsed_ms, parse_document};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseRequest {
    pub command: String,
    pub page_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseResponse {
    #[serde(flatten)]
    pub document: PredictionDocument,
    pub latency_ms: f64,
}

#[derive(Debug, Clone)]
enum Models {
    Loading,
    Ready(Arc<ModelBundle>),
    Failed(String),
}

/// Shared, read-mostly server state.
#[derive(Debug)]
pub struct AppState {
    schema: SiteSchema,
    models: RwLock<Models>,
}

impl AppState {
    pub fn new(schema: SiteSchema) -> Arc<Self> {
        Arc::new(AppState {
            schema,
            models: RwLock::new(Models::Loading),
        })
    }

    pub fn set_bundle(&self, bundle: ModelBundle) {
        *self.models.write().expect("state lock") = Models::Ready(Arc::new(bundle));
    }

    fn set_failed(&self, message: String) {
        *self.models.write().expect("state lock") = Models::Failed(message);
    }

    fn bundle(&self) -> Result<Arc<ModelBundle>, Response> {
        match &*self.models.read().expect("state lock") {
            Models::Ready(b) => Ok(b.clone()),
            Models::Loading => Err(error_response(StatusCode::SERVICE_UNAVAILABLE, "models are still loading")),
            Models::Failed(m) => Err(error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                &format!("models failed to load: {m}"),
            )),
        }
    }
}

fn error_response(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({"error": message}))).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/parse", post(parse))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.bundle() {
        Ok(_) => Json(json!({"status": "ok"})).into_response(),
        Err(_) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
    }
}

async fn parse(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: ParseRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, &format!("malformed request: {e}")),
    };
    let bundle = match state.bundle() {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    if req.command.trim().is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "command is empty");
    }
    let st = state.clone();
    let result = tokio::task::spawn_blocking(move || parse_document(&bundle, &st.schema, &req.page_id, &req.command)).await;
    match result {
        Ok(Ok(document)) => Json(ParseResponse {
            document,
            latency_ms: elapsed_ms(start),
        })
        .into_response(),
        Ok(Err(navparse::Error::UnknownPage(p))) => error_response(StatusCode::NOT_FOUND, &format!("unknown page `{p}`")),
        Ok(Err(e @ (navparse::Error::Validation(_) | navparse::Error::Model(_)))) => {
            error_response(StatusCode::BAD_REQUEST, &e.to_string())
        }
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

/// Binds first and loads the bundle in the background; requests before the
/// load finishes get 503.
pub async fn serve(host: &str, port: u16, bundle_dir: PathBuf, schema: SiteSchema) -> std::io::Result<()> {
    let state = AppState::new(schema);
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    info!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match ModelBundle::load(&bundle_dir) {
        Ok(b) => {
            loader.set_bundle(b);
            info!("models loaded from {}", bundle_dir.display());
        }
        Err(e) => {
            error!("loading {} failed: {e}", bundle_dir.display());
            loader.set_failed(e.to_string());
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
