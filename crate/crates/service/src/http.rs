//! HTTP front end over a [`Campaign`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::store::{Campaign, NextBatch, SubmittedRating};
use crate::ServiceError;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownAnnotator(_) => StatusCode::NOT_FOUND,
            ServiceError::Forbidden => StatusCode::FORBIDDEN,
            ServiceError::Invalid(_) | ServiceError::Config(_) => StatusCode::BAD_REQUEST,
            ServiceError::Duplicate(_) => StatusCode::CONFLICT,
            ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            warn!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct AdminQuery {
    token: Option<String>,
}

#[derive(Serialize)]
struct ImageView {
    image_id: String,
    url: String,
}

#[derive(Deserialize)]
pub struct SubmitBody {
    pub annotator: String,
    pub token: Option<String>,
    pub batch: String,
    pub ratings: Vec<SubmittedRating>,
}

type Shared = Arc<Campaign>;

async fn batch(State(c): State<Shared>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ServiceError> {
    c.check_token(&q.annotator, q.token.as_deref())?;
    let body = match c.next_batch(&q.annotator)? {
        NextBatch::Batch { batch, position, total } => {
            let ext = &c.config().image_extension;
            let images: Vec<ImageView> = batch
                .image_ids
                .iter()
                .map(|id| ImageView {
                    image_id: id.clone(),
                    url: format!("/images/{id}.{ext}"),
                })
                .collect();
            json!({
                "done": false,
                "batch": batch.batch_id,
                "class_id": batch.class_id,
                "images": images,
                "index": position,
                "total": total,
            })
        }
        NextBatch::Done { total } => json!({ "done": true, "total": total }),
    };
    Ok(Json(body).into_response())
}

async fn ratings(State(c): State<Shared>, Json(body): Json<SubmitBody>) -> Result<Response, ServiceError> {
    c.check_token(&body.annotator, body.token.as_deref())?;
    let accepted = tokio::task::spawn_blocking(move || c.submit(&body.annotator, &body.batch, &body.ratings))
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))??;
    Ok(Json(json!({ "accepted": accepted })).into_response())
}

fn check_admin(c: &Campaign, token: Option<&str>) -> Result<(), ServiceError> {
    match &c.config().admin_token {
        Some(t) if Some(t.as_str()) != token => Err(ServiceError::Forbidden),
        _ => Ok(()),
    }
}

async fn export(State(c): State<Shared>, Query(q): Query<AdminQuery>) -> Result<Response, ServiceError> {
    check_admin(&c, q.token.as_deref())?;
    let (text, _) = c.export()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn export_summary(State(c): State<Shared>, Query(q): Query<AdminQuery>) -> Result<Response, ServiceError> {
    check_admin(&c, q.token.as_deref())?;
    let (_, summary) = c.export()?;
    Ok(Json(summary).into_response())
}

async fn progress(State(c): State<Shared>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ServiceError> {
    c.check_token(&q.annotator, q.token.as_deref())?;
    Ok(Json(c.progress(&q.annotator)?).into_response())
}

/// Builds the API router, optionally serving image files and a UI bundle.
pub fn router(campaign: Arc<Campaign>, images: Option<PathBuf>, ui: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/api/batch", get(batch))
        .route("/api/ratings", post(ratings))
        .route("/api/export", get(export))
        .route("/api/export/summary", get(export_summary))
        .route("/api/progress", get(progress))
        .with_state(campaign);
    if let Some(dir) = images {
        app = app.nest_service("/images", ServeDir::new(dir));
    }
    if let Some(dir) = ui {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub images: Option<PathBuf>,
    pub ui: Option<PathBuf>,
}

/// Serves until ctrl-c.
pub async fn serve(campaign: Arc<Campaign>, opts: ServeOptions) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(campaign, opts.images, opts.ui))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
