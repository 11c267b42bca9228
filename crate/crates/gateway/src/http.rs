//! JSON-over-HTTP surface.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use codesign_core::catalog::CurateOp;
use codesign_core::design_space::AttributeId;
use codesign_core::elicitation::{BrushRegion, UserProfile};
use codesign_core::palette::NodeRef;
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;
use crate::service::{CreateProject, FramingRequest, Gateway, InformedRequest, InteractionRequest, VoteRequest, WriteOptions};

type Shared = Arc<Gateway>;

pub struct HttpError(pub GatewayError);

impl From<GatewayError> for HttpError {
    fn from(e: GatewayError) -> Self {
        HttpError(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let (status, _) = self.0.status_and_code();
        if status >= 500 {
            tracing::error!(error = %self.0, "request failed");
        }
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.to_api())).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, HttpError>;

/// Runs a gateway call off the async runtime; training and attribution are CPU-bound.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, GatewayError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(HttpError),
        Err(e) => Err(HttpError(GatewayError::Storage(std::io::Error::other(e.to_string())))),
    }
}

fn write_options(headers: &HeaderMap) -> Result<WriteOptions, HttpError> {
    let if_match = match headers.get("if-match") {
        Some(v) => {
            let text = v.to_str().unwrap_or_default().trim().trim_matches('"');
            Some(text.parse::<u64>().map_err(|_| GatewayError::Invalid(format!("If-Match `{text}` is not a log offset")))?)
        }
        None => None,
    };
    let dedup_key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string);
    Ok(WriteOptions { if_match, dedup_key })
}

fn attribute(raw: &str) -> Result<AttributeId, HttpError> {
    raw.parse::<AttributeId>().map_err(|e| HttpError(e.into()))
}

pub fn router(gateway: Shared) -> Router {
    Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(project_summary))
        .route("/projects/{id}/framing", post(framing))
        .route("/projects/{id}/framing/toggle", post(toggle))
        .route("/projects/{id}/library/generate", post(generate))
        .route("/projects/{id}/library", get(library).patch(curate))
        .route("/projects/{id}/sessions", post(open_session))
        .route("/projects/{id}/consensus", get(consensus))
        .route("/projects/{id}/palette", get(palette))
        .route("/projects/{id}/tree/{attribute}", get(tree))
        .route("/projects/{id}/tree/{attribute}/prune", post(prune))
        .route("/projects/{id}/manifest/{attribute}", post(manifest))
        .route("/projects/{id}/informed", post(informed))
        .route("/projects/{id}/items/{item}/save", post(save_item))
        .route("/projects/{id}/items/{item}/attribution", get(attribution))
        .route("/sessions/{id}/round", get(round))
        .route("/sessions/{id}/interactions", post(interact))
        .route("/sessions/{id}/votes", post(vote))
        .route("/sessions/{id}/hypothesis", post(hypothesis))
        .route("/sessions/{id}/tryon", post(tryon))
        .with_state(gateway)
}

async fn create_project(State(gw): State<Shared>, body: Option<Json<CreateProject>>) -> ApiResult<impl Serialize> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    blocking(move || gw.create_project(req)).await
}

#[derive(Serialize)]
struct ProjectList {
    projects: Vec<String>,
}

async fn list_projects(State(gw): State<Shared>) -> ApiResult<impl Serialize> {
    Ok(Json(ProjectList { projects: gw.project_ids() }))
}

async fn project_summary(State(gw): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(move || gw.project_summary(&id)).await
}

async fn framing(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<FramingRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.apply_framing(&id, &req, &opts)).await
}

#[derive(Deserialize)]
struct ToggleRequest {
    attribute: String,
}

async fn toggle(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<ToggleRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    let attr = attribute(&req.attribute)?;
    blocking(move || gw.toggle_attribute(&id, attr, &opts)).await
}

#[derive(Deserialize)]
struct GenerateRequest {
    n: usize,
}

async fn generate(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<GenerateRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.generate_library(&id, req.n, &opts)).await
}

async fn library(State(gw): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(move || gw.library(&id)).await
}

#[derive(Deserialize)]
struct CurateRequest {
    ops: Vec<CurateOp>,
}

async fn curate(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<CurateRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.curate(&id, req.ops, &opts)).await
}

async fn open_session(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(profile): Json<UserProfile>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.open_session(&id, profile, &opts)).await
}

async fn consensus(State(gw): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(move || gw.consensus(&id)).await
}

async fn palette(State(gw): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(move || gw.palette(&id)).await
}

async fn tree(State(gw): State<Shared>, Path((id, attr)): Path<(String, String)>) -> ApiResult<impl Serialize> {
    let attr = attribute(&attr)?;
    blocking(move || gw.tree(&id, attr)).await
}

#[derive(Deserialize)]
struct PruneRequest {
    node: NodeRef,
    #[serde(default = "yes")]
    pruned: bool,
}

fn yes() -> bool {
    true
}

async fn prune(
    State(gw): State<Shared>,
    Path((id, attr)): Path<(String, String)>,
    headers: HeaderMap,
    Json(req): Json<PruneRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    let attr = attribute(&attr)?;
    blocking(move || gw.prune(&id, attr, req.node, req.pruned, &opts)).await
}

async fn manifest(
    State(gw): State<Shared>,
    Path((id, attr)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    let attr = attribute(&attr)?;
    blocking(move || gw.export_manifest(&id, attr, &opts)).await
}

async fn informed(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<InformedRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.informed(&id, &req, &opts)).await
}

async fn save_item(
    State(gw): State<Shared>,
    Path((id, item)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.save_item(&id, &item, &opts)).await
}

async fn attribution(State(gw): State<Shared>, Path((id, item)): Path<(String, String)>) -> ApiResult<impl Serialize> {
    blocking(move || gw.item_attribution(&id, &item)).await
}

async fn round(State(gw): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(move || gw.round(&id)).await
}

async fn interact(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<InteractionRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.interact(&id, req, &opts)).await
}

async fn vote(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<VoteRequest>,
) -> ApiResult<impl Serialize> {
    let opts = write_options(&headers)?;
    blocking(move || gw.vote(&id, req, &opts)).await
}

#[derive(Deserialize)]
struct HypothesisRequest {
    item_id: String,
    region: BrushRegion,
}

async fn hypothesis(
    State(gw): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<HypothesisRequest>,
) -> ApiResult<impl Serialize> {
    blocking(move || gw.hypothesis(&id, &req.item_id, &req.region)).await
}

#[derive(Deserialize)]
struct TryOnRequest {
    item_id: String,
}

async fn tryon(State(gw): State<Shared>, Path(id): Path<String>, Json(req): Json<TryOnRequest>) -> ApiResult<impl Serialize> {
    blocking(move || gw.tryon(&id, &req.item_id)).await
}

/// Binds and serves until Ctrl-C.
pub async fn serve(gateway: Shared, listen: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(address = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
