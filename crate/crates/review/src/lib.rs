//! Review API: a read-only projection of the spot store and image cache,
//! plus verdict submission.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/candidates` | paged list; `bbox`, `status`, `min_total`, `survey`, `positive`, `page`, `page_size` |
//! | GET | `/api/candidates/{id}` | one candidate with imagery and detections |
//! | GET | `/api/candidates/{id}/image/{slot}` | PNG bytes; slot is `sat` or `street0`..`street3` |
//! | POST | `/api/candidates/{id}/verdict` | `{"verdict": bool, "note": "..."}` |
//! | GET | `/api/stats` | survey statistics; `survey` selects one survey |
//! | GET | `/api/surveys` | registered surveys |
//!
//! Errors are `{"error": code, "message": text}`.

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use spotfinder_core::detectors::{Detection, SatelliteScore};
use spotfinder_core::geo::GeoPoint;
use spotfinder_core::imagery::ImageCache;
use spotfinder_core::scoring::ClassCounts;
use spotfinder_core::store::{
    BBox, CandidateFilter, CandidateStatus, CoordinateOutcome, ImageStatus, SpotCandidate, SpotStore, StoreError,
    SurveyRecord, SurveyStats,
};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 200;
pub const SLOTS: [&str; 5] = ["sat", "street0", "street1", "street2", "street3"];

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SpotStore>,
    pub cache: ImageCache,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) | StoreError::UnknownSurvey(_) => StatusCode::NOT_FOUND,
            StoreError::AlreadyVerified { .. } | StoreError::Immutable(_) => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "already_verified",
            StatusCode::BAD_REQUEST => "bad_request",
            _ => "internal",
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("store failure: {e}");
        }
        ApiError::new(status, code, e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageView {
    pub slot: String,
    pub status: ImageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub width: u32,
    pub height: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heading: Option<u16>,
    /// Present when the image can be fetched.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Pixel-space polygons for street images; the UI scales them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidateView {
    pub id: String,
    pub survey_id: String,
    pub grid_index: u64,
    pub point: GeoPoint,
    pub status: CandidateStatus,
    pub positive: bool,
    pub counts: ClassCounts,
    pub probability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sat: Option<SatelliteScore>,
    pub outcome: CoordinateOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict_note: Option<String>,
    pub images: Vec<ImageView>,
}

impl CandidateView {
    pub fn from_candidate(c: &SpotCandidate) -> Self {
        let images = c
            .imagery
            .iter()
            .map(|r| ImageView {
                slot: r.slot.clone(),
                status: r.status,
                reason: r.reason.clone(),
                width: r.size,
                height: r.size,
                heading: r.heading,
                url: (r.status == ImageStatus::Ok).then(|| format!("/api/candidates/{}/image/{}", c.id, r.slot)),
                detections: r.detections.clone(),
            })
            .collect();
        CandidateView {
            id: c.id.clone(),
            survey_id: c.survey_id.clone(),
            grid_index: c.grid_index,
            point: c.point,
            status: c.status,
            positive: c.score.positive,
            counts: c.score.counts,
            probability: c.score.probability,
            sat: c.score.sat,
            outcome: c.outcome.clone(),
            verdict_note: c.verdict_note.clone(),
            images,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidatePage {
    pub items: Vec<CandidateView>,
    /// Matches before paging.
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    bbox: Option<String>,
    status: Option<String>,
    min_total: Option<u32>,
    survey: Option<String>,
    positive: Option<bool>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct VerdictBody {
    pub verdict: bool,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct StatsQuery {
    survey: Option<String>,
}

async fn list_candidates(
    State(state): State<AppState>,
    query: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<CandidatePage>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let bbox = q
        .bbox
        .as_deref()
        .map(str::parse::<BBox>)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let status = q
        .status
        .as_deref()
        .map(|s| CandidateStatus::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown status {s:?}"))))
        .transpose()?;
    let page = q.page.unwrap_or(1);
    if page == 0 {
        return Err(ApiError::bad_request("page starts at 1"));
    }
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 {
        return Err(ApiError::bad_request("page_size must be positive"));
    }
    let page_size = page_size.min(MAX_PAGE_SIZE);
    let filter = CandidateFilter {
        survey_id: q.survey,
        status,
        positive: q.positive,
        min_total: q.min_total,
        bbox,
    };
    let all = state.store.list(&filter);
    let items = all
        .iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(CandidateView::from_candidate)
        .collect();
    Ok(Json(CandidatePage {
        items,
        total: all.len(),
        page,
        page_size,
    }))
}

fn find(state: &AppState, id: &str) -> Result<SpotCandidate, ApiError> {
    state
        .store
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no candidate {id}")))
}

async fn get_candidate(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<CandidateView>, ApiError> {
    Ok(Json(CandidateView::from_candidate(&find(&state, &id)?)))
}

async fn get_image(
    State(state): State<AppState>,
    Path((id, slot)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let c = find(&state, &id)?;
    if !SLOTS.contains(&slot.as_str()) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_slot", format!("no slot {slot:?}")));
    }
    let image = c
        .image(&slot)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_acquired", format!("{slot} was never acquired")))?;
    match image.status {
        ImageStatus::NoCoverage => {
            return Err(ApiError::new(StatusCode::NOT_FOUND, "no_coverage", format!("no imagery for {slot}")))
        }
        ImageStatus::Failed => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "failed",
                image.reason.clone().unwrap_or_default(),
            ))
        }
        ImageStatus::Ok => {}
    }
    let cache = state.cache.clone();
    let key = image.key.clone();
    let bytes = tokio::task::spawn_blocking(move || cache.raster_bytes(&key))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match bytes {
        Some(b) => Ok(([(header::CONTENT_TYPE, "image/png")], b).into_response()),
        None => Err(ApiError::new(
            StatusCode::GONE,
            "evicted",
            format!("{slot} is no longer in the image cache"),
        )),
    }
}

async fn post_verdict(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<VerdictBody>, JsonRejection>,
) -> Result<Json<CandidateView>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let store = state.store.clone();
    let updated = tokio::task::spawn_blocking(move || store.set_verdict(&id, body.verdict, body.note))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(CandidateView::from_candidate(&updated)))
}

async fn get_stats(State(state): State<AppState>, Query(q): Query<StatsQuery>) -> Result<Json<SurveyStats>, ApiError> {
    match q.survey {
        Some(s) => Ok(Json(state.store.stats(&s)?)),
        None => Ok(Json(state.store.stats_all())),
    }
}

async fn get_surveys(State(state): State<AppState>) -> Json<Vec<SurveyRecord>> {
    Json(state.store.surveys())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/candidates", get(list_candidates))
        .route("/api/candidates/{id}", get(get_candidate))
        .route("/api/candidates/{id}/image/{slot}", get(get_image))
        .route("/api/candidates/{id}/verdict", post(post_verdict))
        .route("/api/stats", get(get_stats))
        .route("/api/surveys", get(get_surveys))
        .with_state(state)
}

/// Serves on the loopback interface until ctrl-c.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
