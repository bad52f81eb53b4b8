//! HTTP routes and the server-push event stream.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderName, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use volseg::objective::ClassInfo;
use volseg::scene::encode_rgb_png;

use crate::session::{Event, Overlay, ServiceError, Session};
use crate::stroke::{rasterize_stroke, StrokeRequest};

/// JSON error body with a status code.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let code = match e {
            ServiceError::NoScene => StatusCode::CONFLICT,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Busy => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/api/scene", get(get_scene).post(post_scene))
        .route("/api/frames/{frame}/{kind}", get(frame_image))
        .route("/api/annotations", get(list_annotations).post(post_annotation))
        .route("/api/annotations/{id}", delete(delete_annotation))
        .route("/api/classes", get(list_classes).post(post_class))
        .route("/api/status", get(get_status))
        .route("/api/training/start", post(start_training))
        .route("/api/training/pause", post(pause_training))
        .route("/api/events", get(events))
        .with_state(session)
}

#[derive(Debug, Deserialize)]
struct LoadRequest {
    path: PathBuf,
}

async fn get_scene(State(s): State<Session>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.summary()?))
}

async fn post_scene(State(s): State<Session>, body: Result<Json<LoadRequest>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    Ok(Json(s.load_scene(req.path).await?))
}

pub const VERSION_HEADER: &str = "x-overlay-version";
pub const REVISION_HEADER: &str = "x-annotation-revision";
pub const ITERATION_HEADER: &str = "x-iteration";

fn png(bytes: Vec<u8>, overlay: Option<&Overlay>) -> Response {
    let mut r = ([(header::CONTENT_TYPE, "image/png")], bytes).into_response();
    if let Some(o) = overlay {
        let h = r.headers_mut();
        for (name, v) in [
            (VERSION_HEADER, o.version),
            (REVISION_HEADER, o.revision),
            (ITERATION_HEADER, o.iteration),
        ] {
            h.insert(HeaderName::from_static(name), v.into());
        }
    }
    r
}

/// `rgb` is the captured image; `render`, `depth`, `features` and
/// `segmentation` come from the latest published snapshot.
async fn frame_image(State(s): State<Session>, Path((frame, kind)): Path<(usize, String)>) -> ApiResult<Response> {
    let scene = s.scene().ok_or(ServiceError::NoScene)?;
    let f = scene
        .frames
        .get(frame)
        .ok_or_else(|| ServiceError::NotFound(format!("frame {frame} does not exist")))?;
    if kind == "rgb" {
        return Ok(png(encode_rgb_png(f.camera.width, f.camera.height, &f.rgb), None));
    }
    if !matches!(kind.as_str(), "render" | "depth" | "features" | "segmentation") {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown image kind `{kind}`")));
    }
    s.mark_viewed(frame);
    let session = s.clone();
    let overlay: Arc<Overlay> = tokio::task::spawn_blocking(move || session.overlay(frame))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let bytes = match kind.as_str() {
        "render" => overlay.color.clone(),
        "depth" => overlay.depth.clone(),
        "features" => overlay.features.clone(),
        _ => overlay.segmentation.clone(),
    };
    Ok(png(bytes, Some(&overlay)))
}

async fn list_annotations(State(s): State<Session>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.strokes().await?))
}

async fn post_annotation(
    State(s): State<Session>,
    body: Result<Json<StrokeRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let scene = s.scene().ok_or(ServiceError::NoScene)?;
    let f = scene
        .frames
        .get(req.frame)
        .ok_or_else(|| ServiceError::NotFound(format!("frame {} does not exist", req.frame)))?;
    let pixels = rasterize_stroke(&req.points, req.radius, f.camera.width, f.camera.height)
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let receipt = s.add_stroke(req.frame, req.class, pixels).await?;
    Ok((StatusCode::CREATED, Json(receipt)))
}

async fn delete_annotation(State(s): State<Session>, Path(id): Path<u64>) -> ApiResult<impl IntoResponse> {
    let revision = s.delete_stroke(id).await?;
    Ok(Json(serde_json::json!({ "id": id, "revision": revision })))
}

async fn list_classes(State(s): State<Session>) -> ApiResult<impl IntoResponse> {
    s.scene().ok_or(ServiceError::NoScene)?;
    Ok(Json(s.classes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassRequest {
    name: String,
    #[serde(default)]
    color: Option<[u8; 3]>,
}

/// Distinct default colors for classes added without one.
fn default_color(id: usize) -> [u8; 3] {
    let h = (id as f64 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 220.0) as u8 + 20, (g * 220.0) as u8 + 20, (b * 220.0) as u8 + 20]
}

async fn post_class(State(s): State<Session>, body: Result<Json<ClassRequest>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let color = req.color.unwrap_or_else(|| default_color(s.classes().len()));
    let info: ClassInfo = s.add_class(req.name, color).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_status(State(s): State<Session>) -> impl IntoResponse {
    Json(s.status())
}

async fn start_training(State(s): State<Session>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.set_running(true).await?))
}

async fn pause_training(State(s): State<Session>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.set_running(false).await?))
}

fn sse(event: &Event) -> SseEvent {
    let name = match event {
        Event::Status(_) => "status",
        Event::SegmentationUpdated { .. } => "segmentation",
    };
    SseEvent::default()
        .event(name)
        .json_data(event)
        .unwrap_or_else(|_| SseEvent::default().comment("unserializable event"))
}

/// Starts with the current status; lagging consumers skip missed events.
/// Ends when the server shuts down.
async fn events(State(s): State<Session>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let first = sse(&Event::Status(s.status()));
    let rest = stream::unfold((s.subscribe(), s.closing()), |(mut rx, mut closing)| async move {
        loop {
            if *closing.borrow() {
                return None;
            }
            tokio::select! {
                r = rx.recv() => match r {
                    Ok(e) => return Some((Ok(sse(&e)), (rx, closing))),
                    Err(RecvError::Lagged(_)) => continue,
                    Err(RecvError::Closed) => return None,
                },
                changed = closing.changed() => {
                    if changed.is_err() {
                        return None;
                    }
                }
            }
        }
    });
    Sse::new(stream::once(async { Ok(first) }).chain(rest)).keep_alive(KeepAlive::default())
}
