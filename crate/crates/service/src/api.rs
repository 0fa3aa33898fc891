//! `/v1` HTTP endpoints. Payloads are JSON with base64-encoded PNGs.

use std::sync::Arc;
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use gclab_core::guidance::{edge_from_grid, encode_panoptic, encode_semantic};
use gclab_core::pipeline::{Pipeline, Variant};
use gclab_core::{pngio, Error, GuidanceKind, GuidanceMap, HoleMask, RgbImage};

use crate::registry::{LoadedModel, Registry};

/// Error body: `{"error": {"status", "field", "message"}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            field: field.into(),
            message: message.into(),
        }
    }

    fn unprocessable(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, field, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let field = e.field().unwrap_or("request").to_string();
        let status = match &e {
            Error::Decode { .. } => StatusCode::BAD_REQUEST,
            Error::Argument { .. } | Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, field, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": {
                "status": self.status.as_u16(),
                "field": self.field,
                "message": self.message,
            }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub struct AppState {
    pub registry: Registry,
    pub api_key: Option<String>,
    pub max_body_bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub image: String,
    pub mask: String,
    /// `edge`, `semantic`, `panoptic` or `none` (automatic pipeline).
    pub guidance_kind: String,
    /// Edge map (0/255) or semantic class-index PNG, depending on the kind.
    #[serde(default)]
    pub guidance: Option<String>,
    /// 16-bit instance-id PNG for `panoptic`.
    #[serde(default)]
    pub instances: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub image: String,
    pub model: String,
    pub elapsed_ms: u64,
    /// Predicted layout, present only for `guidance_kind = none` via the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub semantic: String,
    pub instances: String,
    pub segmenter: String,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/segment", post(segment))
        .route("/v1/meta", get(meta))
        .route("/v1/openapi", get(openapi))
        .with_state(Arc::new(state))
}

fn check_key(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(key) = &state.api_key else {
        return Ok(());
    };
    let given = headers
        .get("x-api-key")
        .and_then(|v| v.to_str().ok())
        .or_else(|| {
            headers
                .get("authorization")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
        });
    if given == Some(key.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "api_key", "missing or wrong API key"))
    }
}

async fn read_json<T: DeserializeOwned>(state: &AppState, body: Body) -> ApiResult<T> {
    let bytes = to_bytes(body, state.max_body_bytes).await.map_err(|_| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "body",
            format!("request body exceeds {} bytes", state.max_body_bytes),
        )
    })?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let msg = e.to_string();
        // serde names the missing or mistyped field between backticks
        let field = msg
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
            .unwrap_or("body")
            .to_string();
        ApiError::new(StatusCode::BAD_REQUEST, field, msg)
    })
}

fn b64(field: &str, s: &str) -> ApiResult<Vec<u8>> {
    STANDARD
        .decode(s.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, field, format!("invalid base64: {e}")))
}

fn required<'a>(field: &str, v: &'a Option<String>) -> ApiResult<&'a str> {
    v.as_deref()
        .ok_or_else(|| ApiError::unprocessable(field, format!("`{field}` is required for this guidance kind")))
}

fn encode_png(bytes: gclab_core::Result<Vec<u8>>) -> ApiResult<String> {
    Ok(STANDARD.encode(bytes?))
}

fn parse_kind(s: &str) -> ApiResult<Option<GuidanceKind>> {
    match s {
        "none" => Ok(None),
        other => other
            .parse::<GuidanceKind>()
            .map(Some)
            .map_err(|_| ApiError::unprocessable("guidance_kind", format!("unknown guidance kind `{other}`"))),
    }
}

fn pick_model(reg: &Registry, tag: Option<&str>, kind: Option<GuidanceKind>) -> ApiResult<Arc<LoadedModel>> {
    if reg.models.is_empty() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model", "no model loaded"));
    }
    match tag {
        Some(t) => reg
            .get(t)
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model", format!("model `{t}` not loaded"))),
        None => {
            // the automatic pipeline runs on a panoptic model
            let want = kind.or(Some(GuidanceKind::Panoptic));
            reg.find(want).or_else(|| if kind.is_none() { reg.find(None) } else { None }).ok_or_else(|| {
                ApiError::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "model",
                    format!("no loaded model accepts guidance kind `{}`", kind.map_or("none", GuidanceKind::as_str)),
                )
            })
        }
    }
}

fn build_guidance(req: &CompleteRequest, kind: GuidanceKind, k: usize, shape: (usize, usize)) -> ApiResult<GuidanceMap> {
    let g = b64("guidance", required("guidance", &req.guidance)?)?;
    let map = match kind {
        GuidanceKind::Edge => edge_from_grid(&pngio::decode_mask(&g, "guidance")?.0),
        GuidanceKind::Semantic => encode_semantic(&pngio::decode_semantic(&g, k, "guidance")?, k)?,
        GuidanceKind::Panoptic => {
            let inst = b64("instances", required("instances", &req.instances)?)?;
            let sem = pngio::decode_semantic(&g, k, "guidance")?;
            let inst = pngio::decode_instances(&inst, "instances")?;
            if inst.shape() != sem.shape() {
                return Err(ApiError::unprocessable("instances", "instance map shape differs from guidance"));
            }
            encode_panoptic(&sem, &inst, k)?
        }
    };
    if map.shape() != shape {
        return Err(ApiError::unprocessable(
            "guidance",
            format!("guidance is {:?}, image is {:?}", map.shape(), shape),
        ));
    }
    Ok(map)
}

struct Completed {
    image: RgbImage,
    layout: Option<(String, String)>,
}

fn run_complete(state: &AppState, req: &CompleteRequest) -> ApiResult<(Completed, String)> {
    let image = pngio::decode_rgb_field(&b64("image", &req.image)?, "image")?;
    let mask = pngio::decode_mask(&b64("mask", &req.mask)?, "mask")?;
    if mask.shape() != image.shape() {
        return Err(ApiError::unprocessable(
            "mask",
            format!("mask is {:?}, image is {:?}", mask.shape(), image.shape()),
        ));
    }
    let kind = parse_kind(&req.guidance_kind)?;
    let reg = &state.registry;
    let model = pick_model(reg, req.model.as_deref(), kind)?;
    let k = model.num_classes();

    if let Some(kind) = kind {
        if model.guidance_kind() != Some(kind) {
            return Err(ApiError::unprocessable(
                "guidance_kind",
                format!(
                    "model `{}` takes `{}` guidance",
                    model.tag,
                    model.guidance_kind().map_or("none", GuidanceKind::as_str)
                ),
            ));
        }
        let guidance = build_guidance(req, kind, k, image.shape())?;
        let out = model.with_generator(|g| g.complete(&image, &mask, Some(&guidance)))?;
        return Ok((Completed { image: out, layout: None }, model.tag.clone()));
    }

    // guidance_kind = none
    if mask.hole_count() == 0 {
        return Ok((Completed { image, layout: None }, model.tag.clone()));
    }
    match model.guidance_kind() {
        None => {
            let out = model.with_generator(|g| g.complete(&image, &mask, None))?;
            Ok((Completed { image: out, layout: None }, model.tag.clone()))
        }
        Some(GuidanceKind::Panoptic) => {
            let out = auto_complete(reg, &model, &image, &mask)?;
            Ok((out, model.tag.clone()))
        }
        Some(other) => Err(ApiError::unprocessable(
            "guidance_kind",
            format!("model `{}` takes `{}` guidance; `none` needs a panoptic model", model.tag, other.as_str()),
        )),
    }
}

fn auto_complete(reg: &Registry, model: &LoadedModel, image: &RgbImage, mask: &HoleMask) -> ApiResult<Completed> {
    let segmenter = reg
        .segmenter
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_IMPLEMENTED, "segmenter", "no segmenter configured"))?;
    let initial = reg.initial();
    let variant = if initial.is_some() {
        Variant::InpaintThenSegment
    } else {
        Variant::SegmentIncomplete
    };
    let pipeline = Pipeline::new(
        variant,
        initial.as_ref().map(|m| m.generator()),
        segmenter,
        model.generator(),
        model.num_classes(),
    )?;
    // hold the model locks in tag order while the pipeline runs
    let mut held = vec![model];
    if let Some(m) = initial.as_deref() {
        if m.tag != model.tag {
            held.push(m);
        }
    }
    held.sort_by(|a, b| a.tag.cmp(&b.tag));
    let out = lock_all(&held, || pipeline.auto_complete(image, mask))?;
    Ok(Completed {
        image: out.image,
        layout: Some((
            encode_png(pngio::encode_semantic(&out.semantic))?,
            encode_png(pngio::encode_instances(&out.instances))?,
        )),
    })
}

fn lock_all<T>(models: &[&LoadedModel], f: impl FnOnce() -> T) -> T {
    match models.split_first() {
        None => f(),
        Some((first, rest)) => first.with_generator(|_| lock_all(rest, f)),
    }
}

async fn complete(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Body) -> ApiResult<Json<CompleteResponse>> {
    check_key(&state, &headers)?;
    let req: CompleteRequest = read_json(&state, body).await?;
    let started = Instant::now();
    let st = state.clone();
    let (done, tag) = tokio::task::spawn_blocking(move || run_complete(&st, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "request", e.to_string()))??;
    let (semantic, instances) = done.layout.unzip();
    Ok(Json(CompleteResponse {
        image: encode_png(pngio::encode_rgb(&done.image))?,
        model: tag,
        elapsed_ms: started.elapsed().as_millis() as u64,
        semantic,
        instances,
    }))
}

fn run_segment(state: &AppState, req: &SegmentRequest) -> ApiResult<SegmentResponse> {
    let segmenter = state
        .registry
        .segmenter
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_IMPLEMENTED, "segmenter", "no segmenter configured"))?;
    let image = pngio::decode_rgb_field(&b64("image", &req.image)?, "image")?;
    let mask = match &req.mask {
        Some(m) => {
            let mask = pngio::decode_mask(&b64("mask", m)?, "mask")?;
            if mask.shape() != image.shape() {
                return Err(ApiError::unprocessable("mask", "mask shape differs from image"));
            }
            Some(mask)
        }
        None => None,
    };
    if mask.is_some() && !segmenter.handles_incomplete() {
        return Err(ApiError::unprocessable(
            "mask",
            format!("segmenter `{}` does not take incomplete images", segmenter.tag()),
        ));
    }
    let (semantic, instances) = segmenter.segment(&image, mask.as_ref())?;
    Ok(SegmentResponse {
        semantic: encode_png(pngio::encode_semantic(&semantic))?,
        instances: encode_png(pngio::encode_instances(&instances.densified()))?,
        segmenter: segmenter.tag().to_string(),
    })
}

async fn segment(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Body) -> ApiResult<Json<SegmentResponse>> {
    check_key(&state, &headers)?;
    let req: SegmentRequest = read_json(&state, body).await?;
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || run_segment(&st, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "request", e.to_string()))??;
    Ok(Json(out))
}

/// Service description. Stable key order (serde_json maps are sorted).
pub fn meta_json(reg: &Registry) -> Value {
    let models: Vec<Value> = reg
        .models
        .values()
        .map(|m| {
            json!({
                "tag": m.tag,
                "guidance_kind": m.guidance_kind().map_or("none", GuidanceKind::as_str),
                "num_classes": m.num_classes(),
                "class_names": m.class_names(),
                "resolution": m.config.resolution,
                "crop_size": m.config.crop.size,
            })
        })
        .collect();
    let primary = reg
        .find(Some(GuidanceKind::Panoptic))
        .or_else(|| reg.models.values().next().cloned());
    let mut kinds: Vec<&str> = reg
        .models
        .values()
        .map(|m| m.guidance_kind().map_or("none", GuidanceKind::as_str))
        .collect();
    if reg.segmenter.is_some() && reg.find(Some(GuidanceKind::Panoptic)).is_some() {
        kinds.push("none");
    }
    kinds.sort_unstable();
    kinds.dedup();
    json!({
        "tags": reg.models.keys().collect::<Vec<_>>(),
        "models": models,
        "num_classes": primary.as_ref().map(|m| m.num_classes()),
        "class_names": primary.as_ref().map(|m| m.class_names()).unwrap_or_default(),
        "guidance_kinds": kinds,
        "crop_size": primary.as_ref().map(|m| m.config.crop.size),
        "segmenter": reg.segmenter.as_ref().map(|s| s.tag().to_string()),
    })
}

async fn meta(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(meta_json(&state.registry))
}

async fn openapi() -> Json<Value> {
    Json(crate::openapi::document())
}
