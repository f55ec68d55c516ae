//! HTTP/JSON inference API over one loaded checkpoint.
//!
//! Routes: `GET /api/health`, `GET /api/samples`, `GET /api/samples/:id`,
//! `POST /api/segment` and `POST /api/synthesize`. Images travel as base64
//! PNG and masks as base64 indexed PNG with class values 0..4. Errors are
//! `{code, message}` with a status matching the code.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facialgan_core::datapipe::{AttributeId, DomainLabel, Image, SegMask};
use facialgan_core::networks::NetworkParams;
use facialgan_core::synth::{parse, synthesize, StyleMode, SynthesisRequest};
use facialgan_core::toyset::toy_face;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::error::Error;
use crate::wire;

/// Size of catalog thumbnails.
pub const THUMBNAIL_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadBase64,
    BadImage,
    BadMask,
    BadRequest,
    MissingReference,
    NotFound,
    Internal,
}

impl ErrorCode {
    fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<facialgan_core::Error> for ApiError {
    fn from(e: facialgan_core::Error) -> Self {
        use facialgan_core::Error as E;
        let code = match &e {
            E::MissingReference => ErrorCode::MissingReference,
            E::BadMask(_) => ErrorCode::BadMask,
            E::ShapeMismatch(_) => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// A demo face offered by the catalog.
#[derive(Clone, Debug)]
pub struct CatalogEntry {
    pub id: String,
    pub image: Image,
    pub mask: SegMask,
    pub gender: DomainLabel,
}

/// Toy faces at the model's resolution.
pub fn toy_catalog(n: usize, size: usize, seed: u64) -> facialgan_core::Result<Vec<CatalogEntry>> {
    (0..n)
        .map(|i| {
            let s = toy_face(size, seed, i as u64).to_sample(format!("demo-{i:02}"))?;
            Ok(CatalogEntry {
                id: s.id,
                image: s.image,
                mask: s.mask,
                gender: s.gender,
            })
        })
        .collect()
}

pub struct AppState {
    pub params: NetworkParams<f32>,
    pub iteration: u64,
    pub catalog: Vec<CatalogEntry>,
    /// Serialises model calls when present.
    pub single_flight: Option<Mutex<()>>,
}

pub type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(samples))
        .route("/api/samples/:id", get(sample))
        .route("/api/segment", post(segment))
        .route("/api/synthesize", post(synthesize_route))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Health {
    pub status: String,
    pub iteration: u64,
}

async fn health(State(app): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        iteration: app.iteration,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub thumbnail: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleDetail {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub domain: String,
}

fn encode_image_b64(img: &Image) -> Result<String, ApiError> {
    wire::encode_image(img)
        .map(|b| wire::b64_encode(&b))
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))
}

fn encode_mask_b64(m: &SegMask) -> Result<String, ApiError> {
    wire::encode_mask(m)
        .map(|b| wire::b64_encode(&b))
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))
}

fn thumbnail(img: &Image) -> Result<String, ApiError> {
    if img.height() <= THUMBNAIL_SIZE {
        return encode_image_b64(img);
    }
    let rgb = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| ApiError::new(ErrorCode::Internal, "thumbnail buffer"))?;
    let small = wire::resize_rgb8(rgb, THUMBNAIL_SIZE);
    let img = wire::rgb8_to_image(&small).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    encode_image_b64(&img)
}

async fn samples(State(app): State<Shared>) -> ApiResult<Vec<SampleSummary>> {
    let out = app
        .catalog
        .iter()
        .map(|e| {
            Ok(SampleSummary {
                id: e.id.clone(),
                thumbnail: thumbnail(&e.image)?,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Json(out))
}

async fn sample(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<SampleDetail> {
    let e = app
        .catalog
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no sample {id}")))?;
    Ok(Json(SampleDetail {
        id: e.id.clone(),
        image: encode_image_b64(&e.image)?,
        mask: encode_mask_b64(&e.mask)?,
        domain: e.gender.name().into(),
    }))
}

fn decode_image_field(field: &str, text: &str, size: usize) -> Result<Image, ApiError> {
    let bytes = wire::b64_decode(text).map_err(|e| ApiError::new(ErrorCode::BadBase64, format!("{field}: {e}")))?;
    wire::decode_image(&bytes, Some(size)).map_err(|e| ApiError::new(ErrorCode::BadImage, format!("{field}: {e}")))
}

fn decode_mask_field(text: &str, size: usize) -> Result<SegMask, ApiError> {
    let bytes = wire::b64_decode(text).map_err(|e| ApiError::new(ErrorCode::BadBase64, format!("mask: {e}")))?;
    wire::decode_mask(&bytes, Some(size)).map_err(|e| {
        let code = match e {
            Error::BadMask(_) => ErrorCode::BadMask,
            _ => ErrorCode::BadImage,
        };
        ApiError::new(code, format!("mask: {e}"))
    })
}

/// Run model work off the async threads, one at a time in single-flight mode.
async fn compute<T, F>(app: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let _guard = match &app.single_flight {
        Some(m) => Some(m.lock().await),
        None => None,
    };
    let app = app.clone();
    tokio::task::spawn_blocking(move || f(&app))
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
}

async fn segment(State(app): State<Shared>, body: Result<Json<SegmentRequest>, axum::extract::rejection::JsonRejection>) -> ApiResult<SegmentResponse> {
    let Json(req) = body.map_err(|e| ApiError::new(ErrorCode::BadRequest, e.body_text()))?;
    let size = app.params.config.image_size;
    let img = decode_image_field("image", &req.image, size)?;
    let mask = compute(&app, move |a| Ok(parse(&a.params, &img)?)).await?;
    Ok(Json(SegmentResponse {
        mask: encode_mask_b64(&mask)?,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesizeBody {
    pub source: String,
    pub mode: String,
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub mask: Option<String>,
    pub domain: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub masked_attributes: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthesizeResponse {
    pub image: String,
    pub predicted_mask: String,
    pub timing_ms: f64,
}

fn parse_domain(s: &str) -> Result<DomainLabel, ApiError> {
    DomainLabel::ALL
        .into_iter()
        .find(|d| d.name() == s)
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("domain must be male or female, got {s}")))
}

/// Decode and validate a request body into a model request.
pub fn synthesis_request(body: &SynthesizeBody, size: usize) -> Result<SynthesisRequest, ApiError> {
    let mode = StyleMode::from_name(&body.mode)
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("mode must be latent or reference, got {}", body.mode)))?;
    let masked_attributes = body
        .masked_attributes
        .as_ref()
        .map(|names| {
            names
                .iter()
                .map(|n| {
                    AttributeId::from_name(n)
                        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("unknown attribute {n}")))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    Ok(SynthesisRequest {
        source: decode_image_field("source", &body.source, size)?,
        mask: body.mask.as_deref().map(|m| decode_mask_field(m, size)).transpose()?,
        mode,
        domain: parse_domain(&body.domain)?,
        seed: body.seed.unwrap_or(0),
        reference: body
            .reference
            .as_deref()
            .map(|r| decode_image_field("reference", r, size))
            .transpose()?,
        masked_attributes,
    })
}

/// PNG bytes of the generated image and of its predicted mask.
pub fn render(params: &NetworkParams<f32>, req: &SynthesisRequest) -> Result<(Vec<u8>, Vec<u8>), ApiError> {
    let out = synthesize(params, req)?;
    let internal = |e: Error| ApiError::new(ErrorCode::Internal, e.to_string());
    Ok((
        wire::encode_image(&out.image).map_err(internal)?,
        wire::encode_mask(&out.predicted_mask).map_err(internal)?,
    ))
}

/// Offline equivalent of `POST /api/synthesize`: PNG image and mask bytes.
pub fn generate(params: &NetworkParams<f32>, body: &SynthesizeBody) -> Result<(Vec<u8>, Vec<u8>), ApiError> {
    render(params, &synthesis_request(body, params.config.image_size)?)
}

async fn synthesize_route(
    State(app): State<Shared>,
    body: Result<Json<SynthesizeBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<SynthesizeResponse> {
    let Json(body) = body.map_err(|e| ApiError::new(ErrorCode::BadRequest, e.body_text()))?;
    let req = synthesis_request(&body, app.params.config.image_size)?;
    let start = Instant::now();
    let (image, mask) = compute(&app, move |a| render(&a.params, &req)).await?;
    let timing_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Json(SynthesizeResponse {
        image: wire::b64_encode(&image),
        predicted_mask: wire::b64_encode(&mask),
        timing_ms,
    }))
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
