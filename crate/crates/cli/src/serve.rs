//! Read-only HTTP endpoint over one loaded model.
//!
//! `GET /model` returns the model file, `GET /meta` its shape and standard
//! deviations, `GET /render?k=..&cam=..&fmt=png|ppm` a server-side render.
//! Every other path is looked up in the static directory, if any.

use std::collections::HashMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use gem_core::eigenmodel::{CoefficientVector, GemModel};
use gem_core::render::RenderConfig;
use gem_core::synth::Dataset;
use gem_core::Camera;
use nalgebra::Vector3;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::args::ServeArgs;
use crate::commands::model_meta;
use crate::config::{echo, RunConfig};
use crate::media::{default_camera, encode_image, render_model, ImageKind};
use crate::{data, require_dir, usage, CliResult};

pub struct LoadedModel {
    pub model: GemModel,
    /// The file as read, served verbatim.
    pub bytes: Vec<u8>,
    pub meta: String,
    pub cameras: Vec<Camera>,
}

#[derive(Clone)]
pub struct AppState {
    pub loaded: Option<Arc<LoadedModel>>,
    pub background: Vector3<f64>,
    pub render: RenderConfig,
}

impl LoadedModel {
    /// Uses the given cameras, or one default camera of side `size`.
    pub fn new(bytes: Vec<u8>, cameras: Vec<Camera>, size: usize) -> CliResult<Self> {
        let model = GemModel::from_bytes(&bytes)?;
        let cameras = if cameras.is_empty() {
            vec![default_camera(&model, size)?]
        } else {
            cameras
        };
        let mut meta = model_meta(&model, false);
        meta["cameras"] = json!(cameras.len());
        Ok(Self {
            meta: meta.to_string(),
            model,
            bytes,
            cameras,
        })
    }
}

fn not_found() -> Response {
    (StatusCode::NOT_FOUND, "no model loaded\n").into_response()
}

fn bad_request(msg: String) -> Response {
    (StatusCode::BAD_REQUEST, msg + "\n").into_response()
}

async fn get_model(State(s): State<AppState>) -> Response {
    match &s.loaded {
        Some(m) => ([(header::CONTENT_TYPE, "application/octet-stream")], Body::from(m.bytes.clone())).into_response(),
        None => not_found(),
    }
}

async fn get_meta(State(s): State<AppState>) -> Response {
    match &s.loaded {
        Some(m) => ([(header::CONTENT_TYPE, "application/json")], m.meta.clone()).into_response(),
        None => not_found(),
    }
}

/// Comma-separated flat coefficients in modality order; empty means zero.
pub fn parse_k(text: Option<&str>, model: &GemModel) -> Result<CoefficientVector, String> {
    let counts = model.component_counts();
    let text = text.unwrap_or("").trim();
    if text.is_empty() {
        return Ok(model.zero_coefficients());
    }
    let flat = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("k: {v:?} is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err("k: values must be finite".into());
    }
    let total: usize = counts.iter().sum();
    if flat.len() != total {
        return Err(format!("k: expected {total} values ({counts:?} per modality), got {}", flat.len()));
    }
    CoefficientVector::from_flat(&flat, counts).map_err(|e| e.to_string())
}

async fn get_render(State(s): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(loaded) = s.loaded.clone() else {
        return not_found();
    };
    let k = match parse_k(q.get("k").map(String::as_str), &loaded.model) {
        Ok(k) => k,
        Err(e) => return bad_request(e),
    };
    let cam = match q.get("cam").map(|c| c.parse::<usize>()) {
        None => 0,
        Some(Ok(c)) if c < loaded.cameras.len() => c,
        Some(_) => return bad_request(format!("cam must be an index below {}", loaded.cameras.len())),
    };
    let kind = match q.get("fmt").map(String::as_str).unwrap_or("png") {
        "png" => ImageKind::Png,
        "ppm" => ImageKind::Ppm,
        other => return bad_request(format!("fmt {other:?}: expected png or ppm")),
    };
    let work = tokio::task::spawn_blocking(move || {
        render_model(&loaded.model, &k, &loaded.cameras[cam], s.background, &s.render).map(|img| encode_image(&img, kind))
    })
    .await;
    match work {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, kind.mime())], bytes).into_response(),
        Ok(Err(e)) => (StatusCode::UNPROCESSABLE_ENTITY, format!("{e}\n")).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, format!("{e}\n")).into_response(),
    }
}

async fn index() -> &'static str {
    "GET /model   model file\nGET /meta    shape and standard deviations\nGET /render?k=..&cam=..&fmt=png|ppm\n"
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/model", get(get_model))
        .route("/meta", get(get_meta))
        .route("/render", get(get_render));
    let api = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    };
    api.with_state(state)
}

pub fn run(a: ServeArgs, cfg: RunConfig) -> CliResult<()> {
    let mut view = cfg.view;
    if let Some(s) = a.size {
        view.image_size = s;
    }
    echo(
        "serve",
        &json!({ "model": a.model, "dataset": a.dataset, "bind": a.bind, "port": a.port, "static": a.static_dir, "view": view }),
    );
    if let Some(d) = &a.static_dir {
        require_dir(d)?;
    }
    let cameras = match &a.dataset {
        Some(d) => Dataset::open(require_dir(d)?)?.cameras()?,
        None => Vec::new(),
    };
    let loaded = if a.model.exists() {
        Some(Arc::new(LoadedModel::new(std::fs::read(&a.model)?, cameras, view.image_size)?))
    } else {
        log::warn!("{} does not exist; model endpoints will answer 404", a.model.display());
        None
    };
    let state = AppState {
        loaded,
        background: Vector3::from(view.background),
        render: view.render,
    };
    let addr: SocketAddr = format!("{}:{}", a.bind, a.port)
        .parse()
        .map_err(|e| usage(format!("bad bind address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| data(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| usage(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr()?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        axum::serve(listener, router(state, a.static_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
