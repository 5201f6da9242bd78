//! Read-only HTTP API over immutable indexes.

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use ovis_core::index::{self, IndexError};
use ovis_core::store::{ImageRecord, InstanceStore};
use ovis_core::{SearchIndex, SimilarityMeasure, Vocabulary};
use tower_http::cors::{Any, CorsLayer};

use crate::api::{fingerprint_hex, ErrorBody, Health, InstanceResponse, SearchResponse};
use crate::args::ServeArgs;
use crate::error::{data, CommandError};
use crate::{images_sidecar, vocab_sidecar};

pub const MEDIA_ROOT_ENV: &str = "OVIS_MEDIA_ROOT";

/// Everything a request may read. Never mutated after construction.
#[derive(Debug)]
pub struct ServiceState {
    indexes: Vec<SearchIndex>,
    default_measure: SimilarityMeasure,
    vocab: Vocabulary,
    images: HashMap<u32, ImageRecord>,
    media_root: Option<PathBuf>,
    default_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl ServiceState {
    /// All indexes must come from one checkpoint and hold distinct measures.
    pub fn new(
        indexes: Vec<SearchIndex>,
        vocab: Vocabulary,
        images: Vec<ImageRecord>,
        media_root: Option<PathBuf>,
        default_k: usize,
        default_measure: Option<SimilarityMeasure>,
    ) -> Result<Self, CommandError> {
        let first = indexes
            .first()
            .ok_or_else(|| CommandError::Usage("at least one index is required".into()))?;
        for (i, idx) in indexes.iter().enumerate() {
            if idx.fingerprint() != first.fingerprint() {
                return Err(CommandError::Data(format!(
                    "indexes come from different checkpoints ({} vs {})",
                    fingerprint_hex(first.fingerprint()),
                    fingerprint_hex(idx.fingerprint())
                )));
            }
            if idx.instances() != first.instances() {
                return Err(CommandError::Data("indexes cover different instances".into()));
            }
            if indexes[..i].iter().any(|o| o.measure() == idx.measure()) {
                return Err(CommandError::Usage(format!(
                    "two indexes use the {} measure",
                    idx.measure()
                )));
            }
            if idx.vocab_size() != vocab.len() {
                return Err(CommandError::Data(format!(
                    "index expects {} tokens, vocabulary has {}",
                    idx.vocab_size(),
                    vocab.len()
                )));
            }
        }
        if default_k == 0 {
            return Err(CommandError::Usage("default k must be >= 1".into()));
        }
        let default_measure = default_measure.unwrap_or(first.measure());
        if !indexes.iter().any(|i| i.measure() == default_measure) {
            return Err(CommandError::Usage(format!(
                "no index for default measure {default_measure}"
            )));
        }
        Ok(Self {
            indexes,
            default_measure,
            vocab,
            images: images.into_iter().map(|i| (i.image_id, i)).collect(),
            media_root,
            default_k,
        })
    }

    /// Loads indexes, vocabulary and image metadata named by `args`.
    /// `env_media_root` (the value of `OVIS_MEDIA_ROOT`) wins over the flag.
    pub fn load(args: &ServeArgs, env_media_root: Option<PathBuf>) -> Result<Self, CommandError> {
        let expected = match &args.checkpoint {
            Some(c) => Some(index::checkpoint_fingerprint_of(c).map_err(data(c.display()))?),
            None => None,
        };
        let mut indexes = Vec::new();
        for p in &args.index {
            let idx = match expected {
                Some(fp) => index::load_verified(p, fp),
                None => SearchIndex::load(p),
            }
            .map_err(data(p.display()))?;
            indexes.push(idx);
        }
        let first = &args.index[0];
        let vocab_path = args.vocab.clone().unwrap_or_else(|| vocab_sidecar(first));
        let vocab = Vocabulary::load(&vocab_path).map_err(data(vocab_path.display()))?;
        let images_path = args
            .images
            .clone()
            .or_else(|| Some(images_sidecar(first)).filter(|p| p.exists()));
        let images = match images_path {
            Some(p) => {
                let f = fs::File::open(&p).map_err(data(p.display()))?;
                InstanceStore::read_metadata(BufReader::new(f)).map_err(data(p.display()))?
            }
            None => Vec::new(),
        };
        let media_root = env_media_root.or_else(|| args.media_root.clone());
        Self::new(indexes, vocab, images, media_root, args.default_k, args.default_measure)
    }

    pub fn fingerprint(&self) -> u32 {
        self.indexes[0].fingerprint()
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            index_fingerprint: fingerprint_hex(self.fingerprint()),
            n_instances: self.indexes[0].len(),
            measures: self.indexes.iter().map(|i| i.measure().name().to_string()).collect(),
        }
    }

    /// Parameters arrive as raw query-string values.
    pub fn search(&self, q: Option<&str>, k: Option<&str>, measure: Option<&str>) -> Result<SearchResponse, ApiError> {
        let q = q.unwrap_or("");
        if q.trim().is_empty() {
            return Err(ApiError::bad_request(
                "empty_query",
                "parameter q must be a non-empty query",
            ));
        }
        let k = match k {
            None => self.default_k,
            Some(s) => match s.parse::<usize>() {
                Ok(k) if k >= 1 => k,
                _ => {
                    return Err(ApiError::bad_request(
                        "bad_k",
                        format!("k must be a positive integer, got {s:?}"),
                    ))
                }
            },
        };
        let measure = match measure {
            None | Some("") => self.default_measure,
            Some(s) => s.parse::<SimilarityMeasure>().map_err(|_| {
                ApiError::bad_request("bad_measure", format!("unknown measure {s:?}; use cosine, dp or ndp"))
            })?,
        };
        let index = self.indexes.iter().find(|i| i.measure() == measure).ok_or_else(|| {
            ApiError::bad_request(
                "measure_unavailable",
                format!("no index was loaded for measure {measure}"),
            )
        })?;
        let result = index.score_query(&self.vocab, q, k).map_err(|e| match e {
            IndexError::Tokenize(_) => ApiError::bad_request("bad_query", e.to_string()),
            other => ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "internal",
                message: other.to_string(),
            },
        })?;
        Ok(SearchResponse::new(&result, measure))
    }

    pub fn instance(&self, id: &str) -> Result<InstanceResponse, ApiError> {
        let r = id
            .parse::<u32>()
            .ok()
            .and_then(|id| self.indexes[0].instance(id))
            .ok_or_else(|| ApiError::not_found(format!("no instance {id:?}")))?;
        Ok(InstanceResponse::new(r, self.images.get(&r.image_id)))
    }

    /// File backing `/media/{image_id}`, if the image has media inside the
    /// media root.
    pub fn media_path(&self, image_id: &str) -> Result<PathBuf, ApiError> {
        let root = self
            .media_root
            .as_ref()
            .ok_or_else(|| ApiError::not_found("no media root configured"))?;
        let rel = image_id
            .parse::<u32>()
            .ok()
            .and_then(|id| self.images.get(&id))
            .and_then(|img| img.media.as_deref())
            .ok_or_else(|| ApiError::not_found(format!("no media for image {image_id:?}")))?;
        let rel = Path::new(rel);
        // media paths must stay inside the root
        if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(ApiError::not_found(format!("no media for image {image_id:?}")));
        }
        Ok(root.join(rel))
    }
}

fn content_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

type Shared = State<Arc<ServiceState>>;

async fn search(State(s): Shared, Query(params): Query<HashMap<String, String>>) -> Response {
    let get = |name: &str| params.get(name).map(String::as_str);
    match s.search(get("q"), get("k"), get("measure")) {
        Ok(body) => Json(body).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn instance(State(s): Shared, UrlPath(id): UrlPath<String>) -> Response {
    match s.instance(&id) {
        Ok(body) => Json(body).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn media(State(s): Shared, UrlPath(id): UrlPath<String>) -> Response {
    let path = match s.media_path(&id) {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(e) => {
            log::warn!("media {}: {e}", path.display());
            ApiError::not_found(format!("no media for image {id:?}")).into_response()
        }
    }
}

async fn health(State(s): Shared) -> Json<Health> {
    Json(s.health())
}

async fn fallback(req: Request) -> ApiError {
    ApiError::not_found(format!("no route for {} {}", req.method(), req.uri().path()))
}

async fn access_log(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let uri = req.uri().clone();
    let res = next.run(req).await;
    log::info!("{method} {uri} {}", res.status().as_u16());
    res
}

pub fn router(state: Arc<ServiceState>, cors: bool) -> Router {
    let app = Router::new()
        .route("/api/search", get(search))
        .route("/api/instance/{id}", get(instance))
        .route("/api/health", get(health))
        .route("/media/{image_id}", get(media))
        .fallback(fallback)
        .with_state(state)
        .layer(middleware::from_fn(access_log));
    if cors {
        app.layer(CorsLayer::new().allow_origin(Any).allow_methods([Method::GET]))
    } else {
        app
    }
}
