// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP probe service.
//!
//! | method | path                   | body            | result              |
//! |--------|------------------------|-----------------|---------------------|
//! | GET    | `/health`              |                 | [`Health`]          |
//! | POST   | `/probe`               | [`ProbeRequest`]| [`ProbeResponse`]   |
//! | GET    | `/lenses/{id}/summary` |                 | [`LensSummary`]     |
//!
//! State is read-only after startup, so responses depend only on the request.
//! Every payload carries `"version"`; probabilities and entropies are rounded
//! to 9 significant digits. Errors use [`ErrorBody`] with a stable `code`.
//! Wall-clock time for a probe is reported in a `Server-Timing` header so the
//! JSON body of identical requests is byte-identical.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tunedlens::lens::{Lens, LensKind};
use tunedlens::model::Model;
use tunedlens::numerics::softmax;
use tunedlens::report::{build_lens_table_rows, StringTable};

use crate::args::ServeArgs;
use crate::commands::{load_model, resolve_lenses};
use crate::config::{pick, LoadedConfig};
use crate::error::CliError;

/// Wire-format version carried by every response.
pub const API_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: i64 = 5;
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_BIND: &str = "127.0.0.1";

/// Rounds to 9 significant digits.
#[must_use]
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Loaded model, lenses and optional string table.
pub struct ServeState {
    model: Model,
    lenses: BTreeMap<String, Lens>,
    strings: Option<(String, StringTable)>,
    max_tokens: usize,
}

impl ServeState {
    pub fn new(
        model: Model,
        lenses: Vec<(String, Lens)>,
        strings: Option<(String, StringTable)>,
        max_tokens: usize,
    ) -> Result<Self, CliError> {
        let spec = model.spec();
        if max_tokens == 0 || max_tokens > spec.max_seq {
            return Err(CliError::Usage(format!(
                "max tokens must lie in 1..={}, got {max_tokens}",
                spec.max_seq
            )));
        }
        let mut map = BTreeMap::new();
        for (id, lens) in lenses {
            lens.spec().ensure_same(spec, "lens vs served model")?;
            if map.insert(id.clone(), lens).is_some() {
                return Err(CliError::Usage(format!("lens id {id:?} given twice")));
            }
        }
        Ok(Self {
            model,
            lenses: map,
            strings,
            max_tokens,
        })
    }

    #[must_use]
    pub fn lens_ids(&self) -> Vec<String> {
        self.lenses.keys().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Wire types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub final_norm: bool,
    pub seed: u64,
    pub summary: String,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub version: u32,
    pub tool_version: String,
    pub model: ModelInfo,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub max_tokens: usize,
    pub lens_ids: Vec<String>,
    pub string_table: Option<String>,
}

/// Body of `POST /probe`. Give `token_ids`, or `text` when a string table is loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRequest {
    pub lens_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_id: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: i64,
    /// Subset of layers (1-based) in the order the rows should appear.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<i64>>,
}

fn default_top_k() -> i64 {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenView {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub token: u32,
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub top: Vec<TopEntry>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub version: u32,
    pub request: ProbeRequest,
    pub lens_id: String,
    pub lens_kind: LensKind,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    /// Row order of `grid` and `entropy`.
    pub layers: Vec<usize>,
    pub tokens: Vec<TokenView>,
    /// `grid[row][position]`.
    pub grid: Vec<Vec<GridCell>>,
    /// `entropy[row][position]`, nats; same values as `grid[row][position].entropy`.
    pub entropy: Vec<Vec<f64>>,
    /// Base model's own next-token prediction per position.
    pub final_prediction: Vec<TopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorView {
    pub layer: usize,
    pub frobenius_from_identity: f64,
    pub bias_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSummary {
    pub version: u32,
    pub lens_id: String,
    pub kind: LensKind,
    pub translators: Vec<TranslatorView>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// `unknown_lens`, `malformed_body`, `invalid_field` or `sequence_too_long`.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub version: u32,
    pub error: ErrorDetail,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    detail: ErrorDetail,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            detail: ErrorDetail {
                code: code.to_owned(),
                message: message.into(),
                field: None,
                limit: None,
            },
        }
    }

    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::BAD_REQUEST, "invalid_field", message);
        e.detail.field = Some(field.into());
        e
    }

    fn unknown_lens(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_lens", format!("no lens with id {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                version: API_VERSION,
                error: self.detail,
            }),
        )
            .into_response()
    }
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

async fn health(State(state): State<Arc<ServeState>>) -> Json<Health> {
    let spec = state.model.spec();
    Json(Health {
        version: API_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        model: ModelInfo {
            d_model: spec.d_model,
            n_layers: spec.n_layers,
            n_heads: spec.n_heads,
            vocab_size: spec.vocab_size,
            max_seq: spec.max_seq,
            final_norm: spec.final_norm,
            seed: spec.seed,
            summary: spec.summary(),
            weights_sha256: state.model.checksum(),
        },
        vocab_size: spec.vocab_size,
        n_layers: spec.n_layers,
        max_tokens: state.max_tokens,
        lens_ids: state.lens_ids(),
        string_table: state.strings.as_ref().map(|(id, _)| id.clone()),
    })
}

async fn lens_summary(
    State(state): State<Arc<ServeState>>,
    Path(id): Path<String>,
) -> Result<Json<LensSummary>, ApiError> {
    let lens = state.lenses.get(&id).ok_or_else(|| ApiError::unknown_lens(&id))?;
    Ok(Json(LensSummary {
        version: API_VERSION,
        lens_id: id.clone(),
        kind: lens.kind(),
        translators: lens
            .summary()
            .into_iter()
            .map(|t| TranslatorView {
                layer: t.layer,
                frobenius_from_identity: sig9(t.frobenius_from_identity),
                bias_norm: sig9(t.bias_norm),
            })
            .collect(),
        metadata: lens.metadata.clone(),
    }))
}

async fn probe(State(state): State<Arc<ServeState>>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: ProbeRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()).into_response();
        }
    };
    let result = tokio::task::spawn_blocking(move || run_probe(&state, req))
        .await
        .unwrap_or_else(|e| {
            Err(ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal",
                e.to_string(),
            ))
        });
    match result {
        Ok(resp) => {
            let mut r = Json(resp).into_response();
            let timing = format!("probe;dur={:.3}", started.elapsed().as_secs_f64() * 1e3);
            if let Ok(v) = HeaderValue::from_str(&timing) {
                r.headers_mut().insert("server-timing", v);
            }
            r
        }
        Err(e) => e.into_response(),
    }
}

/// Validates a request and computes its response; pure in `state`.
fn run_probe(state: &ServeState, req: ProbeRequest) -> Result<ProbeResponse, ApiError> {
    let spec = state.model.spec();
    let lens = state
        .lenses
        .get(&req.lens_id)
        .ok_or_else(|| ApiError::unknown_lens(&req.lens_id))?;

    if req.top_k < 1 || req.top_k as u64 > spec.vocab_size as u64 {
        return Err(ApiError::field(
            "top_k",
            format!("top_k must lie in 1..={}, got {}", spec.vocab_size, req.top_k),
        ));
    }
    let ids: Vec<u32> = match (&req.token_ids, &req.text) {
        (Some(_), Some(_)) => {
            return Err(ApiError::field("text", "give token_ids or text, not both"));
        }
        (None, None) => return Err(ApiError::field("token_ids", "token_ids or text is required")),
        (Some(ids), None) => ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                u32::try_from(id)
                    .ok()
                    .filter(|&x| (x as usize) < spec.vocab_size)
                    .ok_or_else(|| {
                        ApiError::field(
                            format!("token_ids[{i}]"),
                            format!("token id {id} outside 0..{}", spec.vocab_size),
                        )
                    })
            })
            .collect::<Result<_, _>>()?,
        (None, Some(text)) => {
            let (table_id, table) = state
                .strings
                .as_ref()
                .ok_or_else(|| ApiError::field("text", "no string table is loaded"))?;
            if let Some(t) = &req.table_id {
                if t != table_id {
                    return Err(ApiError::field("table_id", format!("unknown table {t:?}")));
                }
            }
            table.encode(text).map_err(|e| ApiError::field("text", e.to_string()))?
        }
    };
    if ids.is_empty() {
        return Err(ApiError::field("token_ids", "sequence is empty"));
    }
    if ids.len() > state.max_tokens {
        let mut e = ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "sequence_too_long",
            format!("{} tokens exceed the limit of {}", ids.len(), state.max_tokens),
        );
        e.detail.field = Some("token_ids".into());
        e.detail.limit = Some(state.max_tokens);
        return Err(e);
    }
    let layers: Vec<usize> = match &req.layers {
        None => (1..=spec.n_layers).collect(),
        Some(ls) if ls.is_empty() => return Err(ApiError::field("layers", "layers must not be empty")),
        Some(ls) => {
            let mut seen = std::collections::BTreeSet::new();
            ls.iter()
                .enumerate()
                .map(|(i, &l)| {
                    usize::try_from(l)
                        .ok()
                        .filter(|&x| (1..=spec.n_layers).contains(&x) && seen.insert(x))
                        .ok_or_else(|| {
                            ApiError::field(
                                format!("layers[{i}]"),
                                format!("layer {l} is outside 1..={} or repeated", spec.n_layers),
                            )
                        })
                })
                .collect::<Result<_, _>>()?
        }
    };

    let internal =
        |e: tunedlens::LensError| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
    let strings = state.strings.as_ref().map(|(_, t)| t);
    let seq = state.model.forward_collect(&ids, "probe").map_err(internal)?;
    let table = build_lens_table_rows(
        lens,
        state.model.head(),
        spec,
        &seq,
        req.top_k as usize,
        &layers,
        strings,
    )
    .map_err(internal)?;

    let text = |id: u32| strings.map(|t| t.display(id));
    let grid: Vec<Vec<GridCell>> = table
        .cells
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| GridCell {
                    top: c
                        .top
                        .iter()
                        .map(|t| TopEntry {
                            token: t.token,
                            prob: sig9(t.prob),
                            text: t.text.clone(),
                        })
                        .collect(),
                    entropy: sig9(c.entropy),
                })
                .collect()
        })
        .collect();
    let entropy = grid.iter().map(|row| row.iter().map(|c| c.entropy).collect()).collect();
    let final_prediction = table
        .final_prediction
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let p = softmax(&seq.logits_f64(spec, t)).map_err(internal)?;
            Ok(TopEntry {
                token: id,
                prob: sig9(p.probs()[id as usize]),
                text: text(id),
            })
        })
        .collect::<Result<_, ApiError>>()?;

    Ok(ProbeResponse {
        version: API_VERSION,
        lens_id: req.lens_id.clone(),
        lens_kind: lens.kind(),
        vocab_size: spec.vocab_size,
        n_layers: spec.n_layers,
        seq_len: ids.len(),
        layers,
        tokens: ids.iter().map(|&id| TokenView { id, text: text(id) }).collect(),
        grid,
        entropy,
        final_prediction,
        request: req,
    })
}

/// The service's routes over shared read-only state.
pub fn router(state: Arc<ServeState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/health", get(health))
        .route("/probe", post(probe))
        .route("/lenses/{id}/summary", get(lens_summary))
        .layer(cors)
        .with_state(state)
}

/// Loads everything `serve` needs from its arguments.
pub fn state_from_args(a: &ServeArgs, cfg: &LoadedConfig) -> Result<ServeState, CliError> {
    let model = load_model(&a.model)?;
    let spec = model.spec().clone();
    let lenses = resolve_lenses(&a.lenses, &spec)?;
    let strings = match &a.table {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let table = StringTable::parse(&text, spec.vocab_size).map_err(CliError::usage_if_config)?;
            let id = p
                .file_stem()
                .map_or_else(|| "table".to_owned(), |s| s.to_string_lossy().into_owned());
            Some((id, table))
        }
        None => None,
    };
    let max_tokens = pick(a.max_tokens, cfg.file.serve.max_tokens, spec.max_seq);
    ServeState::new(model, lenses, strings, max_tokens)
}

pub fn serve_command(a: &ServeArgs, cfg: &LoadedConfig) -> Result<(), CliError> {
    let state = Arc::new(state_from_args(a, cfg)?);
    let port = pick(a.port, cfg.file.serve.port, DEFAULT_PORT);
    let bind = pick(a.bind.clone(), cfg.file.serve.bind.clone(), DEFAULT_BIND.to_owned());
    let addr: SocketAddr = format!("{bind}:{port}")
        .parse()
        .map_err(|_| CliError::Usage(format!("cannot parse bind address {bind}:{port}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Server(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Server(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Server(e.to_string()))?;
        println!("listening on http://{local}");
        println!("lenses: {}", state.lens_ids().join(", "));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))
    })
}
