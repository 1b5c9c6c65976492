// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt as _;
use tunedlens::corpus::synth_multilingual_corpus;
use tunedlens::lens::Lens;
use tunedlens::model::{Model, ModelSpec};
use tunedlens::report::StringTable;
use tunedlens::train::{train_lens, TrainConfig};
use tunedlens_cli::serve::{router, ErrorBody, Health, LensSummary, ProbeResponse, ServeState};

const VOCAB: usize = 24;
const LAYERS: usize = 3;

fn spec() -> ModelSpec {
    ModelSpec {
        d_model: 12,
        n_layers: LAYERS,
        n_heads: 3,
        vocab_size: VOCAB,
        max_seq: 10,
        final_norm: true,
        seed: 5,
    }
}

fn app() -> Router {
    let model = Model::build(spec()).unwrap();
    let set = synth_multilingual_corpus(&model, &["bn".into(), "hi".into()], 12, 6, 1).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (trained, _) = train_lens(&set, model.head(), &cfg).unwrap();
    let table = StringTable::parse("0\tनमस्ते\n1\tনমস্কার\n2\thello\n", VOCAB).unwrap();
    let state = ServeState::new(
        model,
        vec![
            ("logit".into(), Lens::logit(spec())),
            ("identity".into(), Lens::identity(spec())),
            ("trained".into(), trained),
        ],
        Some(("words".into(), table)),
        8,
    )
    .unwrap();
    router(Arc::new(state))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: &Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/probe")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

async fn probe_ok(app: &Router, body: Value) -> ProbeResponse {
    let (status, bytes) = post(app, &body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn probe_err(app: &Router, body: Value) -> (StatusCode, ErrorBody) {
    let (status, bytes) = post(app, &body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn health_lists_lenses_and_grid_sizes() {
    let app = app();
    let (status, a) = get(&app, "/health").await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&a).unwrap();
    assert_eq!(h.version, 1);
    assert_eq!(h.lens_ids, ["identity", "logit", "trained"]);
    assert_eq!((h.vocab_size, h.n_layers, h.max_tokens), (VOCAB, LAYERS, 8));
    assert_eq!(h.string_table.as_deref(), Some("words"));
    let (_, b) = get(&app, "/health").await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn final_row_matches_model_prediction() {
    let app = app();
    let r = probe_ok(
        &app,
        json!({"lens_id": "trained", "token_ids": [3, 7, 1, 20], "top_k": 1}),
    )
    .await;
    assert_eq!(r.layers, [1, 2, 3]);
    assert_eq!(r.grid.len(), LAYERS);
    assert_eq!(r.seq_len, 4);
    for (t, cell) in r.grid[LAYERS - 1].iter().enumerate() {
        assert_eq!(cell.top.len(), 1);
        assert_eq!(cell.top[0].token, r.final_prediction[t].token);
    }
}

#[tokio::test]
async fn identity_and_logit_grids_are_identical() {
    let app = app();
    let body = |id: &str| json!({"lens_id": id, "token_ids": [0, 5, 9, 2, 2], "top_k": 4});
    let a = probe_ok(&app, body("identity")).await;
    let b = probe_ok(&app, body("logit")).await;
    assert_eq!(a.grid, b.grid);
    assert_eq!(a.entropy, b.entropy);
}

#[tokio::test]
async fn layer_subset_selects_rows() {
    let app = app();
    let r = probe_ok(
        &app,
        json!({"lens_id": "trained", "token_ids": [1, 2], "layers": [1, LAYERS]}),
    )
    .await;
    assert_eq!(r.layers, [1, LAYERS]);
    assert_eq!(r.grid.len(), 2);
    let full = probe_ok(&app, json!({"lens_id": "trained", "token_ids": [1, 2]})).await;
    assert_eq!(r.grid[1], full.grid[LAYERS - 1]);
    assert_eq!(r.grid[0], full.grid[0]);
}

#[tokio::test]
async fn response_grids_respect_numeric_invariants() {
    let app = app();
    let r = probe_ok(
        &app,
        json!({"lens_id": "trained", "token_ids": [4, 8, 15, 16, 23], "top_k": VOCAB}),
    )
    .await;
    let ln_v = (VOCAB as f64).ln();
    for (row, erow) in r.grid.iter().zip(&r.entropy) {
        for (cell, &h) in row.iter().zip(erow) {
            assert_eq!(cell.entropy, h);
            assert!((0.0..=ln_v + 1e-9).contains(&h));
            assert!(cell.top.windows(2).all(|w| w[0].prob >= w[1].prob));
            assert_eq!(cell.top.len(), VOCAB);
        }
    }
}

#[tokio::test]
async fn floats_carry_at_most_nine_significant_digits() {
    let app = app();
    let (_, bytes) = post(&app, &json!({"lens_id": "trained", "token_ids": [1, 2, 3]})).await;
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    for row in v["grid"].as_array().unwrap() {
        for cell in row.as_array().unwrap() {
            for x in std::iter::once(&cell["entropy"]).chain(cell["top"].as_array().unwrap().iter().map(|t| &t["prob"]))
            {
                let text = x.to_string();
                let digits: String = text
                    .split(['e', 'E'])
                    .next()
                    .unwrap()
                    .chars()
                    .filter(char::is_ascii_digit)
                    .collect::<String>()
                    .trim_start_matches('0')
                    .to_owned();
                assert!(digits.len() <= 9, "{text}");
            }
        }
    }
}

#[tokio::test]
async fn text_requests_use_the_string_table() {
    let app = app();
    let r = probe_ok(
        &app,
        json!({"lens_id": "logit", "text": "hello नमस्ते", "table_id": "words"}),
    )
    .await;
    assert_eq!(r.tokens.iter().map(|t| t.id).collect::<Vec<_>>(), [2, 0]);
    assert_eq!(r.tokens[1].text.as_deref(), Some("नमस्ते"));
    assert!(r.grid[0][0].top[0].text.is_some());
    let (status, e) = probe_err(&app, json!({"lens_id": "logit", "text": "hello", "table_id": "other"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e.error.field.as_deref(), Some("table_id"));
}

#[tokio::test]
async fn structured_errors() {
    let app = app();
    let (status, e) = probe_err(&app, json!({"lens_id": "nope", "token_ids": [1]})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(e.error.code, "unknown_lens");

    let (status, bytes) = call(&app, Request::post("/probe").body(Body::from("{not json")).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(e.error.code, "malformed_body");

    let (status, e) = probe_err(&app, json!({"token_ids": [1]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(e.error.message.contains("lens_id"));

    let (status, e) = probe_err(&app, json!({"lens_id": "logit", "token_ids": [1, -4]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e.error.field.as_deref(), Some("token_ids[1]"));

    let (_, e) = probe_err(&app, json!({"lens_id": "logit", "token_ids": [1, VOCAB]})).await;
    assert_eq!(e.error.field.as_deref(), Some("token_ids[1]"));

    let (_, e) = probe_err(&app, json!({"lens_id": "logit", "token_ids": [1], "top_k": 0})).await;
    assert_eq!(e.error.field.as_deref(), Some("top_k"));

    let (_, e) = probe_err(&app, json!({"lens_id": "logit", "token_ids": [1], "layers": [0]})).await;
    assert_eq!(e.error.field.as_deref(), Some("layers[0]"));

    let (status, e) = probe_err(&app, json!({"lens_id": "logit", "token_ids": vec![1; 9]})).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(e.error.code, "sequence_too_long");
    assert_eq!(e.error.limit, Some(8));

    let (status, bytes) = get(&app, "/lenses/nope/summary").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let e: ErrorBody = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(e.error.code, "unknown_lens");
}

#[tokio::test]
async fn lens_summaries() {
    let app = app();
    let (status, bytes) = get(&app, "/lenses/identity/summary").await;
    assert_eq!(status, StatusCode::OK);
    let s: LensSummary = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(s.translators.len(), LAYERS - 1);
    assert!(s
        .translators
        .iter()
        .all(|t| t.frobenius_from_identity == 0.0 && t.bias_norm == 0.0));

    let (_, a) = get(&app, "/lenses/trained/summary").await;
    let (_, b) = get(&app, "/lenses/trained/summary").await;
    assert_eq!(a, b);
    let t: LensSummary = serde_json::from_slice(&a).unwrap();
    assert!(t.translators.iter().any(|t| t.frobenius_from_identity > 0.0));
    assert_eq!(t.metadata.get("steps").map(String::as_str), Some("30"));
}

#[tokio::test]
async fn identical_and_concurrent_requests_are_independent() {
    let app = app();
    let bodies: Vec<Value> = (0..8)
        .map(|i| {
            let lens = ["logit", "identity", "trained"][i % 3];
            json!({"lens_id": lens, "token_ids": [i, (i * 7) % VOCAB, 3], "top_k": 1 + i % 4})
        })
        .collect();
    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(post(&app, b).await);
    }
    let handles: Vec<_> = bodies
        .iter()
        .cloned()
        .map(|b| {
            let app = app.clone();
            tokio::spawn(async move { post(&app, &b).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&serial) {
        assert_eq!(&h.await.unwrap(), want);
    }
}

#[tokio::test]
async fn server_timing_header_is_set() {
    let app = app();
    let req = Request::post("/probe")
        .header("content-type", "application/json")
        .body(Body::from(json!({"lens_id": "logit", "token_ids": [1]}).to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let timing = resp.headers().get("server-timing").unwrap().to_str().unwrap();
    assert!(timing.starts_with("probe;dur="));
}
