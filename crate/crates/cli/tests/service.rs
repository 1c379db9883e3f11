use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use spaceedit::editops::{synthesize_dataset, BaseSource, ImagePair, Split};
use spaceedit::generator::{GeneratorBundle, GeneratorConfig};
use spaceedit::inversion::InversionConfig;
use spaceedit::lgie::{train_embedder, EmbedderConfig, JointEmbedder};
use spaceedit::spacesearch::{build_index, CodeIndex};
use spaceedit::training::{train, TrainConfig, TrainOutput};
use spaceedit::{Image, Mask};
use spaceedit_cli::service::{router, AppState, JobQueue};
use spaceedit_cli::RunConfig;
use tower::ServiceExt;

struct Fixture {
    cfg: RunConfig,
    bundle: GeneratorBundle,
    embedder: JointEmbedder,
    index: CodeIndex,
    pairs: Vec<ImagePair>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.generator = GeneratorConfig {
            base_channels: 4,
            max_channels: 8,
            mapping_depth: 2,
            ..GeneratorConfig::toy(8)
        };
        cfg.dataset.resolution = 8;
        cfg.inversion = InversionConfig {
            steps: 10,
            ..InversionConfig::default()
        };
        cfg.lgie.zero_shot.steps = 4;
        cfg.serve.clusters = 3;
        let pairs = synthesize_dataset(BaseSource::Procedural, 700, 2, 8).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            total_images: 8,
            ..TrainConfig::default()
        };
        let bundle = train(&pairs, &cfg.generator, &tc, None, &TrainOutput::default()).unwrap();
        let train_pairs: Vec<&ImagePair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
        let ec = EmbedderConfig {
            steps: 20,
            ..EmbedderConfig::default()
        };
        let (embedder, _) = train_embedder(&train_pairs, &ec).unwrap();
        let test: Vec<&ImagePair> = pairs.iter().filter(|p| p.split == Split::Test).take(8).collect();
        let ic = InversionConfig {
            steps: 5,
            optimize_noise: false,
            ..InversionConfig::default()
        };
        let index = build_index(&bundle, &test, &ic).unwrap();
        Fixture {
            cfg,
            bundle,
            embedder,
            index,
            pairs,
        }
    })
}

fn state(dir: &std::path::Path) -> Arc<AppState> {
    let f = fixture();
    AppState::new(
        &f.cfg,
        f.bundle.clone(),
        f.embedder.clone(),
        f.index.clone(),
        f.pairs.clone(),
        dir.to_path_buf(),
    )
    .unwrap()
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Body) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &axum::Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get_json(app: &axum::Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, Body::empty()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn upload(app: &axum::Router, im: &Image) -> String {
    let (s, b) = call(app, "POST", "/images", Body::from(im.to_png_bytes())).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_slice::<Value>(&b).unwrap()["image_id"].as_str().unwrap().to_string()
}

async fn session(app: &axum::Router, image_id: &str) -> Value {
    let (s, v) = call_json(app, "POST", "/sessions", json!({ "image_id": image_id })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

fn test_image() -> Image {
    fixture().pairs.iter().find(|p| p.split == Split::Val).unwrap().before.clone()
}

#[tokio::test]
async fn health_reports_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let (s, v) = get_json(&app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["checkpoint_hash"], fixture().bundle.checkpoint_hash());
}

#[tokio::test]
async fn images_are_content_addressed() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let im = test_image();
    let id = upload(&app, &im).await;
    assert_eq!(id, upload(&app, &im).await);
    assert!(id.starts_with("img-"));
    let (s, bytes) = call(&app, "GET", &format!("/images/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, im.to_png_bytes());
    let (s, _) = call(&app, "GET", "/images/img-0000000000000000", Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/images", Body::from("not a png")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn sessions_start_from_the_identity_code() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let id = upload(&app, &Image::filled(12, 12, [0.3, 0.5, 0.7])).await;
    let s = session(&app, &id).await;
    assert_eq!(s["history"], json!([]));
    assert_eq!(s["w0"].as_array().unwrap().len(), 512);
    assert_eq!(session(&app, &id).await["id"], s["id"]);
    let (st, got) = get_json(&app, &format!("/sessions/{}", s["id"].as_str().unwrap())).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(got, s);
    let (st, _) = call_json(&app, "POST", "/sessions", json!({ "image_id": "img-missing" })).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = get_json(&app, "/sessions/ses-missing").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn text_edits_interpolate_back_to_identity_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let id = upload(&app, &test_image()).await;
    let s = session(&app, &id).await;
    let sid = s["id"].as_str().unwrap();
    let uri = format!("/sessions/{sid}/edit-text");
    let (st, edit) = call_json(&app, "POST", &uri, json!({ "request": "make it brighter", "lambda": 0.2 })).await;
    assert_eq!(st, StatusCode::OK, "{edit}");
    let result = edit["result_id"].as_str().unwrap();
    let trace = edit["objective_trace"].as_array().unwrap();
    assert_eq!(trace.len(), 5);

    let (_, again) = call_json(&app, "POST", &uri, json!({ "request": "make it brighter", "lambda": 0.2 })).await;
    assert_eq!(again["result_id"], edit["result_id"]);

    let (st, at0) = get_json(&app, &format!("/interpolate?session={sid}&result={result}&alpha=0")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(at0["image_id"], s["identity_id"]);
    let (_, at1) = get_json(&app, &format!("/interpolate?session={sid}&result={result}&alpha=1")).await;
    assert_eq!(at1["image_id"], edit["result_id"]);

    let (_, got) = get_json(&app, &format!("/sessions/{sid}")).await;
    assert_eq!(got["history"].as_array().unwrap().len(), 2);

    for bad in [
        json!({ "request": "  " }),
        json!({ "request": "warmer", "alpha": 2.0 }),
        json!({ "request": "warmer", "lambda": -1.0 }),
    ] {
        let (st, _) = call_json(&app, "POST", &uri, bad).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (st, _) = get_json(&app, &format!("/interpolate?session={sid}&result=img-nope&alpha=0.5")).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call_json(&app, "POST", "/sessions/ses-nope/edit-text", json!({ "request": "warmer" })).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn masked_text_edits_keep_the_background() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let src = test_image();
    let id = upload(&app, &src).await;
    let sid = session(&app, &id).await["id"].as_str().unwrap().to_string();
    let mask = Mask::from_fn(8, 8, |x, _| x < 3);
    let (_, b) = call(&app, "POST", "/images", Body::from(mask.to_png_bytes())).await;
    let mask_id = serde_json::from_slice::<Value>(&b).unwrap()["image_id"].as_str().unwrap().to_string();
    let (st, edit) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/edit-text"),
        json!({ "request": "make it cooler", "mask_id": mask_id }),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{edit}");
    let (_, png) = call(&app, "GET", &format!("/images/{}", edit["result_id"].as_str().unwrap()), Body::empty()).await;
    let out = Image::from_png_bytes(&png).unwrap();
    let src = src.quantized();
    for y in 0..8 {
        for x in 3..8 {
            assert_eq!(out.get(x, y), src.get(x, y));
        }
    }
    let wrong = Mask::from_fn(4, 4, |_, _| true);
    let (_, b) = call(&app, "POST", "/images", Body::from(wrong.to_png_bytes())).await;
    let wrong_id = serde_json::from_slice::<Value>(&b).unwrap()["image_id"].as_str().unwrap().to_string();
    let (st, _) = call_json(
        &app,
        "POST",
        &format!("/sessions/{sid}/edit-text"),
        json!({ "request": "cooler", "mask_id": wrong_id }),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn exemplar_and_cluster_edits() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let sid = session(&app, &upload(&app, &test_image()).await).await["id"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{sid}/edit-exemplar");
    let ex: Vec<String> = fixture().index.entries.iter().take(2).map(|e| e.pair_id.clone()).collect();
    let (st, a) = call_json(&app, "POST", &uri, json!({ "exemplar_ids": ex })).await;
    assert_eq!(st, StatusCode::OK, "{a}");
    let (_, b) = call_json(&app, "POST", &uri, json!({ "exemplar_ids": ex })).await;
    assert_eq!(a["result_id"], b["result_id"]);

    let (st, clusters) = get_json(&app, "/clusters").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(clusters["K"], 3);
    let sizes: u64 = clusters["clusters"].as_array().unwrap().iter().map(|c| c["size"].as_u64().unwrap()).sum();
    assert_eq!(sizes, fixture().index.len() as u64);
    let c0 = clusters["clusters"][0]["cluster"].clone();
    let (st, c) = call_json(&app, "POST", &uri, json!({ "cluster": c0, "alpha": 0.5 })).await;
    assert_eq!(st, StatusCode::OK, "{c}");
    assert!(!c["exemplar_ids"].as_array().unwrap().is_empty());

    let (st, _) = call_json(&app, "POST", &uri, json!({ "exemplar_ids": ["pair-missing"] })).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call_json(&app, "POST", &uri, json!({})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call_json(&app, "POST", &uri, json!({ "cluster": 99 })).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn retrieval_excludes_the_query() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path()));
    let pid = fixture().index.entries[0].pair_id.clone();
    let (st, v) = get_json(&app, &format!("/retrieve?pair_id={pid}&k=3")).await;
    assert_eq!(st, StatusCode::OK);
    let hits = v["neighbors"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert!(hits.iter().all(|h| h["id"] != json!(pid)));
    let (st, _) = get_json(&app, &format!("/retrieve?pair_id={pid}&k=8")).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = get_json(&app, "/retrieve?pair_id=nope").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, result) = {
        let app = router(state(dir.path()));
        let sid = session(&app, &upload(&app, &test_image()).await).await["id"].as_str().unwrap().to_string();
        let (_, e) = call_json(&app, "POST", &format!("/sessions/{sid}/edit-text"), json!({ "request": "warmer" })).await;
        (sid, e["result_id"].as_str().unwrap().to_string())
    };
    let app = router(state(dir.path()));
    let (st, s) = get_json(&app, &format!("/sessions/{sid}")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(s["history"][0]["result_id"], json!(result));
    let (st, _) = call(&app, "GET", &format!("/images/{result}"), Body::empty()).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn full_queue_rejects_work() {
    let q = JobQueue::new(1, 0);
    let (tx, rx) = std::sync::mpsc::channel::<()>();
    let busy = {
        let q = q.clone();
        tokio::spawn(async move { q.run(move || rx.recv().unwrap()).await })
    };
    // let the first job take the only slot
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    let rejected = q.run(|| ()).await.unwrap_err();
    assert_eq!(rejected.status, StatusCode::CONFLICT);
    tx.send(()).unwrap();
    busy.await.unwrap().unwrap();
    q.run(|| ()).await.unwrap();
}
