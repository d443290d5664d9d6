mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use common::{noisy_params, write_shapes, TEMPLATE};
use serde_json::{json, Value};
use shapewords::backends::{Denoiser, Latent, LatentShape, NoiseSchedule, PromptEmbedding};
use shapewords::generation::{generate_plain, SamplerConfig};
use shapewords::service::{RunStore, ServiceState, ShapeRegistry};
use shapewords::{load_backend_suite, BackendConfig, BackendSuite, Image};
use shapewords_cli::server::{router, AppState, PoolConfig};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    suite: BackendSuite,
}

fn fixture_with(suite: BackendSuite, pool: PoolConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    write_shapes(&shapes);
    let service = ServiceState::new(
        suite.clone(),
        Some(noisy_params(5)),
        ShapeRegistry::from_dir(&shapes).unwrap(),
        Some(RunStore::new(dir.path().join("runs"))),
    );
    Fixture {
        _dir: dir,
        app: router(AppState::ready(service, pool)),
        suite,
    }
}

fn fixture() -> Fixture {
    fixture_with(load_backend_suite(&BackendConfig::toy(0)).unwrap(), PoolConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn fields(body: &Value) -> Vec<String> {
    body["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap().to_string())
        .collect()
}

fn png(b64: &Value) -> Vec<u8> {
    BASE64.decode(b64.as_str().unwrap()).unwrap()
}

#[tokio::test]
async fn health_reports_backend() {
    let f = fixture();
    let (status, body) = call(&f.app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "status": "ok", "backend": "toy" }));
}

#[tokio::test]
async fn endpoints_return_503_while_loading() {
    let state = AppState::loading(PoolConfig::default());
    let app = router(state.clone());
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let req = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE });
    assert_eq!(
        call(&app, "POST", "/generate", Some(req)).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(call(&app, "GET", "/shapes", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.fail("no weights".into());
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["status"], "error");
}

#[tokio::test]
async fn shapes_are_listed_and_encoded() {
    let f = fixture();
    let (status, body) = call(&f.app, "GET", "/shapes", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body["shapes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["box", "sphere"]);
    let (status, body) = call(&f.app, "POST", "/encode_shape", Some(json!({ "shape_id": "box" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["tokens"].as_array().unwrap().len(), 65);
    assert_eq!(body["cached"], false);
    let (_, body) = call(&f.app, "POST", "/encode_shape", Some(json!({ "shape_id": "box" }))).await;
    assert_eq!(body["cached"], true);
    let (_, body) = call(&f.app, "GET", "/shapes", None).await;
    assert_eq!(body["shapes"][0]["cached"], true);
    assert_eq!(
        call(&f.app, "POST", "/encode_shape", Some(json!({ "shape_id": "cone" })))
            .await
            .0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn out_of_range_lambda_is_rejected_by_name() {
    let f = fixture();
    let req = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE, "lambda": 1.5 });
    let (status, body) = call(&f.app, "POST", "/generate", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&body), ["lambda"]);
}

#[tokio::test]
async fn malformed_bodies_name_the_field() {
    let f = fixture();
    let (status, body) = call(&f.app, "POST", "/generate", Some(json!({ "prompt_template": TEMPLATE }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&body), ["shape_id"]);
    let req = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE, "lambda": "high" });
    let (status, body) = call(&f.app, "POST", "/generate", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&body), ["lambda"]);
    let req = json!({ "shape_id": "sphere", "prompt_template": "no placeholder", "steps": 0 });
    let (status, body) = call(&f.app, "POST", "/generate", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&body), ["prompt_template", "steps"]);
}

#[tokio::test]
async fn unknown_shapes_and_runs_are_404() {
    let f = fixture();
    let req = json!({ "shape_id": "cone", "prompt_template": TEMPLATE });
    assert_eq!(call(&f.app, "POST", "/generate", Some(req)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        call(&f.app, "GET", "/runs/ffffffffffffffff", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(call(&f.app, "GET", "/nowhere", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sweep_starts_with_the_plain_prompt_image() {
    let f = fixture();
    let req = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE, "lambdas": [0.0, 1.0], "seed": 4, "steps": 20 });
    let (status, body) = call(&f.app, "POST", "/sweep", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let images = body["images"].as_array().unwrap();
    assert_eq!(images.len(), 2);
    let plain = generate_plain(
        &f.suite,
        TEMPLATE,
        "chair",
        &SamplerConfig::default().with_steps(20).with_seed(4),
    )
    .unwrap();
    assert_eq!(png(&images[0]["image"]), plain.to_png_bytes());
    assert_ne!(png(&images[1]["image"]), plain.to_png_bytes());
    let bad = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE, "lambdas": [0.5, 3.0] });
    let (status, body) = call(&f.app, "POST", "/sweep", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&body), ["lambdas[1]"]);
}

#[tokio::test]
async fn identical_requests_give_identical_responses_and_stored_runs() {
    let f = fixture();
    let req = json!({ "shape_id": "box", "prompt_template": TEMPLATE, "lambda": 0.7, "seed": 8, "steps": 15 });
    let (s1, mut a) = call(&f.app, "POST", "/generate", Some(req.clone())).await;
    let (s2, mut b) = call(&f.app, "POST", "/generate", Some(req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert!(a["timing_ms"].is_u64());
    a["timing_ms"] = Value::Null;
    b["timing_ms"] = Value::Null;
    assert_eq!(a.to_string(), b.to_string());
    let image = Image::from_png_bytes(&png(&a["image"])).unwrap();
    assert_eq!((image.width(), image.height()), (64, 64));
    let span = a["layout"]["shape_span"].as_array().unwrap();
    assert!(a["layout"]["eos_index"].as_u64().unwrap() > span[1].as_u64().unwrap());

    let (status, run) = call(&f.app, "GET", &format!("/runs/{}", a["run_id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(run["image"], a["image"]);
    assert_eq!(run["request"]["lambda"], 0.7);
    assert_eq!(run["metrics"]["backend"], "toy");
}

#[tokio::test]
async fn handoff_requests_are_served() {
    let f = fixture();
    let req = json!({
        "shape_id": "sphere", "prompt_template": TEMPLATE, "steps": 10,
        "handoff_k": 40.0, "depth_ref": 30.0, "mode": "cnet-stop"
    });
    let (status, body) = call(&f.app, "POST", "/generate", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let (_, run) = call(&f.app, "GET", &format!("/runs/{}", body["run_id"].as_str().unwrap()), None).await;
    assert_eq!(run["metrics"]["trace"]["phase_one_calls"], 4);
    assert_eq!(run["metrics"]["trace"]["shape2clip_calls"], 0);
    let bad = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE, "handoff_k": 140.0, "mode": "x" });
    let (status, body) = call(&f.app, "POST", "/generate", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&body), ["handoff_k", "mode"]);
}

struct SlowDenoiser(Arc<dyn Denoiser>);

impl Denoiser for SlowDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.0.latent_shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.0.schedule()
    }

    fn predict_noise(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding) -> shapewords::Result<Latent> {
        std::thread::sleep(Duration::from_millis(40));
        self.0.predict_noise(noisy, t, cond)
    }

    fn encode_image(&self, image: &Image) -> shapewords::Result<Latent> {
        self.0.encode_image(image)
    }

    fn decode_latent(&self, latent: &Latent) -> shapewords::Result<Image> {
        self.0.decode_latent(latent)
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn full_queue_answers_429() {
    let mut suite = load_backend_suite(&BackendConfig::toy(0)).unwrap();
    suite.denoiser = Arc::new(SlowDenoiser(suite.denoiser.clone()));
    let f = fixture_with(suite, PoolConfig { workers: 1, queue: 0 });
    let req = json!({ "shape_id": "sphere", "prompt_template": TEMPLATE, "steps": 10 });
    let first = {
        let app = f.app.clone();
        let req = req.clone();
        tokio::spawn(async move { call(&app, "POST", "/generate", Some(req)).await.0 })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    let (second, body) = call(&f.app, "POST", "/generate", Some(req.clone())).await;
    assert_eq!(second, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(body["error"], "busy");
    assert_eq!(first.await.unwrap(), StatusCode::OK);
    assert_eq!(call(&f.app, "POST", "/generate", Some(req)).await.0, StatusCode::OK);
}
