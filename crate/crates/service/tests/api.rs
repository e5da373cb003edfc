use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use skipforge_core::pipeline::EditRequest;
use skipforge_core::scheduler::ScheduleConfig;
use skipforge_core::train::{train, TrainConfig};
use skipforge_core::unet::UNetConfig;
use skipforge_service::store::{Job, JobKind};
use skipforge_service::{build, AppState, ServiceConfig};
use tower::ServiceExt;

fn checkpoint_bytes() -> &'static [u8] {
    static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
    BYTES.get_or_init(|| {
        let out = train(&UNetConfig::smoke(), &TrainConfig::smoke(), ScheduleConfig::default(), |_| {}).unwrap();
        out.checkpoint.to_bytes().unwrap()
    })
}

struct Harness {
    _dir: tempfile::TempDir,
    state: AppState,
    router: Router,
    config: ServiceConfig,
}

fn config_in(dir: &Path) -> ServiceConfig {
    let ckpts = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpts).unwrap();
    if !ckpts.join("smoke.ckpt").exists() {
        std::fs::write(ckpts.join("smoke.ckpt"), checkpoint_bytes()).unwrap();
    }
    ServiceConfig { store_root: dir.join("store"), checkpoint_dir: ckpts, ..Default::default() }
}

fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path());
    let (state, router) = build(&config).unwrap();
    Harness { _dir: dir, state, router, config }
}

impl Harness {
    async fn call(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.call(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    async fn get_json(&self, uri: &str) -> (StatusCode, Value) {
        let (s, b) = self.get(uri).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn post(&self, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
        let req = Request::post(uri).header("content-type", "application/json").body(body.into()).unwrap();
        let (s, b) = self.call(req).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn submit(&self, body: &Value) -> String {
        let (status, v) = self.post("/runs", body.to_string()).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        v["run_id"].as_str().unwrap().to_string()
    }

    async fn wait(&self, run_id: &str) -> Value {
        let start = Instant::now();
        loop {
            let (status, job) = self.get_json(&format!("/runs/{run_id}")).await;
            assert_eq!(status, StatusCode::OK);
            match job["state"].as_str().unwrap() {
                "done" => return job,
                "failed" => panic!("run failed: {job}"),
                _ => {}
            }
            assert!(start.elapsed() < Duration::from_secs(600), "run {run_id} did not finish");
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }
}

fn small_request() -> Value {
    let mut req = EditRequest::canonical_default();
    req.sampler.num_steps = 5;
    serde_json::to_value(req).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn submit_poll_fetch_and_replay() {
    let h = harness();
    let id = h.submit(&small_request()).await;
    let job = h.wait(&id).await;
    assert_eq!(job["kind"], "edit");
    for name in ["image_a", "baseline", "edited"] {
        let (status, png) = h.get(&format!("/runs/{id}/images/{name}")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(skipforge_core::imageio::decode_png(&png).is_ok());
    }
    let (status, metrics) = h.get_json(&format!("/runs/{id}/metrics")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(metrics["report"]["structure_dist"].as_f64().unwrap() >= 0.0);

    // Replaying the stored request reproduces every output byte for byte.
    let (_, stored) = h.get(&format!("/runs/{id}/request")).await;
    let (status, v) = h.post("/runs", stored).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let replay = v["run_id"].as_str().unwrap().to_string();
    assert_ne!(replay, id);
    assert_eq!(replay[..12], id[..12]);
    h.wait(&replay).await;
    for name in ["image_a", "baseline", "edited"] {
        let a = h.get(&format!("/runs/{id}/images/{name}")).await.1;
        let b = h.get(&format!("/runs/{replay}/images/{name}")).await.1;
        assert_eq!(a, b, "{name} differs on replay");
    }
    let (_, list) = h.get_json("/runs?limit=1").await;
    assert_eq!(list["total"], 2);
    assert_eq!(list["runs"].as_array().unwrap().len(), 1);
    assert_eq!(h.state.store.index_len().unwrap(), h.state.store.folder_count().unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_requests_name_the_field() {
    let h = harness();
    let cases = [
        (json!({"plan": {"window": [900, 400]}}), "plan.window"),
        (json!({"plan": {"mask": {"variant": "period", "param": 0}}}), "plan.mask.param"),
        (json!({"plan": {"taps": [99]}}), "plan.taps"),
        (json!({"plan": {"gamma": "high"}}), "plan.gamma"),
        (json!({"sampler": {"num_steps": 0}}), "sampler.num_steps"),
        (json!({"target_cond": 64}), "target_cond"),
        (json!({"source": {"seed": null}}), "source.seed"),
        (json!({"plan": {"bogus": 1}}), "plan"),
    ];
    for (patch, field) in cases {
        let mut body = small_request();
        merge(&mut body, &patch);
        let (status, v) = h.post("/runs", body.to_string()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{patch}: {v}");
        assert!(v["field"].as_str().unwrap().starts_with(field), "{patch}: {v}");
    }
    let (status, _) = h.post("/runs", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = h.post("/runs?checkpoint=missing", small_request().to_string()).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{v}");
    assert_eq!(h.state.store.index_len().unwrap(), 0);
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_and_unfinished_runs() {
    let h = harness();
    assert_eq!(h.get("/runs/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.get("/runs/nope/images/edited").await.0, StatusCode::NOT_FOUND);
    // A run that exists but never reached a worker.
    let job = Job::new("parked-1".into(), JobKind::Edit, "smoke".into(), "x".into());
    h.state.store.create(&job, "{}").unwrap();
    let (status, v) = h.get_json("/runs/parked-1/images/edited").await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
}

#[tokio::test(flavor = "multi_thread")]
async fn identical_submissions_get_distinct_runs() {
    let h = harness();
    let a = h.submit(&small_request()).await;
    let b = h.submit(&small_request()).await;
    assert_ne!(a, b);
    h.wait(&a).await;
    h.wait(&b).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn sweep_of_eight_points_yields_eight_rows() {
    let h = harness();
    let body = json!({
        "base": small_request(),
        "grid": {
            "taps": [[4], [4, 5]],
            "windows": [[0, 1000], [400, 900]],
            "gammas": [0.0, 1.0],
            "masks": [{"variant": "full", "param": null}]
        }
    });
    let (status, v) = h.post("/sweeps", body.to_string()).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let id = v["run_id"].as_str().unwrap();
    let job = h.wait(id).await;
    assert_eq!(job["kind"], "sweep");
    let (status, csv) = h.get(&format!("/runs/{id}/results.csv")).await;
    assert_eq!(status, StatusCode::OK);
    let table = skipforge_core::pipeline::SweepTable::from_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert_eq!(table.checkpoint_hash, job["checkpoint_hash"].as_str().unwrap());

    let (status, v) = h.post("/sweeps", json!({"grid": {"gammas": []}}).to_string()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    assert_eq!(v["field"], "grid.gammas");
}

#[tokio::test(flavor = "multi_thread")]
async fn uploaded_images_can_be_edited() {
    let h = harness();
    let spec = &skipforge_core::synthdata::generate_specs(1, 3)[0];
    let png =
        skipforge_core::imageio::tensor_png(&skipforge_core::synthdata::render_scene_sized(spec, 32).image).unwrap();
    let (status, v) = h.post("/images", png).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let image_id = v["image_id"].as_str().unwrap();
    let mut body = small_request();
    body["mode"] = json!("edit_real");
    body["source"] = json!({"seed": null, "cond": spec.class_id(), "image": image_id});
    let id = h.submit(&body).await;
    let job = h.wait(&id).await;
    assert!(job["outputs"].as_array().unwrap().contains(&json!("input.png")));

    body["source"]["image"] = json!("0000000000000000");
    let (status, v) = h.post("/runs", body.to_string()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "source.image");
    assert_eq!(h.post("/images", "not a png").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn group_sweep_runs_expose_a_montage() {
    let h = harness();
    let mut body = small_request();
    body["mode"] = json!("group_sweep");
    let id = h.submit(&body).await;
    h.wait(&id).await;
    let (status, png) = h.get(&format!("/runs/{id}/images/montage")).await;
    assert_eq!(status, StatusCode::OK);
    let img = skipforge_core::imageio::decode_png(&png).unwrap();
    assert_eq!(img.shape()[3], (96 + 4) * 7 + 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn schema_and_checkpoints_are_published() {
    let h = harness();
    let (status, schema) = h.get_json("/schema").await;
    assert_eq!(status, StatusCode::OK);
    let default = EditRequest::canonical_default().canonical_json().unwrap();
    assert_eq!(schema["default_request"], serde_json::from_str::<Value>(&default).unwrap());
    assert_eq!(schema["edit_request"]["title"], "EditRequest");
    let (status, list) = h.get_json("/checkpoints").await;
    assert_eq!(status, StatusCode::OK);
    let ck = &list["checkpoints"][0];
    assert_eq!(ck["name"], "smoke");
    assert_eq!(ck["default"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_marks_unfinished_runs_interrupted() {
    let h = harness();
    let job = Job::new("stuck-1".into(), JobKind::Edit, "smoke".into(), "x".into());
    h.state.store.create(&job, "{}").unwrap();
    let (_, router) = build(&h.config).unwrap();
    let resp = router.oneshot(Request::get("/runs/stuck-1").body(Body::empty()).unwrap()).await.unwrap();
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["state"], "failed");
    assert_eq!(v["reason"], "interrupted");
}

#[tokio::test(flavor = "multi_thread")]
async fn static_ui_is_served_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>ui</html>").unwrap();
    let config = ServiceConfig { static_dir: Some(ui), ..config_in(dir.path()) };
    let (_, router) = build(&config).unwrap();
    let resp = router.oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>ui</html>");
}
