use std::path::Path;
use std::time::{Duration, Instant};

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use volseg::objective::LossWeights;
use volseg::scene::decode_class_png;
use volseg::trainer::propagation::{scribble_annotations, ScribbleConfig};
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg_service::{serve, ServiceConfig, Session};

pub struct Server {
    base: String,
    client: Client,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start(config: ServiceConfig) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let session = Session::start(config);
        let (tx, rx) = tokio::sync::oneshot::channel();
        let task = tokio::spawn(serve(listener, session, async {
            let _ = rx.await;
        }));
        Self {
            base,
            client: Client::new(),
            stop: Some(tx),
            task,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn get_json(&self, path: &str) -> Value {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        assert!(r.status().is_success(), "GET {path}: {}", r.status());
        r.json().await.unwrap()
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.task.await.unwrap().unwrap();
    }
}

fn service_config() -> ServiceConfig {
    let mut config = ServiceConfig::default();
    config.train.samples_per_ray = 32;
    config.train.loss_weights = LossWeights {
        feature: 0.0,
        ..LossWeights::default()
    };
    config
}

fn scene(dir: &Path) {
    let mut spec = SyntheticSceneSpec::standard();
    spec.features = None;
    generate_synthetic_scene(&spec, dir).unwrap();
}

/// Reads server-sent events until one named `name` satisfies `pred`.
pub async fn wait_for_event(resp: &mut reqwest::Response, name: &str, timeout: Duration, pred: impl Fn(&Value) -> bool) -> Value {
    let deadline = Instant::now() + timeout;
    let mut buf = String::new();
    loop {
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let mut event = "";
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim());
                }
            }
            if event == name {
                let v: Value = serde_json::from_str(&data).unwrap();
                if pred(&v) {
                    return v;
                }
            }
        }
        let left = deadline.saturating_duration_since(Instant::now());
        assert!(!left.is_zero(), "no `{name}` event before the deadline");
        let chunk = tokio::time::timeout(left, resp.chunk()).await.expect("event stream timed out").unwrap();
        buf.push_str(&String::from_utf8_lossy(&chunk.expect("event stream ended")));
    }
}

/// Full scripted client session against a fresh server; panics on any
/// contract violation.
pub async fn scripted_client_session() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let server = Server::start(service_config()).await;

    let r = server.client.get(server.url("/api/scene")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let (code, summary) = server.post("/api/scene", json!({ "path": dir.path() })).await;
    assert_eq!(code, StatusCode::OK, "{summary}");
    assert_eq!(summary["frames"].as_array().unwrap().len(), 16);
    assert_eq!(summary["classes"].as_array().unwrap().len(), 3);
    let status = server.get_json("/api/status").await;
    assert_eq!(status["state"], "paused");

    let rgb = server.client.get(server.url("/api/frames/0/rgb")).send().await.unwrap();
    assert_eq!(rgb.headers()["content-type"], "image/png");
    assert_eq!(&rgb.bytes().await.unwrap()[..4], b"\x89PNG");

    // Errors.
    let (code, _) = server.post("/api/annotations", json!({"frame": 99, "class": 0, "points": [[1, 1]]})).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, body) = server.post("/api/annotations", json!({"frame": 0, "class": 7, "points": [[1, 1]]})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("class"));
    let (code, _) = server.post("/api/annotations", json!({"frame": 0, "class": 0, "points": []})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = server.post("/api/annotations", json!({"frame": 0, "class": 0, "points": [[-9, -9]]})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = server.post("/api/annotations", json!({"frame": 0, "class": 0, "points": "nope"})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let r = server.client.get(server.url("/api/frames/42/segmentation")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    // One-point stroke with radius 0 labels exactly one pixel; undo removes it.
    let (code, receipt) = server.post("/api/annotations", json!({"frame": 1, "class": 0, "points": [[3, 3]], "radius": 0})).await;
    assert_eq!(code, StatusCode::CREATED);
    assert_eq!(receipt["pixels"], 1);
    let id = receipt["id"].as_u64().unwrap();
    let r = server.client.delete(server.url(&format!("/api/annotations/{id}"))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let r = server.client.delete(server.url(&format!("/api/annotations/{id}"))).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert_eq!(server.get_json("/api/status").await["labels"], 0);

    // Scribbles on frame 0, one per class, posted as two-point polylines.
    let dataset = volseg::scene::load_scene(dir.path()).unwrap();
    let scribbles = scribble_annotations(
        &dataset,
        &ScribbleConfig {
            frames: Some(vec![0]),
            ..ScribbleConfig::default()
        },
    )
    .unwrap();
    let mut expected = Vec::new();
    let mut revision = 0;
    for s in scribbles.strokes() {
        let (a, b) = (s.pixels[0], s.pixels[s.pixels.len() - 1]);
        let body = json!({"frame": 0, "class": s.class, "points": [[a[0], a[1]], [b[0], b[1]]], "radius": 0});
        let (code, receipt) = server.post("/api/annotations", body).await;
        assert_eq!(code, StatusCode::CREATED, "{receipt}");
        assert_eq!(receipt["pixels"].as_u64().unwrap() as usize, s.pixels.len());
        revision = receipt["revision"].as_u64().unwrap();
        expected.extend(s.pixels.iter().map(|p| (*p, s.class)));
    }
    let strokes = server.get_json("/api/annotations").await;
    assert_eq!(strokes.as_array().unwrap().len(), scribbles.strokes().len());

    let mut events = server.client.get(server.url("/api/events")).send().await.unwrap();
    wait_for_event(&mut events, "status", Duration::from_secs(5), |_| true).await;

    let (code, status) = server.post("/api/training/start", json!({})).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(status["state"], "running");
    let first = server.get_json("/api/status").await["iteration"].as_u64().unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let second = server.get_json("/api/status").await["iteration"].as_u64().unwrap();
    assert!(second >= first);

    let update = wait_for_event(&mut events, "segmentation", Duration::from_secs(300), |v| {
        v["frame"] == 0 && v["revision"].as_u64() >= Some(revision)
    })
    .await;
    let seg = server.client.get(server.url("/api/frames/0/segmentation")).send().await.unwrap();
    assert_eq!(seg.status(), StatusCode::OK);
    let version: u64 = seg.headers()["x-overlay-version"].to_str().unwrap().parse().unwrap();
    assert!(version >= update["version"].as_u64().unwrap());
    let (w, _, classes) = decode_class_png(&seg.bytes().await.unwrap(), Path::new("segmentation")).unwrap();
    let mismatched: Vec<_> = expected
        .iter()
        .filter(|([x, y], c)| classes[(y * w + x) as usize] as u32 != *c)
        .collect();
    assert!(mismatched.is_empty(), "annotated pixels not matching their class: {mismatched:?}");

    for kind in ["render", "depth", "features"] {
        let r = server.client.get(server.url(&format!("/api/frames/0/{kind}"))).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK, "{kind}");
    }

    // Pausing freezes the iteration; annotations are still accepted.
    let (_, paused) = server.post("/api/training/pause", json!({})).await;
    assert_eq!(paused["state"], "paused");
    let frozen = server.get_json("/api/status").await["iteration"].as_u64().unwrap();
    let (code, _) = server.post("/api/annotations", json!({"frame": 2, "class": 1, "points": [[10, 10]], "radius": 1})).await;
    assert_eq!(code, StatusCode::CREATED);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let status = server.get_json("/api/status").await;
    assert_eq!(status["iteration"].as_u64().unwrap(), frozen);
    assert_eq!(status["labels"].as_u64().unwrap() as usize, expected.len() + 5);

    // New classes are usable immediately.
    let (code, class) = server.post("/api/classes", json!({"name": "mug"})).await;
    assert_eq!(code, StatusCode::CREATED);
    assert_eq!(class["id"], 3);
    let (code, _) = server.post("/api/annotations", json!({"frame": 2, "class": 3, "points": [[20, 20]]})).await;
    assert_eq!(code, StatusCode::CREATED);
    server.post("/api/training/start", json!({})).await;
    let start = server.get_json("/api/status").await["iteration"].as_u64().unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let s = server.get_json("/api/status").await;
        assert!(s["diagnostic"].is_null(), "{s}");
        if s["iteration"].as_u64().unwrap() >= start + 5 {
            break;
        }
        assert!(Instant::now() < deadline, "training stalled after adding a class");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    drop(events);
    server.stop().await;
}
