//! Drives the annotation service over HTTP without any UI: loads a synthetic
//! scene, posts one stroke per class, trains until the overlay reflects the
//! strokes, then saves the segmentation overlay.
//!
//! cargo run --release -p volseg-service --example scripted_client

use std::time::{Duration, Instant};

use serde_json::{json, Value};
use volseg::objective::LossWeights;
use volseg::trainer::propagation::{scribble_annotations, ScribbleConfig};
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg_service::{serve, ServiceConfig, Session};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("volseg-scripted-client");
    let mut spec = SyntheticSceneSpec::standard();
    spec.features = None;
    generate_synthetic_scene(&spec, &dir)?;

    let mut config = ServiceConfig::default();
    config.train.samples_per_ray = 32;
    config.train.loss_weights = LossWeights {
        feature: 0.0,
        ..LossWeights::default()
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, Session::start(config), async {
        let _ = stopped.await;
    }));
    let client = reqwest::Client::new();
    let url = |p: &str| format!("{base}{p}");

    let summary: Value = client.post(url("/api/scene")).json(&json!({ "path": dir })).send().await?.json().await?;
    println!("loaded {} frames, classes {}", summary["frames"].as_array().map_or(0, Vec::len), summary["classes"]);

    let scene = volseg::scene::load_scene(&dir)?;
    let strokes = scribble_annotations(&scene, &ScribbleConfig { frames: Some(vec![0]), ..Default::default() })?;
    let mut revision = 0;
    for s in strokes.strokes() {
        let (a, b) = (s.pixels[0], s.pixels[s.pixels.len() - 1]);
        let receipt: Value = client
            .post(url("/api/annotations"))
            .json(&json!({"frame": 0, "class": s.class, "points": [a, b]}))
            .send()
            .await?
            .json()
            .await?;
        println!("stroke {} for class {}: {} pixels", receipt["id"], s.class, receipt["pixels"]);
        revision = receipt["revision"].as_u64().unwrap_or(0);
    }

    client.post(url("/api/training/start")).send().await?;
    let start = Instant::now();
    loop {
        tokio::time::sleep(Duration::from_secs(2)).await;
        let r = client.get(url("/api/frames/0/segmentation")).send().await?;
        let header = |name: &str| -> u64 { r.headers().get(name).and_then(|v| v.to_str().ok()?.parse().ok()).unwrap_or(0) };
        let (seen, trained) = (header("x-annotation-revision"), header("x-iteration"));
        let status: Value = client.get(url("/api/status")).send().await?.json().await?;
        println!("iteration {} ({:.0}s)", status["iteration"], start.elapsed().as_secs_f64());
        // The overlay must come from a snapshot taken after training on the strokes.
        if seen >= revision && trained > 0 {
            let path = dir.join("segmentation.png");
            std::fs::write(&path, r.bytes().await?)?;
            println!("overlay written to {}", path.display());
            break;
        }
    }
    client.post(url("/api/training/pause")).send().await?;
    let _ = stop.send(());
    server.await??;
    Ok(())
}
