//! Writes the standard synthetic scene to disk, loads it back and prints
//! a per-frame summary. Pass a JSON scene spec to generate a custom scene.
//!
//! cargo run --release -p volseg --example synth_scene -- [out_dir] [spec.json]

use std::path::PathBuf;

use volseg::scene::load_scene;
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic-scene".into()));
    let spec = match args.next() {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(&path)?)?,
        None => SyntheticSceneSpec::standard(),
    };
    let manifest = generate_synthetic_scene(&spec, &out)?;
    println!("wrote {} frames to {}", manifest.frames.len(), out.display());

    let scene = load_scene(&out)?;
    println!("near {:.3}, far {:.3}, {} classes", scene.near, scene.far, scene.num_classes());
    for frame in &scene.frames {
        let labels = frame.labels.as_deref().unwrap_or_default();
        let mut counts = vec![0usize; scene.num_classes()];
        for &c in labels {
            counts[c as usize] += 1;
        }
        let depth = frame.depth.as_deref().unwrap_or_default();
        let valid: Vec<f32> = depth.iter().copied().filter(|&d| d > 0.0).collect();
        let mean = valid.iter().sum::<f32>() / valid.len().max(1) as f32;
        println!(
            "{:>9} {:?}  class pixels {:?}  mean depth {:.3}  features {}",
            frame.id,
            frame.split,
            counts,
            mean,
            frame.features.as_ref().map_or("none".into(), |f| format!("{}x{}x{}", f.width, f.height, f.dim)),
        );
    }
    Ok(())
}
