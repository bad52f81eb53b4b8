//! False-color views of raw image features and of their autoencoder
//! compression, projected on the top three principal components.
//!
//! cargo run --release -p volseg --example pca_features -- [out_dir]

use std::path::PathBuf;

use volseg::features::{pca_rgb, AutoencoderConfig, FeatureMap};
use volseg::scene::{encode_rgb_png, load_scene, prepare_feature_targets};
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};

fn write(path: PathBuf, map: &FeatureMap) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::write(&path, encode_rgb_png(map.width, map.height, &pca_rgb(map, 4096)))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pca-out".into()));
    let scene_dir = out.join("scene");
    generate_synthetic_scene(&SyntheticSceneSpec::standard(), &scene_dir)?;
    let mut scene = load_scene(&scene_dir)?;
    let config = AutoencoderConfig {
        iterations: 2000,
        ..AutoencoderConfig::default()
    };
    prepare_feature_targets(&mut scene, &config)?;
    for frame in scene.frames.iter().take(3) {
        if let (Some(raw), Some(enc)) = (&frame.features, &frame.targets) {
            write(out.join(format!("{}_raw.png", frame.id)), raw)?;
            write(out.join(format!("{}_encoded.png", frame.id)), enc)?;
        }
    }
    Ok(())
}
