//! Trains each encoder variant from one short scribble per class on two
//! views and reports held-out segmentation IoU.
//!
//! cargo run --release -p volseg --example label_propagation -- [iterations] [seeds]

use std::path::PathBuf;

use volseg::scene::{load_scene, prepare_feature_targets};
use volseg::trainer::propagation::{run_propagation, scribble_annotations, ScribbleConfig, Variant};
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg::trainer::TrainConfig;

fn main() -> volseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(500);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);

    let dir = PathBuf::from("label-propagation-scene");
    generate_synthetic_scene(&SyntheticSceneSpec::standard(), &dir)?;
    let mut scene = load_scene(&dir)?;
    let mut base = TrainConfig::default();
    base.iterations = iterations;
    base.samples_per_ray = 32;
    base.autoencoder.iterations = 3000;
    prepare_feature_targets(&mut scene, &base.autoencoder)?;
    let annotations = scribble_annotations(&scene, &ScribbleConfig::default())?;
    println!("{} labeled pixels", annotations.labeled_pixel_count());

    for variant in [Variant::HybridFeatures, Variant::HybridNoFeatures, Variant::HashGridOnly] {
        let mut total = 0.0;
        for seed in 0..seeds {
            let r = run_propagation(&scene, &annotations, &base, variant, seed)?;
            println!("{:>22} seed {seed}: mIoU {:.3}  per class {:.3?}", variant.name(), r.iou.miou, r.iou.per_class);
            total += r.iou.miou;
        }
        println!("{:>22} mean mIoU {:.3}", variant.name(), total / seeds as f64);
    }
    Ok(())
}
