//! Trains, checkpoints, resumes, and checks that the resumed run continues
//! exactly where an uninterrupted run would be.
//!
//! cargo run --release -p volseg --example checkpoint_resume

use volseg::objective::LossWeights;
use volseg::scene::{load_checkpoint, load_scene, save_checkpoint};
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg::trainer::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("volseg-checkpoint-resume");
    let mut spec = SyntheticSceneSpec::standard();
    spec.features = None;
    generate_synthetic_scene(&spec, &dir)?;
    let scene = load_scene(&dir)?;
    let index = scene.empty_annotations().index();

    let mut config = TrainConfig::default();
    config.samples_per_ray = 16;
    config.batch_size = 128;
    config.loss_weights = LossWeights {
        feature: 0.0,
        ..LossWeights::default()
    };

    let mut straight = Trainer::new(config.clone())?;
    straight.train(&scene, &index, 40, |_, _| Ok(()))?;

    let mut first = Trainer::new(config.clone())?;
    first.train(&scene, &index, 20, |_, _| Ok(()))?;
    let path = dir.join("half.vsck");
    save_checkpoint(&path, &first.checkpoint())?;
    let mut resumed = Trainer::from_checkpoint(config, &load_checkpoint(&path)?)?;
    resumed.train(&scene, &index, 20, |_, _| Ok(()))?;

    let same = straight.checkpoint().to_bytes()? == resumed.checkpoint().to_bytes()?;
    println!("checkpoint {} bytes", std::fs::metadata(&path)?.len());
    println!("resumed run identical to uninterrupted run: {same}");
    Ok(())
}
