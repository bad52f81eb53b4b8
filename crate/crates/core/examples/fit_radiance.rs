//! Fits a color/depth-only field to the standard synthetic scene and reports
//! held-out PSNR as training progresses.
//!
//! cargo run --release -p volseg --example fit_radiance -- [iterations] [encoder]

use std::time::Instant;

use volseg::encoding::EncoderMode;
use volseg::objective::LossWeights;
use volseg::scene::load_scene;
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg::trainer::{evaluate_psnr, RenderOptions, TrainConfig, Trainer};

fn main() -> volseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);
    let mode = match args.next().as_deref() {
        Some("freq") => EncoderMode::Freq,
        Some("hashgrid") => EncoderMode::HashGrid,
        _ => EncoderMode::Hybrid,
    };

    let dir = std::env::temp_dir().join("volseg-fit-radiance");
    let mut spec = SyntheticSceneSpec::standard();
    spec.features = None;
    generate_synthetic_scene(&spec, &dir)?;
    let scene = load_scene(&dir)?;

    let mut config = TrainConfig::for_mode(mode, scene.num_classes());
    config.loss_weights = LossWeights {
        depth: 0.05,
        ..LossWeights::RADIANCE_ONLY
    };
    config.iterations = iterations;
    let mut trainer = Trainer::new(config)?;
    let index = scene.empty_annotations().index();
    let test = scene.test_frames();
    let options = RenderOptions::from_config(trainer.config());
    let start = Instant::now();
    trainer.train(&scene, &index, iterations, |t, loss| {
        let psnr = evaluate_psnr(t.field(), &scene, &test, &options)?;
        println!(
            "iter {:5}  loss {:.5}  held-out psnr {:.2} dB  ({:.1}s)",
            t.iteration(),
            loss.total,
            psnr,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}
