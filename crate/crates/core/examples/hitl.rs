//! Simulated interactive annotation: after pretraining, each round labels
//! five misclassified pixels and trains 250 steps. Prints the mIoU curve.
//!
//! cargo run --release -p volseg --example hitl -- [variant] [rounds] [pretrain]
//! where variant is `features` (hybrid with feature loss) or `freq`.

use std::path::PathBuf;

use volseg::scene::{load_scene, prepare_feature_targets};
use volseg::trainer::hitl::{run_hitl, HitlConfig};
use volseg::trainer::propagation::Variant;
use volseg::trainer::synth::{generate_synthetic_scene, SyntheticSceneSpec};
use volseg::trainer::{TrainConfig, Trainer};

fn main() -> volseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant = match args.next().as_deref() {
        Some("freq") => Variant::FreqNoFeatures,
        _ => Variant::HybridFeatures,
    };
    let rounds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(12);
    let pretrain: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(500);

    let dir = PathBuf::from("hitl-scene");
    generate_synthetic_scene(&SyntheticSceneSpec::standard(), &dir)?;
    let mut scene = load_scene(&dir)?;
    let mut base = TrainConfig::default();
    base.samples_per_ray = 32;
    base.autoencoder.iterations = 3000;
    prepare_feature_targets(&mut scene, &base.autoencoder)?;

    let mut trainer = Trainer::new(variant.configure(&base))?;
    let mut annotations = scene.empty_annotations();
    let config = HitlConfig {
        pretrain_iterations: pretrain,
        rounds,
        ..HitlConfig::default()
    };
    let outcome = run_hitl(&scene, &mut trainer, &mut annotations, &config, |r| {
        println!(
            "round {:>2}  iteration {:>5}  labels {:>3}  mIoU {:.3}",
            r.round.unwrap_or(0),
            r.iteration,
            r.labels,
            r.miou.unwrap_or(f64::NAN)
        );
    })?;
    match outcome.rounds_to(0.8) {
        Some(r) => println!("{}: 80% mIoU after {r} rounds", variant.name()),
        None => println!("{}: 80% mIoU not reached", variant.name()),
    }
    Ok(())
}
