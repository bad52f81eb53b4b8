//! Compares analytic gradients of the full training objective with central
//! finite differences for every parameter group of a random hybrid field.
//!
//! cargo run --release -p volseg --example gradient_check -- [rays]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::encoding::EncoderMode;
use volseg::field::{Field, FieldConfig, ParamGroup};
use volseg::objective::{gradient_check, BatchSamples, LossWeights, RayBatch};

fn main() -> volseg::Result<()> {
    let rays: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(32);
    let config = FieldConfig::for_mode(EncoderMode::Hybrid, 3);
    let mut field: Field<f64> = Field::new(config.clone())?;
    // Tables start near zero; spread them so every level contributes.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in field.group_mut(ParamGroup::HashGrid) {
        *v = rng.random_range(-0.5..0.5);
    }
    let batch = RayBatch::random(rays, config.num_classes, config.feature_dim, 2);
    let samples = BatchSamples::draw(&batch.rays, 32, true, &mut rng);
    let weights = LossWeights {
        depth: 0.1,
        semantic: 1.0,
        feature: 0.5,
    };
    let start = std::time::Instant::now();
    for (group, err) in gradient_check(&mut field, &batch, &samples, &weights, 24, 1e-6, 3)? {
        println!("{:>10}: max relative error {err:.2e}", group.name());
    }
    println!("{} rays, {:.1}s", rays, start.elapsed().as_secs_f64());
    Ok(())
}
