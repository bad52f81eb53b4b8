//! Compresses synthetic rank-32 features in R^384 to 64 dimensions and shows
//! the effect of the latent sparsity weight.
//!
//! cargo run --release -p volseg --example autoencoder

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volseg::features::{low_rank_samples, AutoencoderConfig, FeatureAutoencoder};

fn main() -> volseg::Result<()> {
    let (ambient, rank) = (384, 32);
    // One draw so both parts share the subspace.
    let all = low_rank_samples(4096 + 512, ambient, rank, 1);
    let (train, held_out) = all.split_at(4096 * ambient);
    for sparsity in [0.0, 10.0] {
        let config = AutoencoderConfig {
            sparsity,
            iterations: 3000,
            ..AutoencoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ae = FeatureAutoencoder::new(ambient, &config, &mut rng)?;
        let loss = ae.train(train, &config)?;
        println!(
            "lambda {sparsity:>4}: final loss {:.5}, held-out relative error {:.4}, mean latent L1 {:.4}",
            loss.total,
            ae.relative_reconstruction_error(held_out)?,
            ae.mean_latent_l1(held_out)?
        );
    }
    Ok(())
}
