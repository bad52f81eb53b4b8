//! Compares the three position encoders on a line through the scene cube.
//!
//! cargo run --release -p volseg --example encodings

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::encoding::{freq_encode_vec, EncoderMode, HashGridConfig, PositionEncoder, POSITION_FREQUENCIES};

fn main() -> volseg::Result<()> {
    let grid = HashGridConfig::default();
    println!("hash grid: {} levels, {} features per entry, T = {}", grid.num_levels, grid.features_per_entry, grid.table_size);
    for level in 0..grid.num_levels {
        println!("  level {level}: {} cells per axis", grid.level_resolution(level));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [EncoderMode::Freq, EncoderMode::HashGrid, EncoderMode::Hybrid] {
        let mut enc: PositionEncoder<f64> = PositionEncoder::new(mode, &grid, POSITION_FREQUENCIES, &mut rng)?;
        // Fresh tables are near zero; give them trained-like magnitudes.
        if let Some(g) = enc.grid_mut() {
            g.tables_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        // Mean absolute change of the encoding between neighbouring points
        // 1/256 apart; larger means the encoder resolves finer detail.
        let points: Vec<f64> = (0..=256).flat_map(|i| [-1.0 + i as f64 / 128.0, 0.1, -0.2]).collect();
        let (codes, _) = enc.encode(&points);
        let dim = enc.output_dim();
        let rows: Vec<&[f64]> = codes.chunks_exact(dim).collect();
        let step: f64 = rows
            .windows(2)
            .map(|w| w[0].iter().zip(w[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / dim as f64)
            .sum::<f64>()
            / (rows.len() - 1) as f64;
        println!("{mode:?}: output dim {dim}, mean neighbour change {step:.5}");
    }

    let e = freq_encode_vec(&[0.5f64], 2);
    println!("freq(0.5, L=2) = {e:.4?}");
    Ok(())
}
