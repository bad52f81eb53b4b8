//! Positional encodings: sinusoidal frequency encoding, a learnable
//! multiresolution hash grid, and their concatenation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Default frequency count for positions in pure-frequency mode.
pub const POSITION_FREQUENCIES: usize = 10;
/// Frequency count for view directions.
pub const DIRECTION_FREQUENCIES: usize = 4;
/// Frequency count of the sinusoidal tail in hybrid mode.
pub const HYBRID_FREQUENCIES: usize = 2;

static CLAMPED_POINTS: AtomicU64 = AtomicU64::new(0);

/// Total number of points clamped into the scene cube since process start.
pub fn clamped_point_count() -> u64 {
    CLAMPED_POINTS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyEncodingConfig {
    pub num_frequencies: usize,
}

impl FrequencyEncodingConfig {
    pub fn output_dim(&self, coords: usize) -> usize {
        2 * coords * self.num_frequencies
    }
}

/// Writes `[sin(2^0 pi y), cos(2^0 pi y), ..., sin(2^(L-1) pi y), cos(2^(L-1) pi y)]`
/// for each coordinate in turn. Inputs outside `[-1, 1]` are extrapolated.
pub fn freq_encode<T: Real>(y: &[T], num_frequencies: usize, out: &mut [T]) {
    assert_eq!(out.len(), 2 * y.len() * num_frequencies);
    let pi = T::lit(std::f64::consts::PI);
    let mut k = 0;
    for &coord in y {
        let mut scale = pi;
        for _ in 0..num_frequencies {
            let (s, c) = (coord * scale).sin_cos();
            out[k] = s;
            out[k + 1] = c;
            k += 2;
            scale = scale + scale;
        }
    }
}

pub fn freq_encode_vec<T: Real>(y: &[T], num_frequencies: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 2 * y.len() * num_frequencies];
    freq_encode(y, num_frequencies, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub num_levels: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub features_per_entry: usize,
    /// Entries per level; must be a power of two.
    pub table_size: usize,
    pub hash_primes: [u32; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            num_levels: 8,
            base_resolution: 8,
            growth_factor: 1.6,
            features_per_entry: 2,
            table_size: 1 << 16,
            hash_primes: [1, 2_654_435_761, 805_459_861],
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.features_per_entry == 0 || self.base_resolution == 0 {
            return Err(Error::Config("hash grid needs levels, features and resolution > 0".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "hash table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.table_size > u32::MAX as usize {
            return Err(Error::Config("hash table size exceeds u32 indexing".into()));
        }
        if self.num_levels > 1 && !(self.growth_factor > 1.0) {
            return Err(Error::Config("growth factor must exceed 1".into()));
        }
        Ok(())
    }

    /// Cells per axis at `level`: `round(base * growth^level)`.
    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).round() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_entry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Level {
    resolution: u32,
    /// Dense row-major indexing when the full vertex lattice fits the table.
    dense: bool,
    entries: usize,
    /// Offset of the level's first entry in the flat table.
    offset: usize,
}

/// Learnable multiresolution grid over the cube `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid<T> {
    config: HashGridConfig,
    levels: Vec<Level>,
    /// All levels' entries, `features_per_entry` values each.
    tables: Vec<T>,
}

/// Corner indices and trilinear weights retained for the table backward pass.
#[derive(Debug, Clone)]
pub struct GridTrace<T> {
    points: usize,
    /// `points x levels x 8` flat entry indices.
    indices: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Real> HashGrid<T> {
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        let mut grid = Self::zeroed(config)?;
        for v in &mut grid.tables {
            *v = T::lit(rng.random_range(-1e-4..1e-4));
        }
        Ok(grid)
    }

    pub fn zeroed(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let mut levels = Vec::with_capacity(config.num_levels);
        let mut offset = 0;
        for l in 0..config.num_levels {
            let resolution = config.level_resolution(l).max(1);
            let lattice = (resolution as u128 + 1).pow(3);
            let dense = lattice <= config.table_size as u128;
            let entries = if dense { lattice as usize } else { config.table_size };
            levels.push(Level {
                resolution: resolution as u32,
                dense,
                entries,
                offset,
            });
            offset += entries;
        }
        let tables = vec![T::zero(); offset * config.features_per_entry];
        Ok(Self {
            config,
            levels,
            tables,
        })
    }

    pub fn from_tables(config: HashGridConfig, tables: Vec<T>) -> Result<Self> {
        let mut grid = Self::zeroed(config)?;
        if tables.len() != grid.tables.len() {
            return Err(Error::Config(format!(
                "hash grid expects {} table values, got {}",
                grid.tables.len(),
                tables.len()
            )));
        }
        grid.tables = tables;
        Ok(grid)
    }

    pub fn cast<U: Real>(&self) -> HashGrid<U> {
        HashGrid {
            config: self.config.clone(),
            levels: self.levels.clone(),
            tables: self.tables.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn tables(&self) -> &[T] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [T] {
        &mut self.tables
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        self.levels[level].resolution
    }

    pub fn level_is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    /// Index of a lattice vertex within its level's table, in `[0, entries)`.
    pub fn vertex_index(&self, level: usize, vertex: [u32; 3]) -> usize {
        let lv = &self.levels[level];
        if lv.dense {
            let side = lv.resolution as usize + 1;
            vertex[0] as usize + side * (vertex[1] as usize + side * vertex[2] as usize)
        } else {
            let [p0, p1, p2] = self.config.hash_primes;
            let h = vertex[0].wrapping_mul(p0) ^ vertex[1].wrapping_mul(p1) ^ vertex[2].wrapping_mul(p2);
            (h as usize) & (self.config.table_size - 1)
        }
    }

    /// Stored feature vector of a lattice vertex.
    pub fn vertex_entry(&self, level: usize, vertex: [u32; 3]) -> &[T] {
        let f = self.config.features_per_entry;
        let idx = self.levels[level].offset + self.vertex_index(level, vertex);
        &self.tables[idx * f..(idx + 1) * f]
    }

    /// Encodes `points` (`n x 3`) into columns `[col, col + output_dim)` of
    /// `out`, whose rows are `stride` wide.
    pub fn encode_into(
        &self,
        points: &[T],
        out: &mut [T],
        stride: usize,
        col: usize,
    ) -> GridTrace<T> {
        let n = points.len() / 3;
        let nl = self.levels.len();
        let f = self.config.features_per_entry;
        let mut indices = Vec::with_capacity(n * nl * 8);
        let mut weights = Vec::with_capacity(n * nl * 8);
        let one = T::one();
        let half = T::lit(0.5);
        let mut clamped = 0u64;
        for (p, row) in points.chunks_exact(3).zip(out.chunks_mut(stride)) {
            let mut x = [p[0], p[1], p[2]];
            for c in &mut x {
                if *c < -one || *c > one || c.is_nan() {
                    clamped += 1;
                    *c = if c.is_nan() { T::zero() } else { c.max(-one).min(one) };
                }
            }
            for (l, lv) in self.levels.iter().enumerate() {
                let res = T::lit(lv.resolution as f64);
                let mut cell = [0u32; 3];
                let mut frac = [T::zero(); 3];
                for a in 0..3 {
                    let u = (x[a] + one) * half * res;
                    let i = u.floor().to_u32().unwrap_or(0).min(lv.resolution - 1);
                    cell[a] = i;
                    frac[a] = u - T::lit(i as f64);
                }
                let dst = &mut row[col + l * f..col + (l + 1) * f];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for corner in 0..8u32 {
                    let mut w = one;
                    let mut vtx = cell;
                    for a in 0..3 {
                        if corner >> a & 1 == 1 {
                            vtx[a] += 1;
                            w *= frac[a];
                        } else {
                            w *= one - frac[a];
                        }
                    }
                    let idx = lv.offset + self.vertex_index(l, vtx);
                    let entry = &self.tables[idx * f..(idx + 1) * f];
                    for (d, &e) in dst.iter_mut().zip(entry) {
                        *d += w * e;
                    }
                    indices.push(idx as u32);
                    weights.push(w);
                }
            }
        }
        if clamped > 0 {
            CLAMPED_POINTS.fetch_add(clamped, Ordering::Relaxed);
            log::debug!("clamped {clamped} coordinates into the scene cube");
        }
        GridTrace {
            points: n,
            indices,
            weights,
        }
    }

    /// Encodes a batch into a fresh `n x output_dim` buffer.
    pub fn encode(&self, points: &[T]) -> (Vec<T>, GridTrace<T>) {
        let dim = self.output_dim();
        let mut out = vec![T::zero(); points.len() / 3 * dim];
        let trace = self.encode_into(points, &mut out, dim, 0);
        (out, trace)
    }

    /// Scatters `upstream` (columns `[col, col + output_dim)` of rows `stride`
    /// wide) into `grad_tables` with the retained trilinear weights.
    pub fn backward(
        &self,
        trace: &GridTrace<T>,
        upstream: &[T],
        stride: usize,
        col: usize,
        grad_tables: &mut [T],
    ) {
        assert_eq!(grad_tables.len(), self.tables.len());
        let nl = self.levels.len();
        let f = self.config.features_per_entry;
        for p in 0..trace.points {
            let row = &upstream[p * stride + col..p * stride + col + nl * f];
            for l in 0..nl {
                let g = &row[l * f..(l + 1) * f];
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                let base = (p * nl + l) * 8;
                for k in 0..8 {
                    let idx = trace.indices[base + k] as usize;
                    let w = trace.weights[base + k];
                    for (dst, &gv) in grad_tables[idx * f..(idx + 1) * f].iter_mut().zip(g) {
                        *dst += w * gv;
                    }
                }
            }
        }
    }
}

/// Which encoding feeds the geometry network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Sinusoidal encoding with [`POSITION_FREQUENCIES`] frequencies.
    Freq,
    HashGrid,
    /// Hash grid concatenated with a low-frequency sinusoidal tail.
    Hybrid,
}

/// A position encoder with its learnable state, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEncoder<T> {
    mode: EncoderMode,
    frequencies: usize,
    grid: Option<HashGrid<T>>,
}

#[derive(Debug, Clone)]
pub struct EncodeTrace<T> {
    grid: Option<GridTrace<T>>,
}

impl<T: Real> PositionEncoder<T> {
    pub fn new<R: Rng + ?Sized>(
        mode: EncoderMode,
        grid_config: &HashGridConfig,
        position_frequencies: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (frequencies, grid) = match mode {
            EncoderMode::Freq => (position_frequencies, None),
            EncoderMode::HashGrid => (0, Some(HashGrid::new(grid_config.clone(), rng)?)),
            EncoderMode::Hybrid => (
                HYBRID_FREQUENCIES,
                Some(HashGrid::new(grid_config.clone(), rng)?),
            ),
        };
        Ok(Self {
            mode,
            frequencies,
            grid,
        })
    }

    pub fn with_grid(mode: EncoderMode, frequencies: usize, grid: Option<HashGrid<T>>) -> Result<Self> {
        let needs_grid = mode != EncoderMode::Freq;
        if needs_grid != grid.is_some() {
            return Err(Error::Config(format!("{mode:?} encoder grid presence mismatch")));
        }
        Ok(Self { mode, frequencies, grid })
    }

    pub fn cast<U: Real>(&self) -> PositionEncoder<U> {
        PositionEncoder {
            mode: self.mode,
            frequencies: self.frequencies,
            grid: self.grid.as_ref().map(HashGrid::cast),
        }
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    pub fn frequencies(&self) -> usize {
        self.frequencies
    }

    pub fn grid(&self) -> Option<&HashGrid<T>> {
        self.grid.as_ref()
    }

    pub fn grid_mut(&mut self) -> Option<&mut HashGrid<T>> {
        self.grid.as_mut()
    }

    fn grid_dim(&self) -> usize {
        self.grid.as_ref().map_or(0, HashGrid::output_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.grid_dim() + 2 * 3 * self.frequencies
    }

    /// Encodes `n x 3` points into an `n x output_dim` buffer: grid features
    /// first, then the sinusoidal part.
    pub fn encode(&self, points: &[T]) -> (Vec<T>, EncodeTrace<T>) {
        let n = points.len() / 3;
        let dim = self.output_dim();
        let gd = self.grid_dim();
        let mut out = vec![T::zero(); n * dim];
        let grid = self.grid.as_ref().map(|g| g.encode_into(points, &mut out, dim, 0));
        if self.frequencies > 0 {
            for (p, row) in points.chunks_exact(3).zip(out.chunks_exact_mut(dim)) {
                freq_encode(p, self.frequencies, &mut row[gd..]);
            }
        }
        (out, EncodeTrace { grid })
    }

    pub fn backward(&self, trace: &EncodeTrace<T>, upstream: &[T], grad_tables: &mut [T]) {
        if let (Some(grid), Some(gt)) = (&self.grid, &trace.grid) {
            grid.backward(gt, upstream, self.output_dim(), 0, grad_tables);
        }
    }
}

/// Hash-grid features of `x` followed by its `L = 2` frequency encoding.
pub fn hybrid_encode<T: Real>(grid: &HashGrid<T>, x: [T; 3]) -> Vec<T> {
    let gd = grid.output_dim();
    let mut out = vec![T::zero(); gd + 2 * 3 * HYBRID_FREQUENCIES];
    grid.encode_into(&x, &mut out, gd + 12, 0);
    freq_encode(&x, HYBRID_FREQUENCIES, &mut out[gd..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_at, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> HashGridConfig {
        HashGridConfig {
            num_levels: 4,
            base_resolution: 4,
            growth_factor: 2.0,
            features_per_entry: 2,
            table_size: 1 << 10,
            ..HashGridConfig::default()
        }
    }

    #[test]
    fn freq_encode_examples() {
        assert_eq!(freq_encode_vec(&[0.0f64], 2), vec![0.0, 1.0, 0.0, 1.0]);
        let v = freq_encode_vec(&[0.5f64], 1);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        let v = freq_encode_vec(&[-1.0f64], 1);
        assert!(v[0].abs() < 1e-15 && (v[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn freq_layout_is_per_coordinate() {
        let v = freq_encode_vec(&[0.25f64, -0.5, 0.75], 3);
        assert_eq!(v.len(), 18);
        let first = freq_encode_vec(&[-0.5f64], 3);
        assert_eq!(&v[6..12], &first[..]);
    }

    #[test]
    fn default_levels_follow_growth() {
        let c = HashGridConfig::default();
        let res: Vec<usize> = (0..8).map(|l| c.level_resolution(l)).collect();
        assert_eq!(res, vec![8, 13, 20, 33, 52, 84, 134, 215]);
        assert!(HashGridConfig { table_size: 1000, ..c }.validate().is_err());
    }

    #[test]
    fn vertex_index_properties() {
        let grid = HashGrid::<f32>::zeroed(HashGridConfig::default()).unwrap();
        assert!(grid.level_is_dense(0));
        assert!(!grid.level_is_dense(7));
        assert_eq!(grid.vertex_index(7, [0, 0, 0]), 0);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let l = r.random_range(0..8);
            let res = grid.level_resolution(l);
            let v = [
                r.random_range(0..=res),
                r.random_range(0..=res),
                r.random_range(0..=res),
            ];
            let idx = grid.vertex_index(l, v);
            assert!(idx < (1 << 16));
            assert_eq!(idx, grid.vertex_index(l, v));
        }
    }

    #[test]
    fn encoding_on_vertex_returns_entry() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let grid = HashGrid::<f64>::new(small_config(), &mut r).unwrap();
        // level 0 has 4 cells per axis: vertex (1, 2, 3) sits at -1 + 2 * i / 4
        let x = [-0.5, 0.0, 0.5];
        let (enc, _) = grid.encode(&x);
        assert_eq!(&enc[0..2], grid.vertex_entry(0, [1, 2, 3]));
    }

    #[test]
    fn encoding_at_cell_center_is_corner_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let grid = HashGrid::<f64>::new(small_config(), &mut r).unwrap();
        // center of level-0 cell (0, 1, 2)
        let x = [-1.0 + 0.25, -1.0 + 0.75, -1.0 + 1.25];
        let (enc, _) = grid.encode(&x);
        let mut mean = [0.0; 2];
        for c in 0..8u32 {
            let v = [c & 1, 1 + (c >> 1 & 1), 2 + (c >> 2 & 1)];
            for (m, e) in mean.iter_mut().zip(grid.vertex_entry(0, v)) {
                *m += e / 8.0;
            }
        }
        assert!((enc[0] - mean[0]).abs() < 1e-15 && (enc[1] - mean[1]).abs() < 1e-15);
    }

    #[test]
    fn table_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut grid = HashGrid::<f64>::new(small_config(), &mut r).unwrap();
        let pts: Vec<f64> = (0..3 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        let dim = grid.output_dim();
        let up: Vec<f64> = (0..6 * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, trace) = grid.encode(&pts);
        let mut g = vec![0.0; grid.tables().len()];
        grid.backward(&trace, &up, dim, 0, &mut g);
        let touched: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        assert!(!touched.is_empty());
        let fd = finite_difference_at(
            |i, d| {
                grid.tables_mut()[i] += d;
                let (e, _) = grid.encode(&pts);
                grid.tables_mut()[i] -= d;
                e.iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            &touched,
            1e-6,
        );
        let an: Vec<f64> = touched.iter().map(|&i| g[i]).collect();
        assert!(relative_error(&an, &fd) <= 1e-8);
    }

    #[test]
    fn corner_gradient_is_trilinear_weight() {
        let grid = HashGrid::<f64>::zeroed(small_config()).unwrap();
        let x = [-0.9, 0.1, 0.33];
        let (_, trace) = grid.encode(&x);
        let dim = grid.output_dim();
        let mut up = vec![0.0; dim];
        up[0] = 1.0; // first feature of level 0
        let mut g = vec![0.0; grid.tables().len()];
        grid.backward(&trace, &up, dim, 0, &mut g);
        let total: f64 = g.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "trilinear weights sum to one");
        assert!(g.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn grid_is_linear_in_tables() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let a = HashGrid::<f64>::new(small_config(), &mut r).unwrap();
        let b = HashGrid::<f64>::new(small_config(), &mut r).unwrap();
        let sum: Vec<f64> = a.tables().iter().zip(b.tables()).map(|(x, y)| x + y).collect();
        let ab = HashGrid::from_tables(small_config(), sum).unwrap();
        let pts: Vec<f64> = (0..30).map(|_| r.random_range(-1.0..1.0)).collect();
        let (ea, _) = a.encode(&pts);
        let (eb, _) = b.encode(&pts);
        let (eab, _) = ab.encode(&pts);
        for i in 0..ea.len() {
            assert!((ea[i] + eb[i] - eab[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn hybrid_dimension_and_zero_tables() {
        let grid = HashGrid::<f64>::zeroed(HashGridConfig::default()).unwrap();
        let x = [0.3, -0.2, 0.9];
        let e = hybrid_encode(&grid, x);
        assert_eq!(e.len(), 28);
        assert!(e[..16].iter().all(|&v| v == 0.0));
        assert_eq!(&e[16..], &freq_encode_vec(&x, 2)[..]);
    }

    #[test]
    fn hybrid_encoding_is_continuous() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let grid = HashGrid::<f64>::new(HashGridConfig::default(), &mut r).unwrap();
        let finest = grid.level_resolution(7) as f64;
        let max_entry = grid.tables().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..200 {
            let x = [
                r.random_range(-0.99..0.99),
                r.random_range(-0.99..0.99),
                r.random_range(-0.99..0.99),
            ];
            let y = [x[0] + 1e-6, x[1] - 1e-6, x[2] + 1e-6];
            let (ex, ey) = (hybrid_encode(&grid, x), hybrid_encode(&grid, y));
            // per level: |d enc| <= 3 * res/2 * |dx| * 2 * max_entry
            for (a, b) in ex[..16].iter().zip(&ey[..16]) {
                assert!((a - b).abs() <= 6.0 * finest * 1e-6 * max_entry + 1e-15);
            }
            for (a, b) in ex[16..].iter().zip(&ey[16..]) {
                assert!((a - b).abs() <= 2.0 * std::f64::consts::PI * 3e-6);
            }
        }
    }

    #[test]
    fn out_of_cube_points_are_clamped() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let grid = HashGrid::<f64>::new(small_config(), &mut r).unwrap();
        let (outside, _) = grid.encode(&[1.7, -3.0, 0.2]);
        let (edge, _) = grid.encode(&[1.0, -1.0, 0.2]);
        assert_eq!(outside, edge);
        assert!(clamped_point_count() >= 2);
    }

    #[test]
    fn encoder_dimensions_per_mode() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let cfg = HashGridConfig::default();
        let dims: Vec<usize> = [EncoderMode::Freq, EncoderMode::HashGrid, EncoderMode::Hybrid]
            .into_iter()
            .map(|m| PositionEncoder::<f32>::new(m, &cfg, POSITION_FREQUENCIES, &mut r).unwrap().output_dim())
            .collect();
        assert_eq!(dims, vec![60, 16, 28]);
    }
}
