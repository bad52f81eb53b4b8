//! Dense image-feature maps: the FMAP container, the offline autoencoder that
//! compresses them to the field's feature width, nearest-neighbor target
//! lookup, PCA false-color views and a synthetic feature generator.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, LayerSpec, Mlp};

const MAGIC: &[u8; 4] = b"FMAP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Row-major `height x width x dim` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: u32, width: u32, dim: u32, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Data(format!("feature map dims must be positive, got {height}x{width}x{dim}")));
        }
        let expected = height as usize * width as usize * dim as usize;
        if data.len() != expected {
            return Err(Error::Data(format!(
                "feature map {height}x{width}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature map contains non-finite values".into()));
        }
        Ok(Self { height, width, dim, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let d = self.dim as usize;
        let i = (y as usize * self.width as usize + x as usize) * d;
        &self.data[i..i + d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height, self.width, self.dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt(0, "missing FMAP magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let (h, w, m) = (word(1), word(2), word(3));
        if h == 0 || w == 0 || m == 0 {
            return Err(fmt(8, format!("zero dimension in {h}x{w}x{m}")));
        }
        let count = (h as u64) * (w as u64) * (m as u64);
        let expected = HEADER_LEN as u64 + 4 * count;
        if (bytes.len() as u64) < expected {
            return Err(fmt(bytes.len(), format!("truncated payload, expected {expected} bytes")));
        }
        if (bytes.len() as u64) > expected {
            return Err(fmt(expected as usize, "trailing bytes after payload".into()));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(fmt(HEADER_LEN + 4 * i, "non-finite value".into()));
        }
        Ok(Self { height: h, width: w, dim: m, data })
    }
}

pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}

/// Nearest-neighbor feature for image pixel `(x, y)` of a `width x height`
/// image, clamped to the map.
pub fn lookup_feature(map: &FeatureMap, x: u32, y: u32, width: u32, height: u32) -> &[f32] {
    let fx = (x as u64 * map.width as u64 / width.max(1) as u64).min(map.width as u64 - 1);
    let fy = (y as u64 * map.height as u64 / height.max(1) as u64).min(map.height as u64 - 1);
    map.pixel(fx as u32, fy as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Weight of the latent L1 penalty.
    pub sparsity: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step relative to the first; decay is geometric.
    pub final_lr_fraction: f64,
    /// Pixels pooled across frames for training.
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden_dim: 256,
            sparsity: 1e-3,
            iterations: 10_000,
            batch_size: 64,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            sample_count: 1 << 17,
            seed: 0,
        }
    }
}

/// Encoder `M -> hidden -> D` and decoder `D -> hidden -> M`.
#[derive(Debug, Clone)]
pub struct FeatureAutoencoder {
    encoder: Mlp<f32>,
    decoder: Mlp<f32>,
    sparsity: f64,
}

#[derive(Serialize, Deserialize)]
struct StoredAutoencoder {
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
    sparsity: f64,
    encoder_params: Vec<f32>,
    decoder_params: Vec<f32>,
}

/// Per-step reconstruction/sparsity values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoencoderLoss {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub total: f64,
}

impl FeatureAutoencoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: &AutoencoderConfig, rng: &mut R) -> Result<Self> {
        if input_dim < config.latent_dim {
            return Err(Error::Config(format!(
                "feature dim {input_dim} is smaller than the latent dim {}",
                config.latent_dim
            )));
        }
        if !(config.sparsity.is_finite() && config.sparsity >= 0.0) {
            return Err(Error::Config("autoencoder sparsity must be >= 0".into()));
        }
        let (m, h, d) = (input_dim, config.hidden_dim, config.latent_dim);
        Ok(Self {
            encoder: Mlp::new(&[m, h, d], Activation::Relu, Activation::Identity, rng)?,
            decoder: Mlp::new(&[d, h, m], Activation::Relu, Activation::Identity, rng)?,
            sparsity: config.sparsity,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn encoder(&self) -> &Mlp<f32> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp<f32> {
        &self.decoder
    }

    pub fn encode(&self, vectors: &[f32]) -> Result<Vec<f32>> {
        let n = vectors.len() / self.input_dim();
        Ok(self.encoder.forward(vectors, n)?.output().to_vec())
    }

    pub fn decode(&self, latents: &[f32]) -> Result<Vec<f32>> {
        let n = latents.len() / self.latent_dim();
        Ok(self.decoder.forward(latents, n)?.output().to_vec())
    }

    /// `sqrt(sum |dec(enc v) - v|^2 / sum |v|^2)` over the given vectors.
    pub fn relative_reconstruction_error(&self, vectors: &[f32]) -> Result<f64> {
        let rec = self.decode(&self.encode(vectors)?)?;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&r, &v) in rec.iter().zip(vectors) {
            num += (r as f64 - v as f64).powi(2);
            den += (v as f64).powi(2);
        }
        Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
    }

    /// Mean over vectors of the latent L1 norm.
    pub fn mean_latent_l1(&self, vectors: &[f32]) -> Result<f64> {
        let n = vectors.len() / self.input_dim();
        let z = self.encode(vectors)?;
        Ok(z.iter().map(|v| v.abs() as f64).sum::<f64>() / n.max(1) as f64)
    }

    /// Loss and gradients of `mean(|dec(enc v) - v|_2 + lambda |enc v|_1)`.
    fn loss_and_grads(&self, batch: &[f32], enc_grads: &mut [f32], dec_grads: &mut [f32]) -> Result<AutoencoderLoss> {
        let m = self.input_dim();
        let d = self.latent_dim();
        let n = batch.len() / m;
        let enc = self.encoder.forward(batch, n)?;
        let z = enc.output();
        let dec = self.decoder.forward(z, n)?;
        let rec = dec.output();
        let inv_n = 1.0 / n as f32;
        let lambda = self.sparsity as f32;
        let (mut rec_sum, mut l1_sum) = (0.0f64, 0.0f64);
        let mut d_rec = vec![0.0f32; n * m];
        for i in 0..n {
            let r = &rec[i * m..(i + 1) * m];
            let v = &batch[i * m..(i + 1) * m];
            let norm = r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
            rec_sum += norm as f64;
            if norm > 0.0 {
                for j in 0..m {
                    d_rec[i * m + j] = (r[j] - v[j]) / norm * inv_n;
                }
            }
        }
        let d_z_rec = self
            .decoder
            .backward(&dec, &d_rec, dec_grads, true)?
            .expect("input gradient requested");
        let mut d_z = d_z_rec;
        for (k, g) in d_z.iter_mut().enumerate().take(n * d) {
            let v = z[k];
            l1_sum += v.abs() as f64;
            if lambda > 0.0 {
                *g += lambda * inv_n * v.signum() * (v != 0.0) as u8 as f32;
            }
        }
        self.encoder.backward(&enc, &d_z, enc_grads, false)?;
        let reconstruction = rec_sum / n as f64;
        let sparsity = l1_sum / n as f64;
        Ok(AutoencoderLoss {
            reconstruction,
            sparsity,
            total: reconstruction + self.sparsity * sparsity,
        })
    }

    /// Trains on `samples` (row-major `n x M`) with Adam and geometric
    /// learning-rate decay. Returns the loss of the last step.
    pub fn train(&mut self, samples: &[f32], config: &AutoencoderConfig) -> Result<AutoencoderLoss> {
        let m = self.input_dim();
        let n = samples.len() / m;
        if n == 0 || !samples.len().is_multiple_of(m) {
            return Err(Error::Data(format!("{} values do not form {m}-dim samples", samples.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_edae);
        let adam = AdamConfig::with_learning_rate(config.learning_rate);
        let mut enc_state = AdamState::new(self.encoder.param_count(), adam);
        let mut dec_state = AdamState::new(self.decoder.param_count(), adam);
        let mut enc_grads = vec![0.0f32; self.encoder.param_count()];
        let mut dec_grads = vec![0.0f32; self.decoder.param_count()];
        let b = config.batch_size.min(n).max(1);
        let mut batch = vec![0.0f32; b * m];
        let mut last = AutoencoderLoss {
            reconstruction: 0.0,
            sparsity: 0.0,
            total: 0.0,
        };
        let iters = config.iterations.max(1);
        for it in 0..config.iterations {
            for row in batch.chunks_exact_mut(m) {
                let i = rng.random_range(0..n);
                row.copy_from_slice(&samples[i * m..(i + 1) * m]);
            }
            enc_grads.fill(0.0);
            dec_grads.fill(0.0);
            last = self.loss_and_grads(&batch, &mut enc_grads, &mut dec_grads)?;
            let lr = config.learning_rate * config.final_lr_fraction.powf(it as f64 / iters as f64);
            enc_state.config.learning_rate = lr;
            dec_state.config.learning_rate = lr;
            adam_step(self.encoder.params_mut(), &enc_grads, &mut enc_state, "autoencoder.encoder")?;
            adam_step(self.decoder.params_mut(), &dec_grads, &mut dec_state, "autoencoder.decoder")?;
        }
        Ok(last)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&StoredAutoencoder {
            encoder: self.encoder.specs().to_vec(),
            decoder: self.decoder.specs().to_vec(),
            sparsity: self.sparsity,
            encoder_params: self.encoder.params().to_vec(),
            decoder_params: self.decoder.params().to_vec(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: StoredAutoencoder = serde_json::from_str(text)?;
        Ok(Self {
            encoder: Mlp::from_params(s.encoder, s.encoder_params)?,
            decoder: Mlp::from_params(s.decoder, s.decoder_params)?,
            sparsity: s.sparsity,
        })
    }
}

/// Draws `count` feature vectors uniformly over the pooled pixels of `maps`.
pub fn sample_feature_vectors<R: Rng + ?Sized>(maps: &[&FeatureMap], count: usize, rng: &mut R) -> Result<Vec<f32>> {
    let Some(first) = maps.first() else {
        return Err(Error::Data("no feature maps to sample".into()));
    };
    let m = first.dim as usize;
    if maps.iter().any(|f| f.dim as usize != m) {
        return Err(Error::Data("feature maps disagree on dimension".into()));
    }
    let total: usize = maps.iter().map(|f| f.pixel_count()).sum();
    let mut out = Vec::with_capacity(count * m);
    for _ in 0..count {
        let mut g = rng.random_range(0..total);
        for f in maps {
            if g < f.pixel_count() {
                out.extend_from_slice(&f.data[g * m..(g + 1) * m]);
                break;
            }
            g -= f.pixel_count();
        }
    }
    Ok(out)
}

/// Applies the encoder to every pixel of `map`.
pub fn encode_targets(map: &FeatureMap, autoencoder: &FeatureAutoencoder) -> Result<FeatureMap> {
    if map.dim as usize != autoencoder.input_dim() {
        return Err(Error::Config(format!(
            "feature map dim {} does not match autoencoder input {}",
            map.dim,
            autoencoder.input_dim()
        )));
    }
    let d = autoencoder.latent_dim();
    let m = map.dim as usize;
    let mut data = Vec::with_capacity(map.pixel_count() * d);
    for chunk in map.data.chunks(4096 * m) {
        data.extend(autoencoder.encode(chunk)?);
    }
    FeatureMap::new(map.height, map.width, d as u32, data)
}

/// Mean and top-3 principal directions of a set of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// Three orthonormal rows of length `dim`, by decreasing variance.
    pub directions: [Vec<f64>; 3],
}

impl PcaProjector {
    /// Fits on row-major `n x dim` vectors. Returns `None` when the vectors
    /// have (numerically) zero variance.
    pub fn fit(vectors: &[f32], dim: usize) -> Option<Self> {
        let n = vectors.len() / dim.max(1);
        if n < 2 || dim == 0 {
            return None;
        }
        let mut mean = vec![0.0f64; dim];
        for row in vectors.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, dim, |i, j| vectors[i * dim + j] as f64 - mean[j]);
        let cov = centered.tr_mul(&centered) / (n as f64);
        let trace = cov.trace();
        let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
        if !(trace > 1e-12 * scale) {
            return None;
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let direction = |k: usize| -> Vec<f64> {
            let Some(&col) = order.get(k) else {
                return vec![0.0; dim];
            };
            let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            // Fix the sign so the largest-magnitude component is positive.
            let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Some(Self {
            mean,
            directions: [direction(0), direction(1), direction(2)],
        })
    }

    pub fn project(&self, v: &[f32]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, dir) in out.iter_mut().zip(&self.directions) {
            *o = v.iter().zip(&self.mean).zip(dir).map(|((&x, m), d)| (x as f64 - m) * d).sum();
        }
        out
    }
}

/// False-color view of a feature map: projection onto the top three principal
/// components, each channel min-max normalized. The projector is fit on at
/// most `max_fit` evenly strided pixels. Degenerate maps are mid-gray.
pub fn pca_rgb(map: &FeatureMap, max_fit: usize) -> Vec<[f32; 3]> {
    let d = map.dim as usize;
    let n = map.pixel_count();
    let stride = n.div_ceil(max_fit.max(1)).max(1);
    let fit: Vec<f32> = (0..n)
        .step_by(stride)
        .flat_map(|i| map.data[i * d..(i + 1) * d].iter().copied())
        .collect();
    let Some(pca) = PcaProjector::fit(&fit, d) else {
        return vec![[0.5; 3]; n];
    };
    let proj: Vec<[f64; 3]> = map.data.chunks_exact(d).map(|v| pca.project(v)).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &proj {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    proj.iter()
        .map(|p| {
            let mut rgb = [0.5f32; 3];
            for c in 0..3 {
                let range = hi[c] - lo[c];
                if range > 1e-9 * (1.0 + hi[c].abs().max(lo[c].abs())) {
                    rgb[c] = ((p[c] - lo[c]) / range).clamp(0.0, 1.0) as f32;
                }
            }
            rgb
        })
        .collect()
}

/// Parameters of the synthetic feature generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFeatureParams {
    pub dim: usize,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Box-filter radius in feature-map cells.
    pub smoothing_radius: usize,
    /// Image pixels per feature cell along each axis.
    pub stride: u32,
    pub seed: u64,
}

impl Default for SynthFeatureParams {
    fn default() -> Self {
        Self {
            dim: 384,
            noise: 0.1,
            smoothing_radius: 1,
            stride: 1,
            seed: 7,
        }
    }
}

/// `count` random class embeddings in `R^dim`, each of norm `scale`.
pub fn class_embeddings(count: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| (x / norm * scale) as f32).collect()
        })
        .collect()
}

/// Smallest pairwise Euclidean distance between embeddings.
pub fn min_separation(embeddings: &[Vec<f32>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in embeddings.iter().enumerate() {
        for b in &embeddings[i + 1..] {
            let d = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Feature map whose cells carry their class embedding plus Gaussian noise,
/// then box-smoothed. Each cell takes the class of the image pixel at its
/// center.
pub fn synth_features(
    classes: &[u16],
    width: u32,
    height: u32,
    embeddings: &[Vec<f32>],
    params: &SynthFeatureParams,
) -> Result<FeatureMap> {
    if classes.len() != (width * height) as usize {
        return Err(Error::Data("class map size does not match image size".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c as usize >= embeddings.len()) {
        return Err(Error::Data(format!("class {c} has no embedding")));
    }
    if embeddings.iter().any(|e| e.len() != params.dim) {
        return Err(Error::Config("embedding length differs from feature dim".into()));
    }
    let stride = params.stride.max(1);
    let (fw, fh) = (width.div_ceil(stride), height.div_ceil(stride));
    let m = params.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut raw = vec![0.0f32; (fw * fh) as usize * m];
    for y in 0..fh {
        for x in 0..fw {
            let px = (x * stride + stride / 2).min(width - 1);
            let py = (y * stride + stride / 2).min(height - 1);
            let class = classes[(py * width + px) as usize] as usize;
            let cell = &mut raw[((y * fw + x) as usize) * m..((y * fw + x) as usize + 1) * m];
            for (o, &e) in cell.iter_mut().zip(&embeddings[class]) {
                *o = e + if params.noise > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            }
        }
    }
    let data = if params.smoothing_radius == 0 {
        raw
    } else {
        box_smooth(&raw, fw as usize, fh as usize, m, params.smoothing_radius)
    };
    FeatureMap::new(fh, fw, m as u32, data)
}

fn box_smooth(data: &[f32], w: usize, h: usize, m: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            let o = &mut out[(y * w + x) * m..(y * w + x + 1) * m];
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    for (a, &b) in o.iter_mut().zip(&data[(yy * w + xx) * m..(yy * w + xx + 1) * m]) {
                        *a += b;
                    }
                }
            }
            o.iter_mut().for_each(|a| *a /= count);
        }
    }
    out
}

/// `n` vectors in `R^ambient` lying in a random `rank`-dimensional subspace;
/// the subspace and the coefficients both derive from `seed`.
pub fn low_rank_samples(n: usize, ambient: usize, rank: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis: Vec<f64> = (0..rank * ambient)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|v: f64| v / (rank as f64).sqrt())
        .collect();
    let mut out = Vec::with_capacity(n * ambient);
    for _ in 0..n {
        let coeff: Vec<f64> = (0..rank).map(|_| StandardNormal.sample(&mut rng)).collect();
        for j in 0..ambient {
            out.push((0..rank).map(|k| coeff[k] * basis[k * ambient + j]).sum::<f64>() as f32);
        }
    }
    out
}

/// Up to `count` distinct pixel indices in `0..total`, deterministic per rng.
pub fn subsample_pixels<R: Rng + ?Sized>(total: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut v = sample_indices(rng, total, count.min(total)).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: u32, w: u32, m: u32) -> FeatureMap {
        let data = (0..h * w * m).map(|i| (i as f32 * 0.37).sin()).collect();
        FeatureMap::new(h, w, m, data).unwrap()
    }

    #[test]
    fn fmap_round_trip_is_bit_exact() {
        let f = map(3, 5, 7);
        let back = FeatureMap::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fmap");
        save_feature_map(&p, &f).unwrap();
        assert_eq!(load_feature_map(&p).unwrap().to_bytes(), f.to_bytes());
    }

    #[test]
    fn fmap_payload_size() {
        assert_eq!(map(2, 3, 4).to_bytes().len() - HEADER_LEN, 96);
    }

    #[test]
    fn fmap_truncation_reports_offset() {
        let bytes = map(2, 3, 4).to_bytes();
        match FeatureMap::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(FeatureMap::from_bytes(b"FMAX"), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(FeatureMap::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn lookup_examples() {
        let f = map(4, 6, 2);
        assert_eq!(lookup_feature(&f, 3, 2, 6, 4), f.pixel(3, 2));
        assert_eq!(lookup_feature(&f, 3, 5, 12, 8), f.pixel(1, 2));
        assert_eq!(lookup_feature(&f, 11, 7, 12, 8), f.pixel(5, 3));
    }

    #[test]
    fn autoencoder_rejects_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            FeatureAutoencoder::new(32, &AutoencoderConfig::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn autoencoder_gradient_matches_finite_differences() {
        let cfg = AutoencoderConfig {
            latent_dim: 3,
            hidden_dim: 5,
            sparsity: 0.3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ae = FeatureAutoencoder::new(6, &cfg, &mut rng).unwrap();
        let batch: Vec<f32> = (0..4 * 6).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.2).collect();
        let mut ge = vec![0.0; ae.encoder.param_count()];
        let mut gd = vec![0.0; ae.decoder.param_count()];
        ae.loss_and_grads(&batch, &mut ge, &mut gd).unwrap();
        let h = 1e-3f32;
        for (i, &g) in ge.iter().enumerate().step_by(5) {
            let mut a = ae.clone();
            a.encoder.params_mut()[i] += h;
            let mut b = ae.clone();
            b.encoder.params_mut()[i] -= h;
            let (mut s1, mut s2) = (vec![0.0; ge.len()], vec![0.0; gd.len()]);
            let lp = a.loss_and_grads(&batch, &mut s1, &mut s2).unwrap().total;
            let lm = b.loss_and_grads(&batch, &mut s1, &mut s2).unwrap().total;
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!((fd - g as f64).abs() < 2e-2 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn repeated_vector_is_reconstructed() {
        let cfg = AutoencoderConfig {
            latent_dim: 4,
            hidden_dim: 16,
            sparsity: 0.0,
            iterations: 1500,
            batch_size: 8,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let v: Vec<f32> = (0..12).map(|i| (i as f32 * 0.5).cos()).collect();
        let samples: Vec<f32> = v.iter().cycle().take(12 * 32).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ae = FeatureAutoencoder::new(12, &cfg, &mut rng).unwrap();
        ae.train(&samples, &cfg).unwrap();
        assert!(ae.relative_reconstruction_error(&v).unwrap() < 1e-2);
    }

    #[test]
    fn zero_bias_encoder_maps_zero_to_zero() {
        let cfg = AutoencoderConfig {
            latent_dim: 4,
            hidden_dim: 8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ae = FeatureAutoencoder::new(8, &cfg, &mut rng).unwrap();
        let zero = FeatureMap::new(2, 2, 8, vec![0.0; 32]).unwrap();
        let t = encode_targets(&zero, &ae).unwrap();
        assert_eq!(t.dim, 4);
        assert!(t.data.iter().all(|&v| v == 0.0));
        assert_eq!(encode_targets(&zero, &ae).unwrap(), t);
        let restored = FeatureAutoencoder::from_json(&ae.to_json().unwrap()).unwrap();
        assert_eq!(restored.encoder.params(), ae.encoder.params());
    }

    #[test]
    fn pca_constant_map_is_gray() {
        let f = FeatureMap::new(3, 3, 4, vec![0.25; 36]).unwrap();
        assert!(pca_rgb(&f, 10_000).iter().all(|&p| p == [0.5; 3]));
    }

    #[test]
    fn pca_separates_clusters() {
        let emb = class_embeddings(3, 16, 1.0, 9);
        let classes: Vec<u16> = (0..30).map(|i| (i % 3) as u16).collect();
        let params = SynthFeatureParams {
            dim: 16,
            noise: 0.01,
            smoothing_radius: 0,
            stride: 1,
            seed: 1,
        };
        let f = synth_features(&classes, 6, 5, &emb, &params).unwrap();
        let rgb = pca_rgb(&f, 10_000);
        assert!(rgb.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        for a in 0..3 {
            for b in a + 1..3 {
                let d = (0..3).map(|c| (rgb[a][c] - rgb[b][c]).abs()).fold(0.0f32, f32::max);
                assert!(d > 0.2, "clusters {a},{b} too close: {d}");
            }
        }
        let pca = PcaProjector::fit(&f.data, 16).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = pca.directions[i].iter().zip(&pca.directions[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn synth_features_without_noise_are_embeddings() {
        let emb = class_embeddings(2, 8, 1.0, 4);
        let classes = [0u16, 1, 1, 0, 1, 0];
        let params = SynthFeatureParams {
            dim: 8,
            noise: 0.0,
            smoothing_radius: 0,
            stride: 1,
            seed: 0,
        };
        let f = synth_features(&classes, 3, 2, &emb, &params).unwrap();
        for (i, &c) in classes.iter().enumerate() {
            assert_eq!(f.pixel(i as u32 % 3, i as u32 / 3), &emb[c as usize][..]);
        }
        let strided = synth_features(&classes, 3, 2, &emb, &SynthFeatureParams { stride: 2, ..params }).unwrap();
        assert_eq!((strided.width, strided.height), (2, 1));
    }
}
