//! Optimization loop, full-frame rendering and evaluation metrics.

pub mod hitl;
pub mod metrics;
pub mod propagation;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::EncoderMode;
use crate::error::{Error, Result};
use crate::features::AutoencoderConfig;
use crate::field::{Field, FieldConfig, Heads, ParamGroup};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::objective::{
    evaluate_batch, render_rays, sample_ray_batch, AnnotationIndex, BatchSamples, LossBreakdown, LossWeights,
};
use crate::rendering::{pixel_center, Camera, Ray};
use crate::scene::{Checkpoint, GroupState, SceneDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub field: FieldConfig,
    /// Adam step size of the MLP groups.
    pub learning_rate: f64,
    /// Adam step size of the hash tables.
    pub grid_learning_rate: f64,
    pub tile_size: u32,
    /// Iterations between metric records.
    pub log_every: u64,
    pub autoencoder: AutoencoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(EncoderMode::Hybrid, 3)
    }
}

impl TrainConfig {
    pub fn for_mode(mode: EncoderMode, num_classes: usize) -> Self {
        Self {
            iterations: 2000,
            batch_size: 256,
            samples_per_ray: 64,
            seed: 0,
            loss_weights: LossWeights::default(),
            field: FieldConfig::for_mode(mode, num_classes),
            learning_rate: 5e-3,
            grid_learning_rate: 1e-2,
            tile_size: 16,
            log_every: 100,
            autoencoder: AutoencoderConfig::default(),
        }
    }

    /// Switches the encoder, resetting the trunk size to that mode's default.
    pub fn set_encoder(&mut self, mode: EncoderMode) {
        let d = FieldConfig::for_mode(mode, self.field.num_classes);
        self.field.encoder = mode;
        self.field.trunk_width = d.trunk_width;
        self.field.trunk_depth = d.trunk_depth;
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.samples_per_ray < 2 || self.tile_size == 0 {
            return Err(Error::Config("batch size and samples per ray must be >= 2, tile size >= 1".into()));
        }
        if self.field.feature_dim != self.autoencoder.latent_dim {
            return Err(Error::Config(format!(
                "field feature dim {} differs from autoencoder latent dim {}",
                self.field.feature_dim, self.autoencoder.latent_dim
            )));
        }
        self.loss_weights.validate()?;
        self.field.validate()
    }

    fn adam_for(&self, group: ParamGroup) -> AdamConfig {
        let lr = if group == ParamGroup::HashGrid {
            self.grid_learning_rate
        } else {
            self.learning_rate
        };
        AdamConfig {
            epsilon: 1e-15,
            ..AdamConfig::with_learning_rate(lr)
        }
    }
}

/// Owns the field, its optimizer state and the iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    field: Field<f32>,
    optim: Vec<(ParamGroup, AdamState<f32>)>,
    iteration: u64,
    annotation_revision: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let field = Field::new(config.field.clone())?;
        let optim = field
            .groups()
            .into_iter()
            .map(|g| (g, AdamState::new(field.group(g).len(), config.adam_for(g))))
            .collect();
        Ok(Self {
            config,
            field,
            optim,
            iteration: 0,
            annotation_revision: 0,
        })
    }

    /// Resumes from a checkpoint; the field config must match exactly.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_compatible(&config.field)?;
        let mut t = Self::new(config)?;
        for g in &ckpt.groups {
            let Some(slot) = t.optim.iter_mut().find(|(k, _)| *k == g.group) else {
                return Err(Error::Config(format!("checkpoint has unexpected group `{}`", g.group.name())));
            };
            let dst = t.field.group_mut(g.group);
            if dst.len() != g.params.len() {
                return Err(Error::Config(format!("group `{}` size mismatch", g.group.name())));
            }
            dst.copy_from_slice(&g.params);
            let lr = slot.1.config.learning_rate;
            slot.1 = g.adam.clone();
            slot.1.config.learning_rate = lr;
        }
        t.iteration = ckpt.iteration;
        t.annotation_revision = ckpt.annotation_revision;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            field_config: self.config.field.clone(),
            train_config: serde_json::to_value(&self.config).unwrap_or_default(),
            iteration: self.iteration,
            annotation_revision: self.annotation_revision,
            groups: self
                .optim
                .iter()
                .map(|(g, s)| GroupState {
                    group: *g,
                    params: self.field.group(*g).to_vec(),
                    adam: s.clone(),
                })
                .collect(),
        }
    }

    /// Appends a semantic class; optimizer moments for the new unit start at zero.
    pub fn add_class(&mut self) -> Result<()> {
        if let Some((_, state)) = self.optim.iter_mut().find(|(g, _)| *g == ParamGroup::Semantic) {
            state.first_moment = self.field.grow_semantic_layout(&state.first_moment, 0.0);
            state.second_moment = self.field.grow_semantic_layout(&state.second_moment, 0.0);
        }
        self.field.add_class()?;
        self.config.field.num_classes += 1;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Loss weights may change between steps (e.g. once labels arrive).
    pub fn set_loss_weights(&mut self, weights: LossWeights) -> Result<()> {
        weights.validate()?;
        self.config.loss_weights = weights;
        Ok(())
    }

    pub fn field(&self) -> &Field<f32> {
        &self.field
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn annotation_revision(&self) -> u64 {
        self.annotation_revision
    }

    /// RNG for one iteration, independent of how training was split into calls.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration);
        rng
    }

    /// One Adam step on a freshly sampled batch. On a non-finite loss or
    /// gradient nothing is updated.
    pub fn step(&mut self, dataset: &SceneDataset, annotations: &AnnotationIndex) -> Result<LossBreakdown> {
        let mut rng = self.step_rng();
        let batch = sample_ray_batch(dataset, annotations, self.config.batch_size, &mut rng)?;
        let samples = BatchSamples::draw(&batch.rays, self.config.samples_per_ray, true, &mut rng);
        let eval = evaluate_batch(&self.field, &batch, &samples, &self.config.loss_weights, true)?;
        if !eval.losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        let grads = eval.grads.expect("gradients requested");
        let semantic = self.config.loss_weights.needs_semantic_heads();
        for (g, _) in &self.optim {
            if grads.group(*g).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: g.name().to_owned(),
                });
            }
        }
        for (g, state) in &mut self.optim {
            if !semantic && matches!(g, ParamGroup::Feature | ParamGroup::Semantic) {
                continue;
            }
            adam_step(self.field.group_mut(*g), grads.group(*g), state, g.name())?;
        }
        self.iteration += 1;
        self.annotation_revision = annotations.revision;
        Ok(eval.losses)
    }

    /// Runs `steps` iterations, calling `on_log` every `log_every` iterations
    /// and after the last one.
    pub fn train<F>(&mut self, dataset: &SceneDataset, annotations: &AnnotationIndex, steps: u64, mut on_log: F) -> Result<LossBreakdown>
    where
        F: FnMut(&Trainer, &LossBreakdown) -> Result<()>,
    {
        let mut last = LossBreakdown::default();
        for i in 0..steps {
            last = self.step(dataset, annotations)?;
            let every = self.config.log_every.max(1);
            if self.iteration.is_multiple_of(every) || i + 1 == steps {
                on_log(self, &last)?;
            }
        }
        Ok(last)
    }
}

/// Full-frame render outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRender {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
    /// Argmax class per pixel; empty without semantic heads.
    pub classes: Vec<u16>,
    /// `D` values per pixel; empty without semantic heads.
    pub features: Vec<f32>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub tile_size: u32,
    pub semantic: bool,
}

impl RenderOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            samples_per_ray: config.samples_per_ray,
            tile_size: config.tile_size,
            semantic: true,
        }
    }
}

/// Renders every pixel of `camera` with evenly spaced samples, in square
/// tiles processed in parallel. Results do not depend on the tile size.
pub fn render_frame(field: &Field<f32>, camera: &Camera, near: f64, far: f64, options: &RenderOptions) -> Result<FrameRender> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let ts = options.tile_size.max(1);
    let tiles: Vec<(u32, u32)> = (0..h.div_ceil(ts))
        .flat_map(|ty| (0..w.div_ceil(ts)).map(move |tx| (tx * ts, ty * ts)))
        .collect();
    let heads = if options.semantic { Heads::ALL } else { Heads::RADIANCE };
    let cfg = field.config();
    let (c, d) = (cfg.num_classes, cfg.feature_dim);
    let origin = camera.center();
    let rendered: Vec<(Vec<(u32, u32)>, crate::objective::BatchRender)> = tiles
        .par_iter()
        .map(|&(x0, y0)| {
            let pixels: Vec<(u32, u32)> = (y0..(y0 + ts).min(h))
                .flat_map(|y| (x0..(x0 + ts).min(w)).map(move |x| (x, y)))
                .collect();
            let rays: Vec<Ray> = pixels
                .iter()
                .map(|&(x, y)| {
                    let (u, v) = pixel_center(x, y);
                    Ray {
                        origin,
                        direction: camera.world_direction(u, v),
                        near,
                        far,
                    }
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let samples = BatchSamples::draw(&rays, options.samples_per_ray, false, &mut rng);
            render_rays(field, &rays, &samples, heads).map(|r| (pixels, r))
        })
        .collect::<Result<_>>()?;
    let n = camera.pixel_count();
    let mut out = FrameRender {
        width: w,
        height: h,
        rgb: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        opacity: vec![0.0; n],
        classes: if options.semantic { vec![0; n] } else { Vec::new() },
        features: if options.semantic { vec![0.0; n * d] } else { Vec::new() },
        feature_dim: if options.semantic { d } else { 0 },
    };
    for (pixels, r) in rendered {
        for (k, &(x, y)) in pixels.iter().enumerate() {
            let i = (y * w + x) as usize;
            out.rgb[i] = r.rgb[k];
            out.depth[i] = r.depth[k];
            out.opacity[i] = r.opacity[k];
            if options.semantic {
                let logits = &r.logits[k * c..(k + 1) * c];
                out.classes[i] = argmax(logits) as u16;
                out.features[i * d..(i + 1) * d].copy_from_slice(&r.features[k * d..(k + 1) * d]);
            }
        }
    }
    Ok(out)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-class IoU over one or more aligned (prediction, reference) maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and reference.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn evaluate_iou(pairs: &[(&[u16], &[u16])], num_classes: usize) -> Result<IouReport> {
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (pred, reference) in pairs {
        if pred.len() != reference.len() {
            return Err(Error::Data(format!(
                "class maps differ in size: {} vs {}",
                pred.len(),
                reference.len()
            )));
        }
        for (&p, &r) in pred.iter().zip(reference.iter()) {
            let (p, r) = (p as usize, r as usize);
            if p >= num_classes || r >= num_classes {
                return Err(Error::Data(format!("class id {} out of range", p.max(r))));
            }
            if p == r {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[r] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport { per_class, miou })
}

/// Peak signal-to-noise ratio in dB for colors in `[0, 1]`.
pub fn psnr(pred: &[[f32; 3]], target: &[[f32; 3]]) -> f64 {
    let n = pred.len().min(target.len()).max(1);
    let mse: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * n) as f64;
    -10.0 * mse.max(1e-20).log10()
}

/// Mean PSNR over the given frames.
pub fn evaluate_psnr(field: &Field<f32>, dataset: &SceneDataset, frames: &[usize], options: &RenderOptions) -> Result<f64> {
    let opts = RenderOptions {
        semantic: false,
        ..*options
    };
    let mut sum = 0.0;
    for &f in frames {
        let frame = &dataset.frames[f];
        let r = render_frame(field, &frame.camera, dataset.near, dataset.far, &opts)?;
        sum += psnr(&r.rgb, &frame.rgb);
    }
    Ok(sum / frames.len().max(1) as f64)
}

/// Renders `frames` and scores their class maps against the reference labels.
pub fn evaluate_segmentation(
    field: &Field<f32>,
    dataset: &SceneDataset,
    frames: &[usize],
    options: &RenderOptions,
) -> Result<(IouReport, Vec<FrameRender>)> {
    let opts = RenderOptions {
        semantic: true,
        ..*options
    };
    let renders: Vec<FrameRender> = frames
        .iter()
        .map(|&f| render_frame(field, &dataset.frames[f].camera, dataset.near, dataset.far, &opts))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for (r, &f) in renders.iter().zip(frames) {
        let labels = dataset.frames[f]
            .labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("frame `{}` has no reference labels", dataset.frames[f].id)))?;
        pairs.push((r.classes.as_slice(), labels));
    }
    Ok((evaluate_iou(&pairs, dataset.num_classes())?, renders))
}
