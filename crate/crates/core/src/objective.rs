//! Ray losses, their weighted combination, sparse annotations and the
//! class-balanced ray sampler, plus the batched forward/backward that ties
//! sampling, the field and compositing together.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::lookup_feature;
use crate::field::{Field, FieldGrads, Heads, ParamGroup};
use crate::nn::{finite_difference_at, relative_error};
use crate::real::Real;
use crate::rendering::{
    composite_backward_into, compositing_weights, pixel_center, sample_distances, Ray,
};
use crate::scene::SceneDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub semantic: f64,
    pub feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 0.05,
            semantic: 1.0,
            feature: 0.5,
        }
    }
}

impl LossWeights {
    pub const RADIANCE_ONLY: LossWeights = LossWeights {
        depth: 0.0,
        semantic: 0.0,
        feature: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("depth", self.depth), ("semantic", self.semantic), ("feature", self.feature)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Whether the feature and semantic heads take part in the objective.
    pub fn needs_semantic_heads(&self) -> bool {
        self.semantic > 0.0 || self.feature > 0.0
    }
}

/// Squared Euclidean color error and its gradient.
pub fn loss_rgb<T: Real>(pred: &[T], target: &[T]) -> (T, [T; 3]) {
    let mut grad = [T::zero(); 3];
    let mut loss = T::zero();
    for c in 0..3 {
        let d = pred[c] - target[c];
        loss += d * d;
        grad[c] = d + d;
    }
    (loss, grad)
}

/// `|pred - target|`, or exactly zero when the target is absent.
pub fn loss_depth<T: Real>(pred: T, target: Option<T>) -> (T, T) {
    match target {
        Some(t) => {
            let d = pred - t;
            let g = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            (d.abs(), g)
        }
        None => (T::zero(), T::zero()),
    }
}

/// Softmax cross-entropy of integrated logits; zero when unannotated.
pub fn loss_semantic<T: Real>(logits: &[T], target: Option<u32>) -> Result<(T, Vec<T>)> {
    let Some(class) = target else {
        return Ok((T::zero(), vec![T::zero(); logits.len()]));
    };
    let class = class as usize;
    if class >= logits.len() {
        return Err(Error::Data(format!(
            "class id {class} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() - (logits[class] - max);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[class] -= T::one();
    Ok((loss, grad))
}

/// L1 distance between rendered and target features.
pub fn loss_feature<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::Config(format!(
            "feature dims differ: rendered {} vs target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.abs();
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Per-ray unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayLosses {
    pub rgb: f64,
    pub depth: f64,
    pub semantic: f64,
    pub feature: f64,
}

/// Mean terms over a batch and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub depth: f64,
    pub semantic: f64,
    pub feature: f64,
    /// Weighted contributions `lambda * term`.
    pub weighted_depth: f64,
    pub weighted_semantic: f64,
    pub weighted_feature: f64,
    pub total: f64,
}

/// Mean over rays of `L_rgb + l_d L_d + l_s L_s + l_f L_f`.
pub fn loss_total(rays: &[RayLosses], weights: &LossWeights) -> LossBreakdown {
    if rays.is_empty() {
        return LossBreakdown::default();
    }
    let n = rays.len() as f64;
    let mean = |f: fn(&RayLosses) -> f64| rays.iter().map(f).sum::<f64>() / n;
    let rgb = mean(|r| r.rgb);
    let depth = mean(|r| r.depth);
    let semantic = mean(|r| r.semantic);
    let feature = mean(|r| r.feature);
    let weighted_depth = weights.depth * depth;
    let weighted_semantic = weights.semantic * semantic;
    let weighted_feature = weights.feature * feature;
    LossBreakdown {
        rgb,
        depth,
        semantic,
        feature,
        weighted_depth,
        weighted_semantic,
        weighted_feature,
        total: rgb + weighted_depth + weighted_semantic + weighted_feature,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    /// Display color, 8-bit RGB.
    pub color: [u8; 3],
}

/// One user stroke after rasterization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStroke {
    pub id: u64,
    pub frame: usize,
    pub class: u32,
    /// `(x, y)` pixel coordinates.
    pub pixels: Vec<[u32; 2]>,
}

/// Sparse pixel labels accumulated from strokes. A pixel covered by several
/// strokes takes the class of the most recent one.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    classes: Vec<ClassInfo>,
    frame_sizes: Vec<(u32, u32)>,
    strokes: Vec<AnnotationStroke>,
    next_id: u64,
    revision: u64,
}

impl AnnotationSet {
    pub fn new(classes: Vec<ClassInfo>, frame_sizes: Vec<(u32, u32)>) -> Self {
        Self {
            classes,
            frame_sizes,
            strokes: Vec::new(),
            next_id: 1,
            revision: 0,
        }
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn frame_sizes(&self) -> &[(u32, u32)] {
        &self.frame_sizes
    }

    pub fn strokes(&self) -> &[AnnotationStroke] {
        &self.strokes
    }

    /// Monotone counter bumped by every mutation.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn add_class(&mut self, name: String, color: [u8; 3]) -> u32 {
        let id = self.classes.len() as u32;
        self.classes.push(ClassInfo { id, name, color });
        self.revision += 1;
        id
    }

    fn validate(&self, frame: usize, class: u32, pixels: &[[u32; 2]]) -> Result<()> {
        let &(w, h) = self
            .frame_sizes
            .get(frame)
            .ok_or_else(|| Error::Data(format!("unknown frame {frame}")))?;
        if class as usize >= self.classes.len() {
            return Err(Error::Data(format!("unknown class id {class}")));
        }
        if pixels.is_empty() {
            return Err(Error::Data("stroke has no pixels".into()));
        }
        if let Some(p) = pixels.iter().find(|p| p[0] >= w || p[1] >= h) {
            return Err(Error::Data(format!(
                "pixel ({}, {}) outside {w}x{h} frame {frame}",
                p[0], p[1]
            )));
        }
        Ok(())
    }

    /// Adds a stroke and returns its id.
    pub fn add_stroke(&mut self, frame: usize, class: u32, pixels: Vec<[u32; 2]>) -> Result<u64> {
        self.validate(frame, class, &pixels)?;
        let id = self.next_id;
        self.insert(AnnotationStroke { id, frame, class, pixels })?;
        Ok(id)
    }

    /// Inserts a stroke that already carries an id (e.g. loaded from disk).
    pub fn insert(&mut self, stroke: AnnotationStroke) -> Result<()> {
        self.validate(stroke.frame, stroke.class, &stroke.pixels)?;
        if self.strokes.iter().any(|s| s.id == stroke.id) {
            return Err(Error::Data(format!("duplicate stroke id {}", stroke.id)));
        }
        self.next_id = self.next_id.max(stroke.id + 1);
        self.strokes.push(stroke);
        self.revision += 1;
        Ok(())
    }

    pub fn remove_stroke(&mut self, id: u64) -> bool {
        let before = self.strokes.len();
        self.strokes.retain(|s| s.id != id);
        let removed = self.strokes.len() != before;
        if removed {
            self.revision += 1;
        }
        removed
    }

    /// Resolved labels of one frame, keyed by `(x, y)`.
    pub fn frame_labels(&self, frame: usize) -> BTreeMap<(u32, u32), u32> {
        let mut labels = BTreeMap::new();
        for s in self.strokes.iter().filter(|s| s.frame == frame) {
            for p in &s.pixels {
                labels.insert((p[0], p[1]), s.class);
            }
        }
        labels
    }

    pub fn label_at(&self, frame: usize, x: u32, y: u32) -> Option<u32> {
        self.strokes
            .iter()
            .rev()
            .filter(|s| s.frame == frame)
            .find(|s| s.pixels.contains(&[x, y]))
            .map(|s| s.class)
    }

    pub fn labeled_pixel_count(&self) -> usize {
        self.index().labeled_pixels()
    }

    pub fn index(&self) -> AnnotationIndex {
        AnnotationIndex::build(self)
    }
}

/// Lookup structure derived from an [`AnnotationSet`] revision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationIndex {
    pub revision: u64,
    /// Per frame: resolved `(x, y) -> class`.
    frames: Vec<BTreeMap<(u32, u32), u32>>,
    /// Per class: labeled `(frame, x, y)` in deterministic order.
    by_class: Vec<Vec<(usize, u32, u32)>>,
}

impl AnnotationIndex {
    pub fn build(set: &AnnotationSet) -> Self {
        let frames: Vec<_> = (0..set.frame_sizes.len()).map(|f| set.frame_labels(f)).collect();
        let mut by_class = vec![Vec::new(); set.classes.len()];
        for (f, labels) in frames.iter().enumerate() {
            for (&(x, y), &c) in labels {
                by_class[c as usize].push((f, x, y));
            }
        }
        Self {
            revision: set.revision,
            frames,
            by_class,
        }
    }

    pub fn label(&self, frame: usize, x: u32, y: u32) -> Option<u32> {
        self.frames.get(frame).and_then(|m| m.get(&(x, y)).copied())
    }

    /// Classes with at least one labeled pixel.
    pub fn available_classes(&self) -> Vec<u32> {
        (0..self.by_class.len())
            .filter(|&c| !self.by_class[c].is_empty())
            .map(|c| c as u32)
            .collect()
    }

    pub fn class_pixels(&self, class: u32) -> &[(usize, u32, u32)] {
        &self.by_class[class as usize]
    }

    pub fn labeled_pixels(&self) -> usize {
        self.frames.iter().map(BTreeMap::len).sum()
    }
}

/// Rays and supervision targets for one optimization step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayBatch {
    pub frames: Vec<usize>,
    pub pixels: Vec<[u32; 2]>,
    pub rays: Vec<Ray>,
    pub colors: Vec<[f32; 3]>,
    pub depths: Vec<Option<f32>>,
    pub classes: Vec<Option<u32>>,
    /// Encoded feature targets, `feature_dim` values per ray when present.
    pub features: Vec<Option<Vec<f32>>>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    /// `n` random rays aimed near the origin with random targets. Depth,
    /// class and feature targets are each absent on a fixed subset of rays.
    pub fn random(n: usize, classes: usize, feature_dim: usize, seed: u64) -> RayBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = RayBatch::default();
        for i in 0..n {
            let origin = nalgebra::Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.6);
            let target = nalgebra::Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
            b.frames.push(0);
            b.pixels.push([i as u32, 0]);
            b.rays.push(Ray {
                origin,
                direction: (target - origin).normalize(),
                near: 0.4,
                far: 2.6,
            });
            b.colors.push([rng.random(), rng.random(), rng.random()]);
            b.depths.push((i % 2 == 0).then(|| rng.random_range(0.8..2.0)));
            b.classes.push((i % 3 != 0).then(|| rng.random_range(0..classes as u32)));
            b.features.push((i % 4 != 1).then(|| (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect()));
        }
        b
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    fn push(&mut self, dataset: &SceneDataset, annotations: &AnnotationIndex, frame: usize, x: u32, y: u32) {
        let f = &dataset.frames[frame];
        let w = f.camera.width;
        let idx = (y * w + x) as usize;
        let (u, v) = pixel_center(x, y);
        self.frames.push(frame);
        self.pixels.push([x, y]);
        self.rays.push(Ray {
            origin: f.camera.center(),
            direction: f.camera.world_direction(u, v),
            near: dataset.near,
            far: dataset.far,
        });
        self.colors.push(f.rgb[idx]);
        self.depths.push(f.depth.as_ref().map(|d| d[idx]).filter(|&d| d > 0.0));
        self.classes.push(annotations.label(frame, x, y));
        self.features.push(f.targets.as_ref().map(|t| {
            lookup_feature(t, x, y, f.camera.width, f.camera.height).to_vec()
        }));
    }
}

/// Draws `ceil(B/2)` pixels uniformly over all training pixels and `floor(B/2)`
/// by first choosing an annotated class uniformly, then one of its pixels.
/// Without annotations the whole batch is uniform.
pub fn sample_ray_batch<R: Rng + ?Sized>(
    dataset: &SceneDataset,
    annotations: &AnnotationIndex,
    batch_size: usize,
    rng: &mut R,
) -> Result<RayBatch> {
    if batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let train = dataset.train_frames();
    if train.is_empty() {
        return Err(Error::Data("scene has no training frames".into()));
    }
    let mut offsets = Vec::with_capacity(train.len());
    let mut total = 0usize;
    for &f in &train {
        offsets.push(total);
        total += dataset.frames[f].camera.pixel_count();
    }
    let available: Vec<u32> = annotations
        .available_classes()
        .into_iter()
        .filter(|&c| {
            annotations
                .class_pixels(c)
                .iter()
                .any(|&(f, _, _)| dataset.frames[f].split == crate::scene::Split::Train)
        })
        .collect();
    let balanced = if available.is_empty() { 0 } else { batch_size / 2 };
    let uniform = batch_size - balanced;

    let mut batch = RayBatch::default();
    for _ in 0..uniform {
        let g = rng.random_range(0..total);
        let slot = offsets.partition_point(|&o| o <= g) - 1;
        let frame = train[slot];
        let local = g - offsets[slot];
        let w = dataset.frames[frame].camera.width as usize;
        batch.push(dataset, annotations, frame, (local % w) as u32, (local / w) as u32);
    }
    for _ in 0..balanced {
        let class = available[rng.random_range(0..available.len())];
        let pixels: Vec<_> = annotations
            .class_pixels(class)
            .iter()
            .filter(|&&(f, _, _)| dataset.frames[f].split == crate::scene::Split::Train)
            .collect();
        let &&(frame, x, y) = &pixels[rng.random_range(0..pixels.len())];
        batch.push(dataset, annotations, frame, x, y);
    }
    Ok(batch)
}

/// Sample distances shared by every ray of a batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSamples {
    pub per_ray: usize,
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl BatchSamples {
    pub fn draw<R: Rng + ?Sized>(rays: &[Ray], per_ray: usize, stratified: bool, rng: &mut R) -> Self {
        let mut t = vec![0.0; rays.len() * per_ray];
        let mut deltas = vec![0.0; rays.len() * per_ray];
        for (i, ray) in rays.iter().enumerate() {
            let span = i * per_ray..(i + 1) * per_ray;
            sample_distances(ray.near, ray.far, stratified, rng, &mut t[span.clone()], &mut deltas[span]);
        }
        Self { per_ray, t, deltas }
    }
}

/// Per-ray integrated outputs of a batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRender {
    pub rgb: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub opacity: Vec<f32>,
    /// `rays x C`, empty without semantic heads.
    pub logits: Vec<f32>,
    /// `rays x D`, empty without semantic heads.
    pub features: Vec<f32>,
}

#[derive(Debug)]
pub struct BatchEvaluation<T> {
    pub losses: LossBreakdown,
    pub per_ray: Vec<RayLosses>,
    pub render: BatchRender,
    pub grads: Option<FieldGrads<T>>,
}

/// Renders every ray of `rays` at the given sample distances, integrating
/// color, depth, logits and features. Returns per-ray channel vectors laid
/// out `[r, g, b, depth, logits.., features..]` together with everything the
/// backward pass needs.
struct Integrated<T> {
    channels: usize,
    values: Vec<T>,
    weights: Vec<T>,
    transmittance: Vec<T>,
    result: Vec<T>,
}

fn integrate<T: Real>(
    samples: &crate::field::FieldSamples<T>,
    t: &[f64],
    deltas: &[T],
    rays: usize,
    per_ray: usize,
    classes: usize,
    feature_dim: usize,
) -> Integrated<T> {
    let semantic = !samples.logits.is_empty();
    let k = 4 + if semantic { classes + feature_dim } else { 0 };
    let n = rays * per_ray;
    let mut values = vec![T::zero(); n * k];
    for s in 0..n {
        let row = &mut values[s * k..(s + 1) * k];
        row[..3].copy_from_slice(&samples.rgb[s * 3..s * 3 + 3]);
        row[3] = T::lit(t[s]);
        if semantic {
            row[4..4 + classes].copy_from_slice(&samples.logits[s * classes..(s + 1) * classes]);
            row[4 + classes..].copy_from_slice(&samples.features[s * feature_dim..(s + 1) * feature_dim]);
        }
    }
    let mut weights = vec![T::zero(); n];
    let mut transmittance = vec![T::zero(); n];
    let mut result = vec![T::zero(); rays * k];
    for r in 0..rays {
        let span = r * per_ray..(r + 1) * per_ray;
        compositing_weights(
            &samples.sigma[span.clone()],
            &deltas[span.clone()],
            &mut weights[span.clone()],
            &mut transmittance[span.clone()],
        );
        let out = &mut result[r * k..(r + 1) * k];
        for s in span {
            let w = weights[s];
            for (o, &v) in out.iter_mut().zip(&values[s * k..(s + 1) * k]) {
                *o += w * v;
            }
        }
    }
    Integrated {
        channels: k,
        values,
        weights,
        transmittance,
        result,
    }
}

fn ray_points<T: Real>(rays: &[Ray], samples: &BatchSamples) -> (Vec<T>, Vec<T>) {
    let n = rays.len() * samples.per_ray;
    let mut points = Vec::with_capacity(3 * n);
    let mut dirs = Vec::with_capacity(3 * n);
    for (r, ray) in rays.iter().enumerate() {
        for s in 0..samples.per_ray {
            let p = ray.at(samples.t[r * samples.per_ray + s]);
            points.extend([T::lit(p.x), T::lit(p.y), T::lit(p.z)]);
            dirs.extend([
                T::lit(ray.direction.x),
                T::lit(ray.direction.y),
                T::lit(ray.direction.z),
            ]);
        }
    }
    (points, dirs)
}

fn to_render<T: Real>(integrated: &Integrated<T>, rays: usize, classes: usize, feature_dim: usize) -> BatchRender {
    let k = integrated.channels;
    let semantic = k > 4;
    let mut render = BatchRender {
        rgb: Vec::with_capacity(rays),
        depth: Vec::with_capacity(rays),
        opacity: Vec::with_capacity(rays),
        logits: Vec::new(),
        features: Vec::new(),
    };
    let per_ray = integrated.weights.len() / rays.max(1);
    for r in 0..rays {
        let v = &integrated.result[r * k..(r + 1) * k];
        render.rgb.push([v[0].as_f64() as f32, v[1].as_f64() as f32, v[2].as_f64() as f32]);
        render.depth.push(v[3].as_f64() as f32);
        let op: T = integrated.weights[r * per_ray..(r + 1) * per_ray].iter().copied().sum();
        render.opacity.push(op.as_f64() as f32);
        if semantic {
            render.logits.extend(v[4..4 + classes].iter().map(|x| x.as_f64() as f32));
            render.features.extend(v[4 + classes..4 + classes + feature_dim].iter().map(|x| x.as_f64() as f32));
        }
    }
    render
}

/// Forward-only rendering of `rays` (no losses).
pub fn render_rays<T: Real>(field: &Field<T>, rays: &[Ray], samples: &BatchSamples, heads: Heads) -> Result<BatchRender> {
    let cfg = field.config();
    let (points, dirs) = ray_points::<T>(rays, samples);
    let (out, _) = field.query(&points, &dirs, heads)?;
    let deltas: Vec<T> = samples.deltas.iter().map(|&d| T::lit(d)).collect();
    let integrated = integrate(&out, &samples.t, &deltas, rays.len(), samples.per_ray, cfg.num_classes, cfg.feature_dim);
    Ok(to_render(&integrated, rays.len(), cfg.num_classes, cfg.feature_dim))
}

/// Evaluates the combined objective on a batch and, when `with_grads`,
/// backpropagates it to every parameter group.
pub fn evaluate_batch<T: Real>(
    field: &Field<T>,
    batch: &RayBatch,
    samples: &BatchSamples,
    weights: &LossWeights,
    with_grads: bool,
) -> Result<BatchEvaluation<T>> {
    weights.validate()?;
    let cfg = field.config();
    let (classes, fdim) = (cfg.num_classes, cfg.feature_dim);
    let rays = batch.len();
    let per_ray = samples.per_ray;
    if samples.t.len() != rays * per_ray {
        return Err(Error::Usage("sample set does not match the batch".into()));
    }
    let heads = if weights.needs_semantic_heads() { Heads::ALL } else { Heads::RADIANCE };
    let (points, dirs) = ray_points::<T>(&batch.rays, samples);
    let (out, trace) = field.query(&points, &dirs, heads)?;
    let deltas: Vec<T> = samples.deltas.iter().map(|&d| T::lit(d)).collect();
    let integ = integrate(&out, &samples.t, &deltas, rays, per_ray, classes, fdim);
    let k = integ.channels;
    let semantic = heads.semantic;

    let inv_n = T::lit(1.0 / rays as f64);
    let (wd, ws, wf) = (T::lit(weights.depth), T::lit(weights.semantic), T::lit(weights.feature));
    let mut per_ray_losses = Vec::with_capacity(rays);
    let mut upstream = vec![T::zero(); rays * k];
    for r in 0..rays {
        let v = &integ.result[r * k..(r + 1) * k];
        let g = &mut upstream[r * k..(r + 1) * k];
        let mut terms = RayLosses::default();

        let target = batch.colors[r].map(|c| T::lit(c as f64));
        let (l_rgb, d_rgb) = loss_rgb(&v[..3], &target);
        terms.rgb = l_rgb.as_f64();
        for c in 0..3 {
            g[c] = d_rgb[c] * inv_n;
        }

        if weights.depth > 0.0 {
            let (l, d) = loss_depth(v[3], batch.depths[r].map(|d| T::lit(d as f64)));
            terms.depth = l.as_f64();
            g[3] = wd * d * inv_n;
        } else if let Some(d) = batch.depths[r] {
            terms.depth = (v[3].as_f64() - d as f64).abs();
        }

        if semantic {
            if let Some(class) = batch.classes[r] {
                let (l, d) = loss_semantic(&v[4..4 + classes], Some(class))?;
                terms.semantic = l.as_f64();
                if weights.semantic > 0.0 {
                    for (gi, di) in g[4..4 + classes].iter_mut().zip(d) {
                        *gi = ws * di * inv_n;
                    }
                }
            }
            if let Some(target) = &batch.features[r] {
                let target: Vec<T> = target.iter().map(|&x| T::lit(x as f64)).collect();
                let (l, d) = loss_feature(&v[4 + classes..], &target)?;
                terms.feature = l.as_f64();
                if weights.feature > 0.0 {
                    for (gi, di) in g[4 + classes..].iter_mut().zip(d) {
                        *gi = wf * di * inv_n;
                    }
                }
            }
        } else if let Some(class) = batch.classes[r] {
            if class as usize >= classes {
                return Err(Error::Data(format!("class id {class} out of range")));
            }
        }
        per_ray_losses.push(terms);
    }
    let losses = loss_total(&per_ray_losses, weights);
    let render = to_render(&integ, rays, classes, fdim);

    let grads = if with_grads {
        let n = rays * per_ray;
        let mut d_sigma = vec![T::zero(); n];
        let mut d_values = vec![T::zero(); n * k];
        for r in 0..rays {
            let span = r * per_ray..(r + 1) * per_ray;
            composite_backward_into(
                &out.sigma[span.clone()],
                &deltas[span.clone()],
                &integ.values[span.start * k..span.end * k],
                k,
                &integ.weights[span.clone()],
                &integ.transmittance[span.clone()],
                &upstream[r * k..(r + 1) * k],
                &mut d_sigma[span.clone()],
                &mut d_values[span.start * k..span.end * k],
            );
        }
        let mut d_rgb = vec![T::zero(); n * 3];
        let (mut d_logits, mut d_feat) = if semantic {
            (vec![T::zero(); n * classes], vec![T::zero(); n * fdim])
        } else {
            (Vec::new(), Vec::new())
        };
        for s in 0..n {
            let row = &d_values[s * k..(s + 1) * k];
            d_rgb[s * 3..s * 3 + 3].copy_from_slice(&row[..3]);
            if semantic {
                d_logits[s * classes..(s + 1) * classes].copy_from_slice(&row[4..4 + classes]);
                d_feat[s * fdim..(s + 1) * fdim].copy_from_slice(&row[4 + classes..]);
            }
        }
        let mut grads = field.zero_grads();
        field.query_backward(&trace, &d_sigma, &d_rgb, &d_feat, &d_logits, &mut grads)?;
        Some(grads)
    } else {
        None
    };
    Ok(BatchEvaluation {
        losses,
        per_ray: per_ray_losses,
        render,
        grads,
    })
}

/// Relative error per parameter group between the analytic gradient of the
/// batch objective and central differences of step `h`, measured on up to
/// `per_group` coordinates: the largest-magnitude analytic entries plus a
/// seeded random selection.
pub fn gradient_check(
    field: &mut Field<f64>,
    batch: &RayBatch,
    samples: &BatchSamples,
    weights: &LossWeights,
    per_group: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<(ParamGroup, f64)>> {
    let analytic = evaluate_batch(field, batch, samples, weights, true)?
        .grads
        .expect("gradients requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Vec::new();
    for g in field.groups() {
        let grads = analytic.group(g);
        if grads.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..grads.len()).collect();
        order.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
        let mut picked: Vec<usize> = order.into_iter().take(per_group / 2).collect();
        while picked.len() < per_group.min(grads.len()) {
            let i = rng.random_range(0..grads.len());
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        let mut failure = None;
        let numeric = finite_difference_at(
            |i, delta| {
                let orig = field.group(g)[i];
                field.group_mut(g)[i] = orig + delta;
                let loss = evaluate_batch(field, batch, samples, weights, false).map(|e| e.losses.total);
                field.group_mut(g)[i] = orig;
                loss.unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &picked,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let exact: Vec<f64> = picked.iter().map(|&i| grads[i]).collect();
        report.push((g, relative_error(&exact, &numeric)));
    }
    Ok(report)
}
