//! The spatial field: encoded position -> geometry MLP -> (density, trunk
//! activation `h`); color MLP(h, encoded view direction) -> rgb;
//! feature MLP(h) -> feature `f`; semantic MLP(f) -> class logits.
//!
//! Features and logits depend on position only; the view direction feeds the
//! color head alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{
    freq_encode, EncodeTrace, EncoderMode, HashGridConfig, PositionEncoder, DIRECTION_FREQUENCIES,
    POSITION_FREQUENCIES,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpTrace};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoder: EncoderMode,
    pub hash_grid: HashGridConfig,
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
    pub trunk_width: usize,
    /// Hidden layers in the geometry MLP before the density/trunk output layer.
    pub trunk_depth: usize,
    pub head_width: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Stop feature/semantic gradients at the trunk.
    #[serde(default)]
    pub detach_semantic: bool,
    pub seed: u64,
}

impl FieldConfig {
    /// Default architecture for an encoder mode: a wide, deep trunk for
    /// sinusoidal encoding and a small one when the hash grid carries capacity.
    pub fn for_mode(encoder: EncoderMode, num_classes: usize) -> Self {
        let (trunk_width, trunk_depth) = match encoder {
            EncoderMode::Freq => (128, 4),
            EncoderMode::HashGrid | EncoderMode::Hybrid => (64, 2),
        };
        Self {
            encoder,
            hash_grid: HashGridConfig::default(),
            position_frequencies: POSITION_FREQUENCIES,
            direction_frequencies: DIRECTION_FREQUENCIES,
            trunk_width,
            trunk_depth,
            head_width: 64,
            feature_dim: 64,
            num_classes,
            detach_semantic: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.feature_dim == 0 || self.trunk_width == 0 || self.head_width == 0 {
            return Err(Error::Config("field widths must be positive".into()));
        }
        if self.encoder != EncoderMode::Freq {
            self.hash_grid.validate()?;
        }
        Ok(())
    }

    pub fn direction_dim(&self) -> usize {
        2 * 3 * self.direction_frequencies
    }
}

/// Named learnable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    HashGrid,
    Geometry,
    Color,
    Feature,
    Semantic,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::HashGrid,
        ParamGroup::Geometry,
        ParamGroup::Color,
        ParamGroup::Feature,
        ParamGroup::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::HashGrid => "hash_grid",
            ParamGroup::Geometry => "geometry",
            ParamGroup::Color => "color",
            ParamGroup::Feature => "feature",
            ParamGroup::Semantic => "semantic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

/// Which output heads a query evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub color: bool,
    /// Feature head plus the semantic classifier that reads it.
    pub semantic: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        color: true,
        semantic: true,
    };
    pub const RADIANCE: Heads = Heads {
        color: true,
        semantic: false,
    };
}

/// Per-sample field outputs for a batch of `n` points.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples<T> {
    pub n: usize,
    pub sigma: Vec<T>,
    /// `n x 3`, empty when the color head was skipped.
    pub rgb: Vec<T>,
    /// `n x D`, empty when the semantic heads were skipped.
    pub features: Vec<T>,
    /// `n x C`, empty when the semantic heads were skipped.
    pub logits: Vec<T>,
}

#[derive(Debug)]
pub struct FieldTrace<T> {
    n: usize,
    heads: Heads,
    encode: EncodeTrace<T>,
    geometry: MlpTrace<T>,
    sigma: Vec<T>,
    color: Option<MlpTrace<T>>,
    feature: Option<MlpTrace<T>>,
    semantic: Option<MlpTrace<T>>,
}

/// Gradients for every parameter group, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads<T> {
    pub hash_grid: Vec<T>,
    pub geometry: Vec<T>,
    pub color: Vec<T>,
    pub feature: Vec<T>,
    pub semantic: Vec<T>,
}

impl<T: Real> FieldGrads<T> {
    pub fn group(&self, g: ParamGroup) -> &[T] {
        match g {
            ParamGroup::HashGrid => &self.hash_grid,
            ParamGroup::Geometry => &self.geometry,
            ParamGroup::Color => &self.color,
            ParamGroup::Feature => &self.feature,
            ParamGroup::Semantic => &self.semantic,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [T] {
        match g {
            ParamGroup::HashGrid => &mut self.hash_grid,
            ParamGroup::Geometry => &mut self.geometry,
            ParamGroup::Color => &mut self.color,
            ParamGroup::Feature => &mut self.feature,
            ParamGroup::Semantic => &mut self.semantic,
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in ParamGroup::ALL {
            self.group_mut(g).iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    config: FieldConfig,
    encoder: PositionEncoder<T>,
    geometry: Mlp<T>,
    color: Mlp<T>,
    feature: Mlp<T>,
    semantic: Mlp<T>,
}

impl<T: Real> Field<T> {
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = PositionEncoder::new(
            config.encoder,
            &config.hash_grid,
            config.position_frequencies,
            &mut rng,
        )?;
        let w = config.trunk_width;
        let mut widths = vec![encoder.output_dim()];
        widths.extend(std::iter::repeat_n(w, config.trunk_depth));
        widths.push(w + 1);
        let geometry = Mlp::new(&widths, Activation::Relu, Activation::Identity, &mut rng)?;
        let color = Mlp::new(
            &[w + config.direction_dim(), config.head_width, 3],
            Activation::Relu,
            Activation::Sigmoid,
            &mut rng,
        )?;
        let feature = Mlp::new(
            &[w, config.head_width, config.feature_dim],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let semantic = Mlp::new(
            &[config.feature_dim, config.head_width, config.num_classes],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self {
            config,
            encoder,
            geometry,
            color,
            feature,
            semantic,
        })
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            geometry: self.geometry.cast(),
            color: self.color.cast(),
            feature: self.feature.cast(),
            semantic: self.semantic.cast(),
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn encoder(&self) -> &PositionEncoder<T> {
        &self.encoder
    }

    /// Parameter groups present in this field (no hash grid in frequency mode).
    pub fn groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| *g != ParamGroup::HashGrid || self.encoder.grid().is_some())
            .collect()
    }

    pub fn group(&self, g: ParamGroup) -> &[T] {
        match g {
            ParamGroup::HashGrid => self.encoder.grid().map_or(&[], |grid| grid.tables()),
            ParamGroup::Geometry => self.geometry.params(),
            ParamGroup::Color => self.color.params(),
            ParamGroup::Feature => self.feature.params(),
            ParamGroup::Semantic => self.semantic.params(),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [T] {
        match g {
            ParamGroup::HashGrid => self
                .encoder
                .grid_mut()
                .map_or(&mut [], |grid| grid.tables_mut()),
            ParamGroup::Geometry => self.geometry.params_mut(),
            ParamGroup::Color => self.color.params_mut(),
            ParamGroup::Feature => self.feature.params_mut(),
            ParamGroup::Semantic => self.semantic.params_mut(),
        }
    }

    pub fn zero_grads(&self) -> FieldGrads<T> {
        FieldGrads {
            hash_grid: vec![T::zero(); self.group(ParamGroup::HashGrid).len()],
            geometry: vec![T::zero(); self.geometry.param_count()],
            color: vec![T::zero(); self.color.param_count()],
            feature: vec![T::zero(); self.feature.param_count()],
            semantic: vec![T::zero(); self.semantic.param_count()],
        }
    }

    pub fn param_count(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).len()).sum()
    }

    /// Evaluates the field at `n` points (`n x 3`, normalized scene cube) with
    /// unit view directions (`n x 3`).
    pub fn query(
        &self,
        points: &[T],
        view_dirs: &[T],
        heads: Heads,
    ) -> Result<(FieldSamples<T>, FieldTrace<T>)> {
        if !points.len().is_multiple_of(3) || points.len() != view_dirs.len() {
            return Err(Error::Config(format!(
                "query needs matching n x 3 points and directions ({} vs {})",
                points.len(),
                view_dirs.len()
            )));
        }
        if points.iter().chain(view_dirs).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite field query input".into()));
        }
        let n = points.len() / 3;
        let w = self.config.trunk_width;

        let (encoded, encode) = self.encoder.encode(points);
        let geometry = self.geometry.forward(&encoded, n)?;
        let raw = geometry.output();
        let mut sigma = Vec::with_capacity(n);
        let mut trunk = Vec::with_capacity(n * w);
        for row in raw.chunks_exact(w + 1) {
            sigma.push(Activation::Softplus.apply(row[0]));
            trunk.extend(row[1..].iter().map(|&v| v.max(T::zero())));
        }

        let (rgb, color) = if heads.color {
            let dd = self.config.direction_dim();
            let cw = w + dd;
            let mut input = vec![T::zero(); n * cw];
            for ((row, h), d) in input
                .chunks_exact_mut(cw)
                .zip(trunk.chunks_exact(w))
                .zip(view_dirs.chunks_exact(3))
            {
                row[..w].copy_from_slice(h);
                freq_encode(d, self.config.direction_frequencies, &mut row[w..]);
            }
            let trace = self.color.forward(&input, n)?;
            (trace.output().to_vec(), Some(trace))
        } else {
            (Vec::new(), None)
        };

        let (features, logits, feature, semantic) = if heads.semantic {
            let ft = self.feature.forward(&trunk, n)?;
            let st = self.semantic.forward(ft.output(), n)?;
            (ft.output().to_vec(), st.output().to_vec(), Some(ft), Some(st))
        } else {
            (Vec::new(), Vec::new(), None, None)
        };

        let samples = FieldSamples {
            n,
            sigma: sigma.clone(),
            rgb,
            features,
            logits,
        };
        let trace = FieldTrace {
            n,
            heads,
            encode,
            geometry,
            sigma,
            color,
            feature,
            semantic,
        };
        Ok((samples, trace))
    }

    /// Backpropagates per-sample output gradients through every head, the
    /// trunk and the encoder. Empty slices stand for zero gradients of heads
    /// that were not evaluated.
    pub fn query_backward(
        &self,
        trace: &FieldTrace<T>,
        d_sigma: &[T],
        d_rgb: &[T],
        d_features: &[T],
        d_logits: &[T],
        grads: &mut FieldGrads<T>,
    ) -> Result<()> {
        let n = trace.n;
        let w = self.config.trunk_width;
        if d_sigma.len() != n {
            return Err(Error::Usage("density gradient length mismatch".into()));
        }
        let mut d_trunk = vec![T::zero(); n * w];

        if trace.heads.semantic {
            let (ft, st) = (
                trace.feature.as_ref().expect("feature trace"),
                trace.semantic.as_ref().expect("semantic trace"),
            );
            let mut d_f = if d_features.is_empty() {
                vec![T::zero(); n * self.config.feature_dim]
            } else {
                d_features.to_vec()
            };
            if !d_logits.is_empty() {
                let from_sem = self
                    .semantic
                    .backward(st, d_logits, &mut grads.semantic, true)?
                    .expect("input grad requested");
                for (a, b) in d_f.iter_mut().zip(from_sem) {
                    *a += b;
                }
            }
            let dh = self
                .feature
                .backward(ft, &d_f, &mut grads.feature, true)?
                .expect("input grad requested");
            if !self.config.detach_semantic {
                for (a, b) in d_trunk.iter_mut().zip(dh) {
                    *a += b;
                }
            }
        } else if !d_features.is_empty() || !d_logits.is_empty() {
            return Err(Error::Usage("semantic gradients given for a radiance-only query".into()));
        }

        if let Some(ct) = &trace.color {
            if !d_rgb.is_empty() {
                let d_in = self
                    .color
                    .backward(ct, d_rgb, &mut grads.color, true)?
                    .expect("input grad requested");
                let cw = w + self.config.direction_dim();
                for (dh, row) in d_trunk.chunks_exact_mut(w).zip(d_in.chunks_exact(cw)) {
                    for (a, &b) in dh.iter_mut().zip(&row[..w]) {
                        *a += b;
                    }
                }
            }
        } else if !d_rgb.is_empty() {
            return Err(Error::Usage("color gradient given for a query without color".into()));
        }

        let raw = trace.geometry.output();
        let mut d_raw = vec![T::zero(); n * (w + 1)];
        for i in 0..n {
            let row = &mut d_raw[i * (w + 1)..(i + 1) * (w + 1)];
            row[0] = d_sigma[i] * Activation::Softplus.derivative_from_output(trace.sigma[i]);
            let raw_row = &raw[i * (w + 1) + 1..(i + 1) * (w + 1)];
            for ((d, &r), &g) in row[1..].iter_mut().zip(raw_row).zip(&d_trunk[i * w..(i + 1) * w]) {
                *d = if r > T::zero() { g } else { T::zero() };
            }
        }
        let has_grid = self.encoder.grid().is_some();
        let d_enc = self
            .geometry
            .backward(&trace.geometry, &d_raw, &mut grads.geometry, has_grid)?;
        if let Some(d_enc) = d_enc {
            self.encoder.backward(&trace.encode, &d_enc, &mut grads.hash_grid);
        }
        Ok(())
    }

    /// Adds one semantic class. Logits of existing classes are unchanged;
    /// the new class starts with small random weights and zero bias.
    pub fn add_class(&mut self) -> Result<()> {
        let in_dim = self.semantic.specs()[self.semantic.num_layers() - 1].in_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.config.num_classes as u64).wrapping_mul(0x9e37_79b9));
        let limit = (3.0 / in_dim as f64).sqrt();
        let row: Vec<T> = (0..in_dim).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
        self.semantic.add_output(&row, T::zero())?;
        self.config.num_classes += 1;
        Ok(())
    }

    /// Semantic-group buffer regrown to match [`Field::add_class`], new entries
    /// filled with `fill`. Call before `add_class`.
    pub fn grow_semantic_layout<U: Clone>(&self, buf: &[U], fill: U) -> Vec<U> {
        let in_dim = self.semantic.specs()[self.semantic.num_layers() - 1].in_dim;
        self.semantic.grow_output_layout(buf, &vec![fill.clone(); in_dim], fill)
    }

    /// Rebuilds a field from a config and per-group flat parameters.
    pub fn from_groups(config: FieldConfig, groups: &[(ParamGroup, Vec<T>)]) -> Result<Self> {
        let mut field = Self::new(config)?;
        for (g, values) in groups {
            let dst = field.group_mut(*g);
            if dst.len() != values.len() {
                return Err(Error::Config(format!(
                    "group `{}` expects {} values, got {}",
                    g.name(),
                    dst.len(),
                    values.len()
                )));
            }
            dst.copy_from_slice(values);
        }
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(mode: EncoderMode) -> FieldConfig {
        let mut c = FieldConfig::for_mode(mode, 3);
        c.hash_grid.table_size = 1 << 12;
        c.trunk_width = 16;
        c.head_width = 16;
        c.feature_dim = 8;
        c.seed = 4;
        c
    }

    fn random_batch(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..3 * n).map(|_| r.random_range(-0.9..0.9)).collect();
        let mut dirs = Vec::new();
        for _ in 0..n {
            let d: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 0.5];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            dirs.extend(d.iter().map(|v| v / norm));
        }
        (pts, dirs)
    }

    #[test]
    fn outputs_in_activation_ranges() {
        for mode in [EncoderMode::Freq, EncoderMode::HashGrid, EncoderMode::Hybrid] {
            let field = Field::<f32>::new(small(mode)).unwrap();
            let (p, d) = random_batch(64, 1);
            let p: Vec<f32> = p.iter().map(|&v| v as f32).collect();
            let d: Vec<f32> = d.iter().map(|&v| v as f32).collect();
            let (s, _) = field.query(&p, &d, Heads::ALL).unwrap();
            assert!(s.sigma.iter().all(|&v| v >= 0.0 && v.is_finite()));
            assert!(s.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.features.len(), 64 * 8);
            assert_eq!(s.logits.len(), 64 * 3);
        }
    }

    #[test]
    fn features_and_logits_ignore_view_direction() {
        let field = Field::<f64>::new(small(EncoderMode::Hybrid)).unwrap();
        let p = vec![0.1, -0.2, 0.3];
        let (a, _) = field.query(&p, &[0.0, 0.0, 1.0], Heads::ALL).unwrap();
        let (b, _) = field.query(&p, &[0.6, 0.0, 0.8], Heads::ALL).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.sigma, b.sigma);
        assert_ne!(a.rgb, b.rgb);
    }

    #[test]
    fn default_feature_dim_is_64() {
        let field = Field::<f32>::new(FieldConfig::for_mode(EncoderMode::Hybrid, 2)).unwrap();
        let (s, _) = field.query(&[0.0; 3], &[0.0, 0.0, 1.0], Heads::ALL).unwrap();
        assert_eq!(s.features.len(), 64);
    }

    #[test]
    fn non_finite_query_rejected() {
        let field = Field::<f32>::new(small(EncoderMode::Hybrid)).unwrap();
        assert!(field.query(&[f32::NAN, 0.0, 0.0], &[0.0, 0.0, 1.0], Heads::ALL).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let field = Field::<f64>::new(small(EncoderMode::Hybrid)).unwrap();
        let (p, d) = random_batch(10, 2);
        let (_, trace) = field.query(&p, &d, Heads::ALL).unwrap();
        let mut g = field.zero_grads();
        field
            .query_backward(&trace, &[0.0; 10], &[0.0; 30], &[0.0; 80], &[0.0; 30], &mut g)
            .unwrap();
        assert_eq!(g, field.zero_grads());
    }

    #[test]
    fn semantic_upstream_leaves_color_grads_zero() {
        let field = Field::<f64>::new(small(EncoderMode::Hybrid)).unwrap();
        let (p, d) = random_batch(10, 3);
        let (_, trace) = field.query(&p, &d, Heads::ALL).unwrap();
        let mut g = field.zero_grads();
        let dl: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        field.query_backward(&trace, &[0.0; 10], &[], &[], &dl, &mut g).unwrap();
        assert!(g.color.iter().all(|&v| v == 0.0));
        assert!(g.semantic.iter().any(|&v| v != 0.0));
        assert!(g.geometry.iter().any(|&v| v != 0.0), "no stop-gradient by default");
    }

    #[test]
    fn add_class_keeps_existing_logits() {
        let mut field = Field::<f64>::new(small(EncoderMode::Hybrid)).unwrap();
        let (pts, dirs) = (vec![0.1, -0.2, 0.3, 0.0, 0.4, -0.5], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let before = field.query(&pts, &dirs, Heads::ALL).unwrap().0;
        let c = field.config().num_classes;
        let grown = field.grow_semantic_layout(field.group(ParamGroup::Semantic), 0.0);
        field.add_class().unwrap();
        assert_eq!(grown.len(), field.group(ParamGroup::Semantic).len());
        let after = field.query(&pts, &dirs, Heads::ALL).unwrap().0;
        assert_eq!(field.config().num_classes, c + 1);
        for i in 0..2 {
            assert_eq!(&after.logits[i * (c + 1)..i * (c + 1) + c], &before.logits[i * c..(i + 1) * c]);
        }
    }

    #[test]
    fn detach_flag_blocks_semantic_gradients_into_trunk() {
        let mut cfg = small(EncoderMode::Hybrid);
        cfg.detach_semantic = true;
        let field = Field::<f64>::new(cfg).unwrap();
        let (p, d) = random_batch(10, 3);
        let (_, trace) = field.query(&p, &d, Heads::ALL).unwrap();
        let mut g = field.zero_grads();
        let dl: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        field.query_backward(&trace, &[0.0; 10], &[], &[], &dl, &mut g).unwrap();
        assert!(g.geometry.iter().all(|&v| v == 0.0));
        assert!(g.hash_grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_are_reusable_across_encoders() {
        let a = Field::<f32>::new(small(EncoderMode::HashGrid)).unwrap();
        let mut cfg = small(EncoderMode::Hybrid);
        cfg.trunk_depth = 2;
        let b = Field::<f32>::new(cfg).unwrap();
        for g in [ParamGroup::Color, ParamGroup::Feature, ParamGroup::Semantic] {
            assert_eq!(a.group(g).len(), b.group(g).len());
        }
        assert_ne!(a.group(ParamGroup::Geometry).len(), b.group(ParamGroup::Geometry).len());
    }

    #[test]
    fn freq_mode_has_no_hash_group() {
        let f = Field::<f32>::new(small(EncoderMode::Freq)).unwrap();
        assert!(!f.groups().contains(&ParamGroup::HashGrid));
        assert!(f.group(ParamGroup::HashGrid).is_empty());
    }
}
