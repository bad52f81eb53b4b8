//! Sparse-scribble label propagation: a few strokes on a few training views,
//! dense segmentation scored on held-out views.

use serde::{Deserialize, Serialize};

use crate::encoding::EncoderMode;
use crate::error::{Error, Result};
use crate::objective::{AnnotationSet, LossWeights};
use crate::scene::SceneDataset;
use crate::trainer::{evaluate_segmentation, IouReport, RenderOptions, TrainConfig, Trainer};

/// Model variants compared by the propagation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    HybridFeatures,
    HybridNoFeatures,
    HashGridOnly,
    FreqNoFeatures,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::HybridFeatures => "hybrid+features",
            Variant::HybridNoFeatures => "hybrid",
            Variant::HashGridOnly => "hashgrid",
            Variant::FreqNoFeatures => "freq",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Variant::HybridFeatures)
    }

    /// `base` with the encoder and feature weight this variant prescribes.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        let mode = match self {
            Variant::HybridFeatures | Variant::HybridNoFeatures => EncoderMode::Hybrid,
            Variant::HashGridOnly => EncoderMode::HashGrid,
            Variant::FreqNoFeatures => EncoderMode::Freq,
        };
        config.set_encoder(mode);
        if !self.uses_features() {
            config.loss_weights = LossWeights {
                feature: 0.0,
                ..config.loss_weights
            };
        }
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScribbleConfig {
    /// Training frames that receive scribbles; defaults to the first and the
    /// one halfway around the orbit.
    pub frames: Option<Vec<usize>>,
    /// Pixels on either side of the stroke center.
    pub half_length: u32,
    /// Stroke pixels keep at least this Chebyshev distance from other classes.
    pub margin: u32,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        Self {
            frames: None,
            half_length: 3,
            margin: 2,
        }
    }
}

impl ScribbleConfig {
    pub fn resolve_frames(&self, dataset: &SceneDataset) -> Vec<usize> {
        match &self.frames {
            Some(f) => f.clone(),
            None => {
                let train = dataset.train_frames();
                let mut v = vec![train[0]];
                if train.len() > 1 {
                    v.push(train[train.len() / 2]);
                }
                v
            }
        }
    }
}

fn interior(labels: &[u16], w: usize, h: usize, class: u16, margin: u32) -> Vec<bool> {
    let m = margin as isize;
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != class {
                continue;
            }
            out[y * w + x] = (-m..=m).all(|dy| {
                (-m..=m).all(|dx| {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && labels[yy as usize * w + xx as usize] == class
                })
            });
        }
    }
    out
}

/// One horizontal stroke per class present in each chosen frame, through the
/// interior pixel closest to the class centroid. Labels come from the dense
/// reference maps.
pub fn scribble_annotations(dataset: &SceneDataset, config: &ScribbleConfig) -> Result<AnnotationSet> {
    let mut set = dataset.empty_annotations();
    for f in config.resolve_frames(dataset) {
        let frame = dataset
            .frames
            .get(f)
            .ok_or_else(|| Error::Config(format!("scribble frame {f} out of range")))?;
        let labels = frame
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("frame {} has no reference labels", frame.id)))?;
        let (w, h) = (frame.camera.width as usize, frame.camera.height as usize);
        for class in 0..dataset.num_classes() as u16 {
            let mask = interior(labels, w, h, class, config.margin);
            let pts: Vec<(usize, usize)> = (0..w * h).filter(|&i| mask[i]).map(|i| (i % w, i / w)).collect();
            if pts.is_empty() {
                continue;
            }
            let cx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / pts.len() as f64;
            let cy = pts.iter().map(|p| p.1 as f64).sum::<f64>() / pts.len() as f64;
            let &(x0, y0) = pts
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - cx).powi(2) + (a.1 as f64 - cy).powi(2);
                    let db = (b.0 as f64 - cx).powi(2) + (b.1 as f64 - cy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("non-empty");
            let mut pixels = vec![[x0 as u32, y0 as u32]];
            for dir in [-1isize, 1] {
                for k in 1..=config.half_length as isize {
                    let x = x0 as isize + dir * k;
                    if x < 0 || x as usize >= w || !mask[y0 * w + x as usize] {
                        break;
                    }
                    pixels.push([x as u32, y0 as u32]);
                }
            }
            pixels.sort_unstable();
            set.add_stroke(f, class as u32, pixels)?;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub variant: Variant,
    pub seed: u64,
    pub labeled_pixels: usize,
    pub iou: IouReport,
}

/// Trains `variant` from scratch on the scribbles and scores held-out frames.
pub fn run_propagation(
    dataset: &SceneDataset,
    annotations: &AnnotationSet,
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<PropagationResult> {
    let mut config = variant.configure(base);
    config.seed = seed;
    if variant.uses_features() && !dataset.has_targets() {
        return Err(Error::Config("feature variant needs encoded feature targets".into()));
    }
    let mut trainer = Trainer::new(config)?;
    let index = annotations.index();
    trainer.train(dataset, &index, base.iterations, |_, _| Ok(()))?;
    let options = RenderOptions::from_config(trainer.config());
    let (iou, _) = evaluate_segmentation(trainer.field(), dataset, &dataset.test_frames(), &options)?;
    Ok(PropagationResult {
        variant,
        seed,
        labeled_pixels: annotations.labeled_pixel_count(),
        iou,
    })
}
